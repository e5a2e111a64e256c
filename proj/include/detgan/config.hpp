#pragma once

// Experiment configuration as flat `key = value` text with [section] headers.
// Keys are strict: anything not in the table below is a ParseError naming it.
//
//   [train]
//   joint_iters = 3000
//   mode = full

#include <cstdint>
#include <string>
#include <vector>

#include "detgan/eval.hpp"
#include "detgan/scenes.hpp"
#include "detgan/trainer.hpp"

namespace detgan {

struct ExperimentConfig {
  SceneConfig scene{};
  TrainConfig train{};
  FreshDetectorConfig fresh{};
  EvalThresholds eval{};
  DecodeConfig decode{};
  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<AblationMode> modes = all_modes();
  std::size_t synthetic_count = 200;

  void validate() const;
};

/// Apply `section.key = value`. ParseError names the key when it is unknown
/// or the value does not parse.
void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value);

/// Parse config text on top of `cfg`. ParseError positions are line numbers.
void apply_config_text(ExperimentConfig& cfg, const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Every key with its current value, in config-file syntax.
std::string format_config(const ExperimentConfig& cfg);

}  // namespace detgan
