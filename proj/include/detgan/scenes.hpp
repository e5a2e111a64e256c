#pragma once

// Procedural toy data: smooth noisy backgrounds (clean domain) and the same
// kind of background with one bright soft-edged ellipse (labelled domain).
//
// Dataset file layout, little-endian:
//   "DGN1", u32 sample count, then per sample:
//   u8 domain (0 clean, 1 labelled), u16 side, f64 pixels[side*side],
//   u16 box count, 4 x f64 per box (x_min y_min x_max y_max),
//   f64 mask[side*side]

#include <cstdint>
#include <string>
#include <vector>

#include "detgan/box.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

enum class Domain : std::uint8_t { Clean = 0, Labelled = 1 };

struct SceneSample {
  Tensor image;  // [1, side, side] in [-1, 1]
  Domain domain = Domain::Clean;
  std::vector<Box> boxes;  // empty iff Clean
  Tensor mask;             // [1, side, side], ones over the box
};

struct SceneConfig {
  int image_side = 32;
  double object_size_min = 4.0;
  double object_size_max = 12.0;
  double background_level = -0.5;
  double background_amplitude = 0.25;
  int background_grid = 4;  // control points per axis of the smooth component
  double texture_amplitude = 0.06;
  double object_intensity_min = 0.6;
  double object_intensity_max = 1.0;
  double edge_softness = 0.15;
  /// Required gap between mean intensity inside and outside the box.
  double min_contrast = 0.1;
  int insertion_shift = 3;
  int train_labelled = 8;
  int train_clean = 200;
  int val_labelled = 50;
  int test_labelled = 100;
  std::uint64_t seed = 1;

  void validate() const;
};

SceneSample make_clean(const SceneConfig& cfg, std::uint64_t seed);
SceneSample make_labelled(const SceneConfig& cfg, std::uint64_t seed);

/// Rectangle of ones over the box's pixel cover.
Tensor box_mask(const Box& box, int side);

struct Insertion {
  Tensor mask;
  Box box;
  std::size_t reference = 0;  // index into the labelled pool
};

/// Pick the pool image closest to `clean` in mean L1, take its box, shift it
/// uniformly by up to `shift` pixels per axis while keeping a 1-pixel margin.
Insertion sample_insertion(const SceneSample& clean, const std::vector<SceneSample>& pool,
                           std::uint64_t seed, int shift = 3);

struct Dataset {
  std::vector<SceneSample> train_labelled;
  std::vector<SceneSample> train_clean;
  std::vector<SceneSample> val;
  std::vector<SceneSample> test;
};

/// Deterministic function of cfg (including its seed).
Dataset make_dataset(const SceneConfig& cfg);

std::string encode_samples(const std::vector<SceneSample>& samples);
std::vector<SceneSample> decode_samples(std::string_view bytes);
void write_samples(const std::string& path, const std::vector<SceneSample>& samples);
std::vector<SceneSample> read_samples(const std::string& path);

}  // namespace detgan
