#pragma once

// Experiment commands behind the CLI. Each writes into cfg.out_dir and
// overwrites previous outputs.

#include <ostream>
#include <string>
#include <vector>

#include "detgan/config.hpp"

namespace detgan {

struct DatasetFiles {
  std::string train_labelled, train_clean, val, test;
};
DatasetFiles dataset_files(const std::string& dir);

/// Generate and write the four splits; logs one `split,count,path` line each.
DatasetFiles cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);
Dataset load_dataset(const std::string& dir);

struct TrainOutputs {
  std::string dir, metrics_csv, evals_csv;
  std::vector<std::string> checkpoints;
};

/// Runs the training schedule for cfg.train.mode / cfg.train.seed on the
/// dataset in cfg.out_dir.
TrainOutputs cmd_train(const ExperimentConfig& cfg, std::ostream& log);

struct Table1Row {
  AblationMode mode;
  std::uint64_t seed;
  double ap;
  double recall;
  std::size_t synthetic_count;
};

struct Table1 {
  std::vector<Table1Row> rows;
  std::vector<Table1Row> medians;  // seed field unused
};

/// Train under one mode/seed, build the synthetic pool, train a fresh
/// detector on real plus synthetic, evaluate on the test split.
Table1Row run_table1_cell(const ExperimentConfig& cfg, const Dataset& data, AblationMode mode, std::uint64_t seed,
                          std::ostream& log);

Table1 cmd_table1(const ExperimentConfig& cfg, std::ostream& log);
std::string table1_csv(const Table1& t);
double median(std::vector<double> values);

/// EvalReport CSV for interchange prediction/annotation files.
std::string cmd_eval(const std::string& predictions_path, const std::string& annotations_path,
                     const EvalThresholds& thresholds);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace detgan
