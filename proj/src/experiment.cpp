#include "detgan/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "detgan/errors.hpp"

namespace detgan {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

// Round-trip precision so medians can be recomputed exactly from the rows.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

DatasetFiles dataset_files(const std::string& dir) {
  return {dir + "/train_labelled.dgn", dir + "/train_clean.dgn", dir + "/val.dgn", dir + "/test.dgn"};
}

DatasetFiles cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.scene.validate();
  ensure_dir(cfg.out_dir);
  const Dataset d = make_dataset(cfg.scene);
  const DatasetFiles files = dataset_files(cfg.out_dir);
  const std::pair<const char*, std::pair<const std::string*, const std::vector<SceneSample>*>> splits[] = {
      {"train_labelled", {&files.train_labelled, &d.train_labelled}},
      {"train_clean", {&files.train_clean, &d.train_clean}},
      {"val", {&files.val, &d.val}},
      {"test", {&files.test, &d.test}},
  };
  for (const auto& [name, entry] : splits) {
    write_samples(*entry.first, *entry.second);
    log << name << ',' << entry.second->size() << ',' << *entry.first << '\n';
  }
  return files;
}

Dataset load_dataset(const std::string& dir) {
  const DatasetFiles files = dataset_files(dir);
  Dataset d;
  d.train_labelled = read_samples(files.train_labelled);
  d.train_clean = read_samples(files.train_clean);
  d.val = read_samples(files.val);
  d.test = read_samples(files.test);
  return d;
}

TrainOutputs cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Dataset data = load_dataset(cfg.out_dir);
  TrainConfig train = cfg.train;
  train.insertion_shift = cfg.scene.insertion_shift;
  TrainOutputs out;
  out.dir = cfg.out_dir + "/train_" + to_string(train.mode) + "_seed" + std::to_string(train.seed);
  ensure_dir(out.dir);
  train.checkpoint_dir = out.dir;
  const TrainResult result = run_schedule(train, data, cfg.eval, cfg.decode);
  out.metrics_csv = out.dir + "/metrics.csv";
  out.evals_csv = out.dir + "/eval.csv";
  write_text_file(out.metrics_csv, metrics_csv(result.metrics));
  write_text_file(out.evals_csv, evals_csv(result.evals));
  out.checkpoints = result.checkpoints;
  log << "mode=" << to_string(train.mode) << " seed=" << train.seed << " metric_rows=" << result.metrics.size()
      << " metrics=" << out.metrics_csv << '\n';
  return out;
}

Table1Row run_table1_cell(const ExperimentConfig& cfg, const Dataset& data, AblationMode mode, std::uint64_t seed,
                          std::ostream& log) {
  TrainConfig train = cfg.train;
  train.mode = mode;
  train.seed = seed;
  train.insertion_shift = cfg.scene.insertion_shift;
  train.checkpoint_dir.clear();
  train.checkpoint_every = 0;
  train.eval_every = 0;

  std::vector<SceneSample> synthetic;
  if (mode != AblationMode::RealOnly) {
    const TrainResult result = run_schedule(train, data, cfg.eval, cfg.decode);
    synthetic = synthetic_pool(result.bundle.gx, data, cfg.synthetic_count, cfg.scene.insertion_shift, seed);
  }
  FreshDetectorConfig fresh = cfg.fresh;
  fresh.seed = seed;
  fresh.detector = train.detector;
  fresh.grid = train.grid;
  fresh.det_loss = train.det_loss;
  const DetectorParams det = train_fresh_detector(data.train_labelled, synthetic, fresh);
  const EvalReport rep = evaluate_detector(det, fresh.grid, data.test, cfg.eval, cfg.decode);
  log << "mode=" << to_string(mode) << " seed=" << seed << " real=" << data.train_labelled.size()
      << " synthetic=" << synthetic.size() << " ap=" << fmt(rep.ap) << " recall=" << fmt(rep.recall) << '\n';
  return {mode, seed, rep.ap, rep.recall, synthetic.size()};
}

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Table1 cmd_table1(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Dataset data = load_dataset(cfg.out_dir);
  Table1 t;
  for (AblationMode mode : cfg.modes) {
    std::vector<double> aps, recalls;
    for (std::uint64_t seed : cfg.seeds) {
      const Table1Row row = run_table1_cell(cfg, data, mode, seed, log);
      t.rows.push_back(row);
      aps.push_back(row.ap);
      recalls.push_back(row.recall);
    }
    t.medians.push_back({mode, 0, median(aps), median(recalls), 0});
  }
  write_text_file(cfg.out_dir + "/table1.csv", table1_csv(t));
  return t;
}

std::string table1_csv(const Table1& t) {
  std::ostringstream os;
  os << "mode,seed,AP,recall\n";
  for (const auto& r : t.rows) os << to_string(r.mode) << ',' << r.seed << ',' << fmt(r.ap) << ',' << fmt(r.recall) << '\n';
  for (const auto& r : t.medians) os << to_string(r.mode) << ",median," << fmt(r.ap) << ',' << fmt(r.recall) << '\n';
  return os.str();
}

std::string cmd_eval(const std::string& predictions_path, const std::string& annotations_path,
                     const EvalThresholds& thresholds) {
  const Interchange data = load_interchange(read_text_file(predictions_path), read_text_file(annotations_path));
  return eval_report_csv(evaluate(data.preds, data.gts, thresholds), thresholds);
}

}  // namespace detgan
