// detgan command-line runner.
//
//   detgan gen-data --config exp.cfg --out runs/a
//   detgan train --config exp.cfg --mode no_unroll --seed 3
//   detgan table1 --config exp.cfg
//   detgan eval --predictions preds.txt --annotations gt.txt
//   detgan --print-defaults
//
// Failures print one line `error kind=<kind> message="<text>"` to stderr.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "detgan/errors.hpp"
#include "detgan/experiment.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
    if (c == '"') c = '\'';
  }
  return s;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << "error kind=" << kind << " message=\"" << one_line(message) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detgan: detection-aware augmentation toy lab"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path;
  std::string mode;
  long long seed = -1;
  std::string out_dir;
  std::vector<std::string> overrides;
  bool print_defaults = false;
  app.add_option("--config", config_path, "Config file (key = value with [sections])");
  app.add_option("--mode", mode, "Ablation mode: full, no_unroll, acgan_like, real_only");
  app.add_option("--seed", seed, "Training seed (table1: run only this seed)");
  app.add_option("--out", out_dir, "Output directory (overrides experiment.out_dir)");
  app.add_option("--set", overrides, "Override a config key, e.g. --set train.joint_iters=50");
  app.add_flag("--print-defaults", print_defaults, "Print every config key with its value and exit");

  auto* gen = app.add_subcommand("gen-data", "Write train/val/test dataset files");
  auto* train = app.add_subcommand("train", "Run the training schedule for one mode and seed");
  auto* table1 = app.add_subcommand("table1", "Ablation table: every mode x seed, plus medians");
  auto* eval = app.add_subcommand("eval", "Metrics for interchange prediction/annotation files");
  std::string predictions, annotations, eval_out;
  eval->add_option("--predictions", predictions, "Prediction lines (kind conf)")->required();
  eval->add_option("--annotations", annotations, "Annotation lines (kind gt)")->required();
  eval->add_option("--csv", eval_out, "Write the CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    detgan::ExperimentConfig cfg = config_path.empty() ? detgan::ExperimentConfig{} : detgan::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw detgan::ParseError("--set expects key=value, got '" + kv + "'", 0);
      detgan::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!mode.empty()) detgan::set_config_value(cfg, "train.mode", mode);
    if (seed >= 0) {
      cfg.train.seed = static_cast<std::uint64_t>(seed);
      cfg.seeds = {cfg.train.seed};
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!mode.empty() && table1->parsed()) cfg.modes = {cfg.train.mode};

    if (print_defaults) {
      std::cout << detgan::format_config(cfg);
      return 0;
    }
    if (gen->parsed()) {
      detgan::cmd_gen_data(cfg, std::cout);
    } else if (train->parsed()) {
      detgan::cmd_train(cfg, std::cout);
    } else if (table1->parsed()) {
      const detgan::Table1 t = detgan::cmd_table1(cfg, std::cerr);
      std::cout << detgan::table1_csv(t);
    } else if (eval->parsed()) {
      const std::string csv = detgan::cmd_eval(predictions, annotations, cfg.eval);
      if (eval_out.empty()) {
        std::cout << csv;
      } else {
        detgan::write_text_file(eval_out, csv);
      }
    } else {
      std::cout << app.help();
      return 2;
    }
  } catch (const detgan::TrainingAborted& e) {
    return fail("numeric", e.what(), 4);
  } catch (const detgan::ParseError& e) {
    return fail("parse", e.what(), 2);
  } catch (const detgan::IoError& e) {
    return fail("io", e.what(), 3);
  } catch (const detgan::ContractError& e) {
    return fail("config", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
