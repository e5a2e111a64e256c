#include "detgan/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "detgan/errors.hpp"

namespace detgan {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ParseError("invalid value '" + value + "' for key '" + key + "' (expected " + expected + ")", 0);
}

template <class T>
T parse_number(const std::string& key, const std::string& value, const char* expected) {
  T out{};
  const char* first = value.data();
  const char* last = first + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) bad_value(key, value, expected);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  // from_chars for double is not available on every standard library; strtod
  // with a full-consumption check is equivalent here.
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += f(xs[i]);
  }
  return out;
}

struct Field {
  std::string key;  // section.name
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define DG_INT(section, name, expr)                                                                         \
  Field {                                                                                                   \
    section "." #name,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { expr = parse_number<int>(k, v, "an integer"); }, \
        [](const ExperimentConfig& c) { return std::to_string(expr); }                                      \
  }
#define DG_SIZE(section, name, expr)                                                                        \
  Field {                                                                                                   \
    section "." #name,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                              \
          expr = parse_number<std::size_t>(k, v, "a non-negative integer");                                 \
        },                                                                                                  \
        [](const ExperimentConfig& c) { return std::to_string(expr); }                                      \
  }
#define DG_U64(section, name, expr)                                                                         \
  Field {                                                                                                   \
    section "." #name,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                              \
          expr = parse_number<std::uint64_t>(k, v, "a non-negative integer");                               \
        },                                                                                                  \
        [](const ExperimentConfig& c) { return std::to_string(expr); }                                      \
  }
#define DG_DOUBLE(section, name, expr)                                                                      \
  Field {                                                                                                   \
    section "." #name,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { expr = parse_double(k, v); }, \
        [](const ExperimentConfig& c) { return fmt(expr); }                                                 \
  }
#define DG_BOOL(section, name, expr)                                                                        \
  Field {                                                                                                   \
    section "." #name,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { expr = parse_bool(k, v); },   \
        [](const ExperimentConfig& c) { return std::string((expr) ? "true" : "false"); }                    \
  }

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DG_INT("scene", image_side, c.scene.image_side),
      DG_DOUBLE("scene", object_size_min, c.scene.object_size_min),
      DG_DOUBLE("scene", object_size_max, c.scene.object_size_max),
      DG_DOUBLE("scene", background_level, c.scene.background_level),
      DG_DOUBLE("scene", background_amplitude, c.scene.background_amplitude),
      DG_INT("scene", background_grid, c.scene.background_grid),
      DG_DOUBLE("scene", texture_amplitude, c.scene.texture_amplitude),
      DG_DOUBLE("scene", object_intensity_min, c.scene.object_intensity_min),
      DG_DOUBLE("scene", object_intensity_max, c.scene.object_intensity_max),
      DG_DOUBLE("scene", edge_softness, c.scene.edge_softness),
      DG_DOUBLE("scene", min_contrast, c.scene.min_contrast),
      DG_INT("scene", insertion_shift, c.scene.insertion_shift),
      DG_INT("scene", train_labelled, c.scene.train_labelled),
      DG_INT("scene", train_clean, c.scene.train_clean),
      DG_INT("scene", val_labelled, c.scene.val_labelled),
      DG_INT("scene", test_labelled, c.scene.test_labelled),
      DG_U64("scene", seed, c.scene.seed),

      DG_INT("train", pretrain_gan_iters, c.train.pretrain_gan_iters),
      DG_INT("train", pretrain_det_iters, c.train.pretrain_det_iters),
      DG_INT("train", joint_iters, c.train.joint_iters),
      DG_INT("train", batch_size, c.train.batch_size),
      DG_DOUBLE("train", gan_lr, c.train.gan_lr),
      DG_DOUBLE("train", det_lr, c.train.det_lr),
      Field{"train.inner_lr",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              if (v == "auto") {
                c.train.inner_lr.reset();
              } else {
                c.train.inner_lr = parse_double(k, v);
              }
            },
            [](const ExperimentConfig& c) { return c.train.inner_lr ? fmt(*c.train.inner_lr) : std::string("auto"); }},
      DG_BOOL("train", include_real_in_inner, c.train.include_real_in_inner),
      DG_SIZE("train", history_capacity, c.train.history_capacity),
      DG_INT("train", local_crop, c.train.local_crop),
      Field{"train.mode",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              try {
                c.train.mode = parse_mode(v);
              } catch (const ContractError&) {
                bad_value(k, v, "full, no_unroll, acgan_like or real_only");
              }
            },
            [](const ExperimentConfig& c) { return to_string(c.train.mode); }},
      DG_U64("train", seed, c.train.seed),
      DG_INT("train", eval_every, c.train.eval_every),
      DG_INT("train", checkpoint_every, c.train.checkpoint_every),

      DG_DOUBLE("loss", lambda_cycle, c.train.weights.cycle),
      DG_DOUBLE("loss", lambda_identity, c.train.weights.identity),
      DG_DOUBLE("loss", lambda_bbox, c.train.weights.bbox),
      DG_DOUBLE("loss", lambda_det_real, c.train.weights.det_real),
      DG_DOUBLE("loss", lambda_det_syn, c.train.weights.det_syn),
      DG_DOUBLE("loss", focal_alpha, c.train.det_loss.alpha),
      DG_DOUBLE("loss", focal_gamma, c.train.det_loss.gamma),
      DG_DOUBLE("loss", positive_iou, c.train.det_loss.thresholds.positive_iou),
      DG_DOUBLE("loss", negative_iou, c.train.det_loss.thresholds.negative_iou),

      DG_INT("fresh", iters, c.fresh.iters),
      DG_INT("fresh", batch_size, c.fresh.batch_size),
      DG_DOUBLE("fresh", lr, c.fresh.lr),
      DG_DOUBLE("fresh", momentum, c.fresh.momentum),

      DG_DOUBLE("eval", ap_iou, c.eval.ap_iou),
      DG_DOUBLE("eval", recall_iou, c.eval.recall_iou),
      DG_DOUBLE("eval", recall_conf, c.eval.recall_conf),
      Field{"eval.loc_iou",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.eval.loc_iou = parse_double_list(k, v); },
            [](const ExperimentConfig& c) { return join<double>(c.eval.loc_iou, fmt); }},
      Field{"eval.loc_iobb",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.eval.loc_iobb = parse_double_list(k, v); },
            [](const ExperimentConfig& c) { return join<double>(c.eval.loc_iobb, fmt); }},
      DG_DOUBLE("eval", score_thresh, c.decode.score_thresh),
      DG_DOUBLE("eval", nms_iou, c.decode.nms_iou),

      Field{"experiment.out_dir",
            [](ExperimentConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
            [](const ExperimentConfig& c) { return c.out_dir; }},
      Field{"experiment.seeds",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.seeds.clear();
              for (const auto& item : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>(k, item, "integers"));
            },
            [](const ExperimentConfig& c) {
              return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
            }},
      Field{"experiment.modes",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.modes.clear();
              for (const auto& item : split_list(v)) {
                try {
                  c.modes.push_back(parse_mode(item));
                } catch (const ContractError&) {
                  bad_value(k, item, "full, no_unroll, acgan_like or real_only");
                }
              }
            },
            [](const ExperimentConfig& c) {
              return join<AblationMode>(c.modes, [](const AblationMode& m) { return to_string(m); });
            }},
      DG_SIZE("experiment", synthetic_count, c.synthetic_count),
  };
  return table;
}

#undef DG_INT
#undef DG_SIZE
#undef DG_U64
#undef DG_DOUBLE
#undef DG_BOOL

}  // namespace

void ExperimentConfig::validate() const {
  scene.validate();
  train.validate();
  if (seeds.empty()) throw ContractError("experiment.seeds must not be empty");
  if (modes.empty()) throw ContractError("experiment.modes must not be empty");
  if (fresh.iters < 0 || fresh.batch_size < 1) throw ContractError("fresh detector schedule invalid");
  if (decode.score_thresh < 0 || decode.score_thresh > 1 || decode.nms_iou < 0 || decode.nms_iou > 1) {
    throw ContractError("eval.score_thresh and eval.nms_iou must lie in [0, 1]");
  }
}

void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == dotted_key) {
      f.set(cfg, dotted_key, value);
      return;
    }
  }
  throw ParseError("unknown config key '" + dotted_key + "'", 0);
}

void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("line " + std::to_string(line_no) + ": malformed section header", line_no);
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("line " + std::to_string(line_no) + ": expected key = value", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string dotted = section.empty() ? key : section + "." + key;
    try {
      set_config_value(cfg, dotted, value);
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

std::string format_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out += "\n";
      out += "[" + s + "]\n";
      section = s;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace detgan
