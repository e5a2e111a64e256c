#include "detgan/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "detgan/errors.hpp"

namespace detgan {

namespace {

std::vector<std::size_t> by_confidence(const std::vector<Detection>& preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&preds](std::size_t a, std::size_t b) {
    return preds[a].confidence > preds[b].confidence;
  });
  return order;
}

std::size_t total_gts(const PerImageGts& gts) {
  std::size_t n = 0;
  for (const auto& g : gts) n += g.size();
  return n;
}

void check_sizes(const PerImagePreds& preds, const PerImageGts& gts) {
  if (preds.size() != gts.size()) throw ContractError("predictions and annotations cover different image counts");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

MatchResult match_predictions(const std::vector<Detection>& preds, const std::vector<Box>& gts,
                              double thresh, const OverlapFn& overlap) {
  if (thresh < 0 || thresh > 1) throw ContractError("match threshold must lie in [0, 1]");
  MatchResult m;
  m.order = by_confidence(preds);
  m.pred_tp.assign(preds.size(), false);
  m.gt_matched.assign(gts.size(), false);
  for (std::size_t p : m.order) {
    double best = -1.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_matched[g]) continue;
      const double o = overlap(preds[p].box, gts[g]);
      if (o >= thresh && o > best) {
        best = o;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      m.pred_tp[p] = true;
      m.gt_matched[static_cast<std::size_t>(best_gt)] = true;
    }
  }
  return m;
}

double average_precision(const PerImagePreds& preds, const PerImageGts& gts, double iou_thresh) {
  check_sizes(preds, gts);
  const std::size_t n_gt = total_gts(gts);
  if (n_gt == 0) throw ContractError("average_precision needs at least one gt box");

  struct Scored {
    double confidence;
    bool tp;
  };
  std::vector<Scored> all;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const MatchResult m = match_predictions(preds[i], gts[i], iou_thresh);
    for (std::size_t p = 0; p < preds[i].size(); ++p) all.push_back({preds[i][p].confidence, m.pred_tp[p]});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Scored& a, const Scored& b) { return a.confidence > b.confidence; });

  std::vector<double> precision, rec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    tp += all[k].tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  // Monotone envelope from the right, then sum over recall increments.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    if (rec[k] > prev_recall) {
      ap += (rec[k] - prev_recall) * precision[k];
      prev_recall = rec[k];
    }
  }
  return ap;
}

double recall(const PerImagePreds& preds, const PerImageGts& gts, double iou_thresh, double conf_thresh) {
  check_sizes(preds, gts);
  const std::size_t n_gt = total_gts(gts);
  if (n_gt == 0) throw ContractError("recall needs at least one gt box");
  std::size_t matched = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::vector<Detection> kept;
    for (const auto& d : preds[i]) {
      if (d.confidence >= conf_thresh) kept.push_back(d);
    }
    const MatchResult m = match_predictions(kept, gts[i], iou_thresh);
    matched += static_cast<std::size_t>(std::count(m.gt_matched.begin(), m.gt_matched.end(), true));
  }
  return static_cast<double>(matched) / static_cast<double>(n_gt);
}

std::map<double, double> localization_accuracy(const PerImagePreds& preds, const PerImageGts& gts,
                                               const std::vector<double>& thresholds,
                                               const OverlapFn& overlap) {
  check_sizes(preds, gts);
  if (gts.empty()) throw ContractError("localization_accuracy needs at least one image");
  std::vector<double> best_overlap(gts.size(), -1.0);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].empty()) throw ContractError("localization_accuracy: image " + std::to_string(i) + " has no gt");
    if (preds[i].empty()) continue;
    const Detection& top = preds[i][by_confidence(preds[i]).front()];
    for (const auto& g : gts[i]) best_overlap[i] = std::max(best_overlap[i], overlap(top.box, g));
  }
  std::map<double, double> out;
  for (double t : thresholds) {
    std::size_t correct = 0;
    for (double o : best_overlap) correct += (o >= t);
    out[t] = static_cast<double>(correct) / static_cast<double>(gts.size());
  }
  return out;
}

EvalReport evaluate(const PerImagePreds& preds, const PerImageGts& gts, const EvalThresholds& t) {
  EvalReport r;
  r.ap = average_precision(preds, gts, t.ap_iou);
  r.recall = recall(preds, gts, t.recall_iou, t.recall_conf);
  r.loc_acc_iou = localization_accuracy(preds, gts, t.loc_iou, iou);
  r.loc_acc_iobb = localization_accuracy(preds, gts, t.loc_iobb, iobb);
  auto mean = [](const std::map<double, double>& m) {
    double s = 0;
    for (const auto& [k, v] : m) s += v;
    return m.empty() ? 0.0 : s / static_cast<double>(m.size());
  };
  r.loc_acc_iou_avg = mean(r.loc_acc_iou);
  r.loc_acc_iobb_avg = mean(r.loc_acc_iobb);
  return r;
}

std::string eval_report_csv(const EvalReport& r, const EvalThresholds& t) {
  std::ostringstream os;
  os << "metric,threshold,value\n";
  os << "ap," << fmt(t.ap_iou) << ',' << fmt(r.ap) << '\n';
  os << "recall," << fmt(t.recall_iou) << ',' << fmt(r.recall) << '\n';
  for (const auto& [k, v] : r.loc_acc_iou) os << "loc_acc_iou," << fmt(k) << ',' << fmt(v) << '\n';
  os << "loc_acc_iou,avg," << fmt(r.loc_acc_iou_avg) << '\n';
  for (const auto& [k, v] : r.loc_acc_iobb) os << "loc_acc_iobb," << fmt(k) << ',' << fmt(v) << '\n';
  os << "loc_acc_iobb,avg," << fmt(r.loc_acc_iobb_avg) << '\n';
  return os.str();
}

void parse_interchange(const std::string& text, std::map<std::string, std::vector<Detection>>& preds,
                       std::map<std::string, std::vector<Box>>& gts) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string id, kind;
    Box b;
    auto fail = [&](const std::string& why) {
      throw ParseError("line " + std::to_string(line_no) + ": " + why, line_no);
    };
    if (!(ls >> id >> kind)) fail("expected image_id and kind");
    if (!(ls >> b.x_min >> b.y_min >> b.x_max >> b.y_max)) fail("expected four box coordinates");
    if (!b.valid()) fail("degenerate box");
    if (kind == "conf") {
      double c;
      if (!(ls >> c)) fail("prediction without confidence");
      preds[id].push_back({b, c});
    } else if (kind == "gt") {
      gts[id].push_back(b);
    } else {
      fail("unknown kind '" + kind + "' (expected conf or gt)");
    }
    std::string extra;
    if (ls >> extra) fail("unexpected trailing field '" + extra + "'");
  }
}

Interchange load_interchange(const std::string& predictions_text, const std::string& annotations_text) {
  std::map<std::string, std::vector<Detection>> preds;
  std::map<std::string, std::vector<Box>> gts, stray_gts;
  std::map<std::string, std::vector<Detection>> stray_preds;
  parse_interchange(predictions_text, preds, stray_gts);
  parse_interchange(annotations_text, stray_preds, gts);
  if (!stray_gts.empty()) throw ParseError("predictions file contains gt lines", 0);
  if (!stray_preds.empty()) throw ParseError("annotations file contains conf lines", 0);
  Interchange out;
  for (const auto& [id, boxes] : gts) {
    out.image_ids.push_back(id);
    out.gts.push_back(boxes);
    auto it = preds.find(id);
    out.preds.push_back(it == preds.end() ? std::vector<Detection>{} : it->second);
  }
  for (const auto& [id, p] : preds) {
    if (!gts.count(id)) throw ParseError("prediction for unannotated image '" + id + "'", 0);
  }
  return out;
}

}  // namespace detgan
