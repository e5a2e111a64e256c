#pragma once

// Detection metrics: all-point AP, recall, and localization accuracy under
// IoU and IoBB thresholds.
//
// Interchange format, one box per line:
//   image_id kind x_min y_min x_max y_max [confidence]
// where kind is `conf` (prediction, confidence required) or `gt`.
// Blank lines and lines starting with '#' are skipped.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "detgan/box.hpp"
#include "detgan/networks.hpp"

namespace detgan {

using OverlapFn = std::function<double(const Box& pred, const Box& gt)>;

struct MatchResult {
  std::vector<std::size_t> order;  // prediction indices by descending confidence
  std::vector<bool> pred_tp;       // indexed like the input predictions
  std::vector<bool> gt_matched;
};

/// Each prediction, most confident first, takes the unmatched gt with the
/// highest overlap >= thresh (ties to the lower gt index).
MatchResult match_predictions(const std::vector<Detection>& preds, const std::vector<Box>& gts,
                              double thresh, const OverlapFn& overlap = iou);

using PerImagePreds = std::vector<std::vector<Detection>>;
using PerImageGts = std::vector<std::vector<Box>>;

/// All-point interpolated AP over the whole set. ContractError without gts.
double average_precision(const PerImagePreds& preds, const PerImageGts& gts, double iou_thresh);

/// Matched gts / total gts using predictions with confidence >= conf_thresh.
double recall(const PerImagePreds& preds, const PerImageGts& gts, double iou_thresh, double conf_thresh);

/// Fraction of images whose top-confidence prediction overlaps some gt by at
/// least T, for each T. Every image needs a gt.
std::map<double, double> localization_accuracy(const PerImagePreds& preds, const PerImageGts& gts,
                                               const std::vector<double>& thresholds,
                                               const OverlapFn& overlap);

struct EvalThresholds {
  double ap_iou = 0.5;
  double recall_iou = 0.5;
  double recall_conf = 0.5;
  std::vector<double> loc_iou{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> loc_iobb{0.1, 0.25, 0.5, 0.75};
};

struct EvalReport {
  double ap = 0;
  double recall = 0;
  std::map<double, double> loc_acc_iou;
  std::map<double, double> loc_acc_iobb;
  double loc_acc_iou_avg = 0;
  double loc_acc_iobb_avg = 0;
};

EvalReport evaluate(const PerImagePreds& preds, const PerImageGts& gts, const EvalThresholds& t = {});

/// `metric,threshold,value` rows (header included); averages use threshold `avg`.
std::string eval_report_csv(const EvalReport& report, const EvalThresholds& t);

struct Interchange {
  std::vector<std::string> image_ids;  // sorted ids of the annotated images
  PerImagePreds preds;
  PerImageGts gts;
};

/// Parse interchange text; ParseError carries the 1-based line number.
void parse_interchange(const std::string& text, std::map<std::string, std::vector<Detection>>& preds,
                       std::map<std::string, std::vector<Box>>& gts);
/// Images are those with annotations; predictions for unknown ids are errors.
Interchange load_interchange(const std::string& predictions_text, const std::string& annotations_text);

}  // namespace detgan
