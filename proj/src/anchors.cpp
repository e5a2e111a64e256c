#include "detgan/anchors.hpp"

#include <cmath>

#include "detgan/errors.hpp"

namespace detgan {

Box AnchorGrid::anchor(std::size_t index) const {
  if (index >= count()) throw RangeError("anchor index out of range");
  const std::size_t a = index / cells();
  const std::size_t cell = index % cells();
  const auto gy = static_cast<int>(cell) / grid_width();
  const auto gx = static_cast<int>(cell) % grid_width();
  const double cx = (gx + 0.5) * stride;
  const double cy = (gy + 0.5) * stride;
  const double half = 0.5 * sizes[a];
  return Box{cx - half, cy - half, cx + half, cy + half};
}

std::vector<Box> AnchorGrid::all() const {
  std::vector<Box> out;
  out.reserve(count());
  for (std::size_t i = 0; i < count(); ++i) out.push_back(anchor(i));
  return out;
}

BoxOffsets encode_box(const Box& box, const Box& anchor) {
  return {(box.center_x() - anchor.center_x()) / anchor.width(),
          (box.center_y() - anchor.center_y()) / anchor.height(),
          std::log(box.width() / anchor.width()), std::log(box.height() / anchor.height())};
}

Box decode_box(const BoxOffsets& d, const Box& anchor) {
  const double cx = anchor.center_x() + d[0] * anchor.width();
  const double cy = anchor.center_y() + d[1] * anchor.height();
  const double w = anchor.width() * std::exp(d[2]);
  const double h = anchor.height() * std::exp(d[3]);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

AnchorAssignment assign_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                                const AssignmentThresholds& thresholds) {
  const std::size_t n = grid.count();
  AnchorAssignment out;
  out.labels.assign(n, AnchorLabel::Negative);
  out.matched_gt.assign(n, -1);
  const auto anchors = grid.all();

  for (std::size_t i = 0; i < n; ++i) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= thresholds.positive_iou) {
      out.labels[i] = AnchorLabel::Positive;
      out.matched_gt[i] = best_gt;
    } else if (best >= thresholds.negative_iou) {
      out.labels[i] = AnchorLabel::Ignored;
    }
  }
  // A contested anchor goes to the gt that overlaps it most, so the result
  // does not depend on gt order.
  std::vector<double> claim_iou(n, -1.0);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double best = -1.0;
    std::size_t best_anchor = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best) {
        best = v;
        best_anchor = i;
      }
    }
    if (best <= claim_iou[best_anchor]) continue;
    claim_iou[best_anchor] = best;
    out.labels[best_anchor] = AnchorLabel::Positive;
    out.matched_gt[best_anchor] = static_cast<int>(g);
  }
  for (auto l : out.labels) out.num_positive += (l == AnchorLabel::Positive);
  return out;
}

}  // namespace detgan
