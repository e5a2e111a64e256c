#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "detgan/box.hpp"

namespace detgan {

/// Square anchors of each size centred on every cell of a stride grid.
/// Anchor index order is (size, row, col), matching the objectness layout
/// [A, Hg, Wg].
struct AnchorGrid {
  int stride = 8;
  std::vector<double> sizes{6.0, 10.0};
  int image_width = 32;
  int image_height = 32;

  int grid_width() const { return image_width / stride; }
  int grid_height() const { return image_height / stride; }
  std::size_t cells() const { return static_cast<std::size_t>(grid_width() * grid_height()); }
  std::size_t count() const { return sizes.size() * cells(); }
  Box anchor(std::size_t index) const;
  std::vector<Box> all() const;
};

/// (dx, dy, dw, dh): centre shift in anchor units, log size ratio.
using BoxOffsets = std::array<double, 4>;

BoxOffsets encode_box(const Box& box, const Box& anchor);
Box decode_box(const BoxOffsets& offsets, const Box& anchor);

enum class AnchorLabel { Negative, Ignored, Positive };

struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  /// Index into the gt list for positive anchors, -1 otherwise.
  std::vector<int> matched_gt;
  std::size_t num_positive = 0;
};

struct AssignmentThresholds {
  double positive_iou = 0.5;
  double negative_iou = 0.4;
};

/// Positive at IoU >= positive_iou, ignored in [negative_iou, positive_iou),
/// negative below; each gt also claims its best anchor as positive.
AnchorAssignment assign_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                                const AssignmentThresholds& thresholds = {});

}  // namespace detgan
