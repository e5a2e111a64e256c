#pragma once

#include <algorithm>
#include <cmath>

#include "detgan/tensor.hpp"

namespace detgan {

/// Axis-aligned box in continuous pixel coordinates.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Intersection over the predicted box's area.
inline double iobb(const Box& pred, const Box& gt) {
  const double area = pred.area();
  return area > 0 ? intersection_area(pred, gt) / area : 0.0;
}

/// Smallest pixel rectangle covering the box.
inline PixelRect to_pixel_rect(const Box& b) {
  return PixelRect{static_cast<int>(std::floor(b.x_min)), static_cast<int>(std::floor(b.y_min)),
                   static_cast<int>(std::ceil(b.x_max)), static_cast<int>(std::ceil(b.y_max))};
}

inline Box to_box(const PixelRect& r) {
  return Box{static_cast<double>(r.x0), static_cast<double>(r.y0), static_cast<double>(r.x1),
             static_cast<double>(r.y1)};
}

}  // namespace detgan
