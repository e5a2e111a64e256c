#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "detgan/anchors.hpp"
#include "detgan/networks.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

/// Named scalars from one training iteration. Unset fields were not part of
/// the step that produced the report.
struct LossReport {
  std::optional<double> gan_global_x, gan_global_y, gan_local_x;  // discriminator losses
  std::optional<double> g_global_x, g_global_y, g_local_x;        // generator adversarial terms
  std::optional<double> cycle, identity, bbox_l1;
  std::optional<double> det_real, det_syn, det_real_unrolled;

  /// (name, value) for every populated field, in a fixed order.
  std::vector<std::pair<std::string, double>> entries() const;
  void merge(const LossReport& other);
};

struct LossWeights {
  double cycle = 10.0;
  double identity = 5.0;
  double bbox = 10.0;
  double det_real = 1.0;
  double det_syn = 0.1;

  /// ContractError if any weight is negative.
  void validate() const;
};

inline constexpr double kScoreEpsilon = 1e-7;

/// -mean log s_real - mean log(1 - s_fake), scores clamped to [eps, 1-eps].
Tensor discriminator_loss(const Tensor& real_scores, const Tensor& fake_scores);
/// Non-saturating generator loss -mean log s_fake.
Tensor generator_adversarial_loss(const Tensor& fake_scores);

struct GanLoss {
  Tensor d_loss;
  Tensor g_loss;
};
GanLoss gan_loss(const Tensor& real_scores, const Tensor& fake_scores);

/// Mean absolute difference.
Tensor l1_mean(const Tensor& a, const Tensor& b);

struct CycleTerms {
  Tensor cycle;
  Tensor identity;
};

/// cycle = |G_Y(G_X(x)) - x| + |G_X(G_Y(y)) - y|,
/// identity = |G_X(y) - y| + |G_Y(x) - x|, each a per-pixel mean.
CycleTerms cycle_and_identity(const GeneratorParams& gx, const GeneratorParams& gy, const Tensor& x,
                              const Tensor& x_mask, const Tensor& y, const Tensor& y_mask);
/// Same terms reusing already computed fake_y = G_X(x, x_mask) and
/// fake_x = G_Y(y, y_mask).
CycleTerms cycle_and_identity(const GeneratorParams& gx, const GeneratorParams& gy, const Tensor& x,
                              const Tensor& x_mask, const Tensor& y, const Tensor& y_mask,
                              const Tensor& fake_y, const Tensor& fake_x);

/// Mean absolute difference between the two images' crops at `box`.
Tensor bbox_l1(const Tensor& synthetic, const Tensor& real_reference, const Box& box);
/// Crops at different locations of equal size.
Tensor bbox_l1(const Tensor& synthetic, const PixelRect& synthetic_rect, const Tensor& real_reference,
               const PixelRect& reference_rect);

struct DetectionLossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  AssignmentThresholds thresholds{};
};

/// -alpha_t (1 - p_t)^gamma log p_t for one anchor.
double focal_term(double p_t, double alpha_t, double gamma);
double smooth_l1_value(double d);

/// Focal classification over all non-ignored anchors plus smooth-L1 box
/// regression over positives, divided by max(1, #positives).
Tensor detection_loss(const DetectorOutput& out, const AnchorGrid& grid, const std::vector<Box>& gts,
                      const DetectionLossConfig& cfg = {});

}  // namespace detgan
