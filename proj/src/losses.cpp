#include "detgan/losses.hpp"

#include <cmath>

#include "detgan/errors.hpp"

namespace detgan {

std::vector<std::pair<std::string, double>> LossReport::entries() const {
  std::vector<std::pair<std::string, double>> out;
  auto put = [&out](const char* name, const std::optional<double>& v) {
    if (v) out.emplace_back(name, *v);
  };
  put("gan_global_x", gan_global_x);
  put("gan_global_y", gan_global_y);
  put("gan_local_x", gan_local_x);
  put("g_global_x", g_global_x);
  put("g_global_y", g_global_y);
  put("g_local_x", g_local_x);
  put("cycle", cycle);
  put("identity", identity);
  put("bbox_l1", bbox_l1);
  put("det_real", det_real);
  put("det_syn", det_syn);
  put("det_real_unrolled", det_real_unrolled);
  return out;
}

void LossReport::merge(const LossReport& o) {
  auto take = [](std::optional<double>& dst, const std::optional<double>& src) {
    if (src) dst = src;
  };
  take(gan_global_x, o.gan_global_x);
  take(gan_global_y, o.gan_global_y);
  take(gan_local_x, o.gan_local_x);
  take(g_global_x, o.g_global_x);
  take(g_global_y, o.g_global_y);
  take(g_local_x, o.g_local_x);
  take(cycle, o.cycle);
  take(identity, o.identity);
  take(bbox_l1, o.bbox_l1);
  take(det_real, o.det_real);
  take(det_syn, o.det_syn);
  take(det_real_unrolled, o.det_real_unrolled);
}

void LossWeights::validate() const {
  if (cycle < 0 || identity < 0 || bbox < 0 || det_real < 0 || det_syn < 0) {
    throw ContractError("loss weights must be non-negative");
  }
}

Tensor discriminator_loss(const Tensor& real_scores, const Tensor& fake_scores) {
  const Tensor real_term = mean_all(log(clamp(real_scores, kScoreEpsilon, 1.0 - kScoreEpsilon)));
  const Tensor fake_term =
      mean_all(log(add_scalar(neg(clamp(fake_scores, kScoreEpsilon, 1.0 - kScoreEpsilon)), 1.0)));
  return neg(add(real_term, fake_term));
}

Tensor generator_adversarial_loss(const Tensor& fake_scores) {
  return neg(mean_all(log(clamp(fake_scores, kScoreEpsilon, 1.0 - kScoreEpsilon))));
}

GanLoss gan_loss(const Tensor& real_scores, const Tensor& fake_scores) {
  return {discriminator_loss(real_scores, fake_scores), generator_adversarial_loss(fake_scores)};
}

Tensor l1_mean(const Tensor& a, const Tensor& b) { return mean_all(abs(sub(a, b))); }

CycleTerms cycle_and_identity(const GeneratorParams& gx, const GeneratorParams& gy, const Tensor& x,
                              const Tensor& x_mask, const Tensor& y, const Tensor& y_mask) {
  return cycle_and_identity(gx, gy, x, x_mask, y, y_mask, generator_forward(gx, x, x_mask),
                            generator_forward(gy, y, y_mask));
}

CycleTerms cycle_and_identity(const GeneratorParams& gx, const GeneratorParams& gy, const Tensor& x,
                              const Tensor& x_mask, const Tensor& y, const Tensor& y_mask,
                              const Tensor& fake_y, const Tensor& fake_x) {
  const Tensor rec_x = generator_forward(gy, fake_y, x_mask);
  const Tensor rec_y = generator_forward(gx, fake_x, y_mask);
  const Tensor cycle = add(l1_mean(rec_x, x), l1_mean(rec_y, y));
  const Tensor identity =
      add(l1_mean(generator_forward(gx, y, y_mask), y), l1_mean(generator_forward(gy, x, x_mask), x));
  return {cycle, identity};
}

Tensor bbox_l1(const Tensor& synthetic, const Tensor& real_reference, const Box& box) {
  const PixelRect rect = to_pixel_rect(box);
  return bbox_l1(synthetic, rect, real_reference, rect);
}

Tensor bbox_l1(const Tensor& synthetic, const PixelRect& synthetic_rect, const Tensor& real_reference,
               const PixelRect& reference_rect) {
  if (synthetic_rect.width() != reference_rect.width() ||
      synthetic_rect.height() != reference_rect.height()) {
    throw DimensionError("bbox_l1: crop sizes differ");
  }
  return l1_mean(crop(synthetic, synthetic_rect), crop(real_reference, reference_rect));
}

double focal_term(double p_t, double alpha_t, double gamma) {
  if (p_t >= 1.0) return 0.0;
  return -alpha_t * std::pow(1.0 - p_t, gamma) * std::log(p_t);
}

double smooth_l1_value(double d) {
  const double ad = std::abs(d);
  return ad < 1.0 ? 0.5 * d * d : ad - 0.5;
}

Tensor detection_loss(const DetectorOutput& out, const AnchorGrid& grid, const std::vector<Box>& gts,
                      const DetectionLossConfig& cfg) {
  const std::size_t n = grid.count();
  const std::size_t cells = grid.cells();
  if (out.objectness.numel() != n || out.offsets.numel() != 4 * n) {
    throw DimensionError("detection_loss: head sizes do not match anchor grid");
  }
  const AnchorAssignment assign = assign_anchors(grid, gts, cfg.thresholds);

  // Classification: s = +z for positives, -z for negatives, so p_t = sigmoid(s).
  std::vector<double> sign(n, 0.0), alpha(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    switch (assign.labels[i]) {
      case AnchorLabel::Positive:
        sign[i] = 1.0;
        alpha[i] = cfg.alpha;
        break;
      case AnchorLabel::Negative:
        sign[i] = -1.0;
        alpha[i] = 1.0 - cfg.alpha;
        break;
      case AnchorLabel::Ignored:
        break;
    }
  }
  const Shape head_shape = out.objectness.shape();
  const Tensor s = mul(out.objectness, Tensor::from_data(head_shape, sign));
  Tensor modulator;
  if (cfg.gamma == 0.0) {
    modulator = Tensor::ones(head_shape);
  } else if (cfg.gamma == 1.0) {
    modulator = sigmoid(neg(s));
  } else if (cfg.gamma == 2.0) {
    modulator = square(sigmoid(neg(s)));
  } else {
    modulator = exp(scale(log_sigmoid(neg(s)), cfg.gamma));
  }
  const Tensor cls = neg(sum_all(
      mul(Tensor::from_data(head_shape, alpha), mul(modulator, log_sigmoid(s)))));

  Tensor total = cls;
  if (assign.num_positive > 0) {
    std::vector<double> target(4 * n, 0.0), mask(4 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (assign.labels[i] != AnchorLabel::Positive) continue;
      const BoxOffsets t = encode_box(gts[static_cast<std::size_t>(assign.matched_gt[i])], grid.anchor(i));
      const std::size_t a = i / cells, cell = i % cells;
      for (std::size_t k = 0; k < 4; ++k) {
        target[(4 * a + k) * cells + cell] = t[k];
        mask[(4 * a + k) * cells + cell] = 1.0;
      }
    }
    const Shape off_shape = out.offsets.shape();
    const Tensor diff = sub(out.offsets, Tensor::from_data(off_shape, std::move(target)));
    const Tensor reg = sum_all(mul(smooth_l1(diff), Tensor::from_data(off_shape, std::move(mask))));
    total = add(total, reg);
  }
  const double norm = static_cast<double>(std::max<std::size_t>(1, assign.num_positive));
  return scale(total, 1.0 / norm);
}

}  // namespace detgan
