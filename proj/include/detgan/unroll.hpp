#pragma once

// Generator gradients of the real-image detection loss, obtained by
// differentiating through one plain gradient step of the detector:
//
//   W' = W - lr * d(L_real(W) + L_syn(W, G_X))/dW
//   L~ = L_real(W')
//
// W' is built from differentiable gradient nodes, so dL~/d(theta_G) flows
// through the synthetic images that shaped the update.

#include <span>
#include <vector>

#include "detgan/losses.hpp"
#include "detgan/networks.hpp"

namespace detgan {

struct UnrollConfig {
  double inner_lr = 0.01;
  /// Include L_real in the inner gradient. It contributes no generator
  /// gradient but moves W'.
  bool include_real_in_inner = true;

  void validate() const;
};

/// w - lr * d(loss)/dw for every weight, as graph nodes that stay
/// differentiable in whatever `loss` depended on.
std::vector<Tensor> unrolled_sgd_step(std::span<const Tensor> weights, const Tensor& loss, double lr);

/// Labelled images; images may be graph nodes.
struct LabelledBatch {
  std::vector<Tensor> images;
  std::vector<std::vector<Box>> boxes;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

/// Clean images with insertion masks; `boxes[i]` labels G_X(images[i], masks[i]).
struct MaskedBatch {
  std::vector<Tensor> images;
  std::vector<Tensor> masks;
  std::vector<Box> boxes;

  std::size_t size() const { return images.size(); }
};

/// Mean detection loss over the batch; a zero constant for an empty batch.
Tensor batch_detection_loss(const DetectorParams& det, const AnchorGrid& grid,
                            const LabelledBatch& batch, const DetectionLossConfig& loss_cfg = {});

/// G_X applied to every clean image, labelled with the insertion boxes.
LabelledBatch synthesize(const GeneratorParams& gen, const MaskedBatch& clean);

/// One differentiable SGD step of the detector. `syn` must stay connected to
/// the generator for gradients to reach it.
DetectorParams inner_detector_step(const DetectorParams& det, const AnchorGrid& grid,
                                   const LabelledBatch& real, const LabelledBatch& syn,
                                   const UnrollConfig& cfg, const DetectionLossConfig& loss_cfg = {});

struct UnrolledTerms {
  Tensor real;           // L_real(W)
  Tensor syn;            // L_syn(W)
  Tensor real_unrolled;  // L_real(W')
};

/// Evaluates all three terms for an already synthesized batch.
UnrolledTerms unrolled_terms(const DetectorParams& det, const AnchorGrid& grid,
                             const LabelledBatch& real, const LabelledBatch& syn,
                             const UnrollConfig& cfg, const DetectionLossConfig& loss_cfg = {});

/// L~_real as a function of the generator's parameters.
Tensor unrolled_real_loss(const DetectorParams& det, const GeneratorParams& gen, const AnchorGrid& grid,
                          const LabelledBatch& real, const MaskedBatch& clean, const UnrollConfig& cfg,
                          const DetectionLossConfig& loss_cfg = {});

/// Coefficients of the generator's detection objective
///   real_unrolled * L~_real - syn_ascent * L_syn.
/// A negative syn_ascent turns ascent into descent.
struct DetectionObjectiveWeights {
  double real_unrolled = 1.0;
  double syn_ascent = 0.1;
};

struct DetectionObjective {
  Tensor objective;
  UnrolledTerms terms;  // real_unrolled undefined when its weight is 0
};

DetectionObjective generator_detection_objective(const DetectorParams& det, const AnchorGrid& grid,
                                                 const LabelledBatch& real, const LabelledBatch& syn,
                                                 const UnrollConfig& cfg,
                                                 const DetectionObjectiveWeights& weights,
                                                 const DetectionLossConfig& loss_cfg = {});

/// Per-parameter gradients for G_X in visit order.
struct GeneratorDetGrads {
  std::vector<Tensor> real_unrolled;  // det_real * dL~_real/dtheta
  std::vector<Tensor> syn;            // -det_syn * dL_syn/dtheta
  std::vector<Tensor> total;
};

/// det_real * dL~_real/dtheta - det_syn * dL_syn/dtheta, so descending on
/// the result ascends L_syn.
GeneratorDetGrads generator_detection_grads(const DetectorParams& det, const GeneratorParams& gen,
                                            const AnchorGrid& grid, const LabelledBatch& real,
                                            const MaskedBatch& clean, const UnrollConfig& cfg,
                                            const LossWeights& weights,
                                            const DetectionLossConfig& loss_cfg = {});

}  // namespace detgan
