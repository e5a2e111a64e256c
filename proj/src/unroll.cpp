#include "detgan/unroll.hpp"

#include "detgan/errors.hpp"

namespace detgan {

void UnrollConfig::validate() const {
  if (!(inner_lr >= 0)) throw ContractError("inner_lr must be >= 0");
}

Tensor batch_detection_loss(const DetectorParams& det, const AnchorGrid& grid,
                            const LabelledBatch& batch, const DetectionLossConfig& loss_cfg) {
  if (batch.boxes.size() != batch.images.size()) throw ContractError("batch boxes/images size mismatch");
  if (batch.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor l = detection_loss(detector_forward(det, batch.images[i]), grid, batch.boxes[i], loss_cfg);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

LabelledBatch synthesize(const GeneratorParams& gen, const MaskedBatch& clean) {
  if (clean.masks.size() != clean.size() || clean.boxes.size() != clean.size()) {
    throw ContractError("masked batch fields disagree in size");
  }
  LabelledBatch out;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.images.push_back(generator_forward(gen, clean.images[i], clean.masks[i]));
    out.boxes.push_back({clean.boxes[i]});
  }
  return out;
}

std::vector<Tensor> unrolled_sgd_step(std::span<const Tensor> weights, const Tensor& loss, double lr) {
  if (!(lr >= 0)) throw ContractError("inner_lr must be >= 0");
  const auto grads = backward_as_graph(loss, weights);
  std::vector<Tensor> updated;
  updated.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) updated.push_back(sub(weights[i], scale(grads[i], lr)));
  return updated;
}

namespace {

DetectorParams step_from_loss(const DetectorParams& det, const Tensor& inner_loss, double lr) {
  return with_parameters(det, unrolled_sgd_step(parameter_list(det), inner_loss, lr));
}

}  // namespace

DetectorParams inner_detector_step(const DetectorParams& det, const AnchorGrid& grid,
                                   const LabelledBatch& real, const LabelledBatch& syn,
                                   const UnrollConfig& cfg, const DetectionLossConfig& loss_cfg) {
  cfg.validate();
  Tensor inner = batch_detection_loss(det, grid, syn, loss_cfg);
  if (cfg.include_real_in_inner) inner = add(batch_detection_loss(det, grid, real, loss_cfg), inner);
  return step_from_loss(det, inner, cfg.inner_lr);
}

UnrolledTerms unrolled_terms(const DetectorParams& det, const AnchorGrid& grid,
                             const LabelledBatch& real, const LabelledBatch& syn,
                             const UnrollConfig& cfg, const DetectionLossConfig& loss_cfg) {
  cfg.validate();
  UnrolledTerms t;
  t.real = batch_detection_loss(det, grid, real, loss_cfg);
  t.syn = batch_detection_loss(det, grid, syn, loss_cfg);
  const Tensor inner = cfg.include_real_in_inner ? add(t.real, t.syn) : t.syn;
  const DetectorParams updated = step_from_loss(det, inner, cfg.inner_lr);
  t.real_unrolled = batch_detection_loss(updated, grid, real, loss_cfg);
  return t;
}

Tensor unrolled_real_loss(const DetectorParams& det, const GeneratorParams& gen, const AnchorGrid& grid,
                          const LabelledBatch& real, const MaskedBatch& clean, const UnrollConfig& cfg,
                          const DetectionLossConfig& loss_cfg) {
  const LabelledBatch syn = synthesize(gen, clean);
  return unrolled_terms(det, grid, real, syn, cfg, loss_cfg).real_unrolled;
}

DetectionObjective generator_detection_objective(const DetectorParams& det, const AnchorGrid& grid,
                                                 const LabelledBatch& real, const LabelledBatch& syn,
                                                 const UnrollConfig& cfg,
                                                 const DetectionObjectiveWeights& weights,
                                                 const DetectionLossConfig& loss_cfg) {
  DetectionObjective out;
  if (weights.real_unrolled != 0.0) {
    out.terms = unrolled_terms(det, grid, real, syn, cfg, loss_cfg);
    out.objective = sub(scale(out.terms.real_unrolled, weights.real_unrolled),
                        scale(out.terms.syn, weights.syn_ascent));
  } else {
    out.terms.syn = batch_detection_loss(det, grid, syn, loss_cfg);
    out.objective = scale(out.terms.syn, -weights.syn_ascent);
  }
  return out;
}

GeneratorDetGrads generator_detection_grads(const DetectorParams& det, const GeneratorParams& gen,
                                            const AnchorGrid& grid, const LabelledBatch& real,
                                            const MaskedBatch& clean, const UnrollConfig& cfg,
                                            const LossWeights& weights,
                                            const DetectionLossConfig& loss_cfg) {
  const auto theta = parameter_list(gen);
  const LabelledBatch syn = synthesize(gen, clean);
  GeneratorDetGrads out;
  auto zeros = [&theta] {
    std::vector<Tensor> z;
    for (const auto& t : theta) z.push_back(Tensor::zeros(t.shape()));
    return z;
  };

  if (weights.det_real != 0.0) {
    const UnrolledTerms terms = unrolled_terms(det, grid, real, syn, cfg, loss_cfg);
    out.real_unrolled = backward(scale(terms.real_unrolled, weights.det_real), theta);
  } else {
    out.real_unrolled = zeros();
  }
  if (weights.det_syn != 0.0) {
    out.syn = backward(scale(batch_detection_loss(det, grid, syn, loss_cfg), -weights.det_syn), theta);
  } else {
    out.syn = zeros();
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    out.total.push_back(add(out.real_unrolled[i], out.syn[i]));
  }
  return out;
}

}  // namespace detgan
