#pragma once

// Training protocol: GAN pretraining, detector pretraining on real data, then
// the joint loop (discriminators, detector, generator) per iteration.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "detgan/checkpoint.hpp"
#include "detgan/eval.hpp"
#include "detgan/history.hpp"
#include "detgan/losses.hpp"
#include "detgan/networks.hpp"
#include "detgan/optim.hpp"
#include "detgan/scenes.hpp"
#include "detgan/unroll.hpp"

namespace detgan {

enum class AblationMode { Full, NoUnroll, AcganLike, RealOnly };

std::string to_string(AblationMode mode);
/// Accepts full, no_unroll, acgan_like, real_only.
AblationMode parse_mode(const std::string& text);
inline const std::vector<AblationMode>& all_modes() {
  static const std::vector<AblationMode> modes{AblationMode::RealOnly, AblationMode::AcganLike,
                                               AblationMode::NoUnroll, AblationMode::Full};
  return modes;
}

/// Coefficients of the generator's detection objective for a mode.
DetectionObjectiveWeights mode_weights(AblationMode mode, const LossWeights& weights);

struct TrainConfig {
  int pretrain_gan_iters = 2000;
  int pretrain_det_iters = 1000;
  int joint_iters = 3000;
  int batch_size = 4;
  double gan_lr = 2e-4;
  double det_lr = 0.01;
  /// Step size of the unrolled inner update; unset means det_lr.
  std::optional<double> inner_lr;
  bool include_real_in_inner = true;
  LossWeights weights{};
  DetectionLossConfig det_loss{};
  std::size_t history_capacity = 50;
  int local_crop = 16;
  /// Max per-axis shift of sampled insertion boxes (copied from the scene config).
  int insertion_shift = 3;
  AblationMode mode = AblationMode::Full;
  std::uint64_t seed = 1;
  int eval_every = 0;        // 0 disables periodic validation
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_dir;
  GeneratorConfig generator{};
  DiscriminatorConfig global_disc{};
  DiscriminatorConfig local_disc{1, 8, 2, 4};
  DetectorConfig detector{};
  AnchorGrid grid{};

  UnrollConfig unroll() const { return {inner_lr.value_or(det_lr), include_real_in_inner}; }
  void validate() const;
};

struct ModelBundle {
  GeneratorParams gx, gy;
  DiscriminatorParams dis_global_x, dis_global_y, dis_local_x;
  DetectorParams det;
  Adam opt_gen, opt_dis_global_x, opt_dis_global_y, opt_dis_local_x;
  Sgd opt_det;
};

ModelBundle make_bundle(const TrainConfig& cfg);

struct BundleChecksums {
  std::uint64_t gx = 0, gy = 0, dis_global_x = 0, dis_global_y = 0, dis_local_x = 0, det = 0;
  bool operator==(const BundleChecksums&) const = default;
};
BundleChecksums checksums(const ModelBundle& bundle);

/// Parameters and optimizer state under fixed names.
NamedTensors bundle_tensors(const ModelBundle& bundle);
void load_bundle(ModelBundle& bundle, const NamedTensors& stored);

/// One iteration's data: labelled real images and clean images with
/// sampled insertion masks.
struct StepBatch {
  LabelledBatch real_y;            // one box per image
  std::vector<Tensor> real_y_masks;
  MaskedBatch real_x;
  std::vector<std::size_t> references;  // labelled-pool index per clean image
};

StepBatch sample_batch(const Dataset& data, int batch_size, int insertion_shift, Rng& rng);

/// Raised when a loss or op goes non-finite during training.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(long iteration, std::string loss_name, const std::string& detail)
      : std::runtime_error("non-finite value at iteration " + std::to_string(iteration) + " in loss '" +
                           loss_name + "': " + detail),
        iteration_(iteration),
        loss_name_(std::move(loss_name)) {}
  long iteration() const noexcept { return iteration_; }
  const std::string& loss_name() const noexcept { return loss_name_; }

 private:
  long iteration_;
  std::string loss_name_;
};

/// A NumericError tagged with the loss being computed; run_schedule adds the
/// iteration.
class LossNumericError : public std::runtime_error {
 public:
  LossNumericError(std::string loss_name, const std::string& detail)
      : std::runtime_error(detail), loss_name_(std::move(loss_name)) {}
  const std::string& loss_name() const noexcept { return loss_name_; }

 private:
  std::string loss_name_;
};

LossReport step_discriminators(ModelBundle& bundle, const StepBatch& batch, const Dataset& data,
                               HistoryBuffer& history, const TrainConfig& cfg, Rng& rng);
/// `syn` is detached before use; pass an empty batch for a real-only step.
LossReport step_detector(ModelBundle& bundle, const LabelledBatch& real, const LabelledBatch& syn,
                         const TrainConfig& cfg);
/// With `with_detection` false only the adversarial, cycle, identity and
/// bbox terms are used (GAN pretraining).
LossReport step_generator(ModelBundle& bundle, const StepBatch& batch, const Dataset& data,
                          const TrainConfig& cfg, bool with_detection);

struct MetricRow {
  long iter;
  std::string name;
  double value;
};

struct EvalRow {
  long iter;
  std::string metric;
  std::string threshold;
  double value;
};

struct DecodeConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
};

struct TrainResult {
  ModelBundle bundle;
  std::vector<MetricRow> metrics;
  std::vector<EvalRow> evals;
  std::vector<std::string> checkpoints;
};

TrainResult run_schedule(const TrainConfig& cfg, const Dataset& data, const EvalThresholds& thresholds = {},
                         const DecodeConfig& decode = {});

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string evals_csv(const std::vector<EvalRow>& rows);

// ---- evaluation protocol ---------------------------------------------------

/// Labelled synthetic images from G_X at sampled insertion locations.
std::vector<SceneSample> synthetic_pool(const GeneratorParams& gx, const Dataset& data, std::size_t count,
                                        int insertion_shift, std::uint64_t seed);

struct FreshDetectorConfig {
  int iters = 1500;
  int batch_size = 4;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  DetectorConfig detector{};
  AnchorGrid grid{};
  DetectionLossConfig det_loss{};
};

/// New detector trained from scratch on the union, sampled uniformly.
DetectorParams train_fresh_detector(const std::vector<SceneSample>& real, const std::vector<SceneSample>& synthetic,
                                    const FreshDetectorConfig& cfg);

PerImagePreds predict(const DetectorParams& det, const AnchorGrid& grid, const std::vector<SceneSample>& samples,
                      const DecodeConfig& decode = {});
PerImageGts ground_truth(const std::vector<SceneSample>& samples);

EvalReport evaluate_detector(const DetectorParams& det, const AnchorGrid& grid,
                             const std::vector<SceneSample>& samples, const EvalThresholds& thresholds = {},
                             const DecodeConfig& decode = {});

}  // namespace detgan
