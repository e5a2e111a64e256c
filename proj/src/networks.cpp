#include "detgan/networks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detgan/errors.hpp"

namespace detgan {

ConvLayer make_conv(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng,
                    double gain, double bias) {
  const auto fan_in = static_cast<double>(in_channels * kernel * kernel);
  const double std_dev = gain * std::sqrt(2.0 / fan_in);
  const Shape shape{static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels),
                    static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)};
  std::vector<double> w(shape_numel(shape));
  for (auto& v : w) v = std_dev * rng.normal();
  ConvLayer layer;
  layer.weight = Tensor::parameter(shape, std::move(w));
  layer.bias = Tensor::parameter({static_cast<std::size_t>(out_channels)},
                                 std::vector<double>(static_cast<std::size_t>(out_channels), bias));
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

Tensor apply_conv(const ConvLayer& layer, const Tensor& x) {
  Tensor y = conv2d(x, layer.weight, layer.stride, layer.pad);
  return add(y, channel_broadcast(layer.bias, y.dim(1), y.dim(2)));
}

// ---- generator ---------------------------------------------------------------

GeneratorParams make_generator(const GeneratorConfig& cfg, Rng& rng) {
  const int c = cfg.image_channels;
  const int b = cfg.base_channels;
  GeneratorParams g;
  g.down1 = make_conv(c + 1, b, 3, 2, 1, rng);
  g.down2 = make_conv(b, 2 * b, 3, 2, 1, rng);
  for (int i = 0; i < cfg.residual_blocks; ++i) {
    // Second conv starts small so each block begins near the identity.
    g.blocks.push_back({make_conv(2 * b, 2 * b, 3, 1, 1, rng), make_conv(2 * b, 2 * b, 3, 1, 1, rng, 0.1)});
  }
  g.up1 = make_conv(2 * b, b, 3, 1, 1, rng);
  g.out = make_conv(b + c + 1, c, 3, 1, 1, rng, 0.5);
  return g;
}

Tensor generator_forward(const GeneratorParams& params, const Tensor& image, const Tensor& mask) {
  if (image.rank() != 3 || mask.rank() != 3 || mask.dim(0) != 1 || image.dim(1) != mask.dim(1) ||
      image.dim(2) != mask.dim(2)) {
    throw DimensionError("generator: image " + shape_str(image.shape()) + " and mask " +
                         shape_str(mask.shape()) + " disagree");
  }
  if (image.dim(1) % 4 || image.dim(2) % 4) {
    throw DimensionError("generator: spatial size must be divisible by 4, got " +
                         shape_str(image.shape()));
  }
  const Tensor x = concat_channels({image, mask});
  Tensor h = relu(apply_conv(params.down1, x));
  h = relu(apply_conv(params.down2, h));
  for (const auto& block : params.blocks) {
    h = add(h, apply_conv(block.second, relu(apply_conv(block.first, h))));
  }
  h = relu(apply_conv(params.up1, upsample_nearest(h, 2)));
  h = upsample_nearest(h, 2);
  return tanh(apply_conv(params.out, concat_channels({h, image, mask})));
}

// ---- discriminator -----------------------------------------------------------

int DiscriminatorParams::receptive_field() const {
  int rf = 1;
  int jump = 1;
  for (const auto& l : layers) {
    rf += (static_cast<int>(l.weight.dim(2)) - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

DiscriminatorParams make_discriminator(const DiscriminatorConfig& cfg, Rng& rng) {
  DiscriminatorParams d;
  int in = cfg.image_channels;
  int out = cfg.base_channels;
  for (int i = 0; i < cfg.layers; ++i) {
    const bool last = i + 1 == cfg.layers;
    d.layers.push_back(make_conv(in, last ? 1 : out, cfg.kernel, 2, 1, rng, last ? 0.5 : 1.0));
    in = out;
    out *= 2;
  }
  return d;
}

Tensor discriminator_forward(const DiscriminatorParams& params, const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("discriminator: expected [C,H,W] input");
  const auto rf = static_cast<std::size_t>(params.receptive_field());
  if (image.dim(1) < rf || image.dim(2) < rf) {
    throw DimensionError("discriminator: input " + shape_str(image.shape()) +
                         " smaller than receptive field " + std::to_string(rf));
  }
  Tensor h = image;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    h = apply_conv(params.layers[i], h);
    if (i + 1 < params.layers.size()) h = leaky_relu(h, 0.2);
  }
  return sigmoid(h);
}

// ---- detector ----------------------------------------------------------------

DetectorParams make_detector(const DetectorConfig& cfg, Rng& rng) {
  DetectorParams d;
  int in = cfg.image_channels;
  for (int c : cfg.channels) {
    d.backbone.push_back(make_conv(in, c, 3, 2, 1, rng));
    in = c;
  }
  const int a = static_cast<int>(cfg.num_anchors);
  // Objectness bias starts at a 1% foreground prior.
  d.objectness = make_conv(in, a, 3, 1, 1, rng, 0.1, -std::log(99.0));
  d.offsets = make_conv(in, 4 * a, 3, 1, 1, rng, 0.1);
  return d;
}

DetectorOutput detector_forward(const DetectorParams& params, const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("detector: expected [C,H,W] input");
  const auto stride = static_cast<std::size_t>(params.stride());
  if (image.dim(1) % stride || image.dim(2) % stride) {
    throw DimensionError("detector: image " + shape_str(image.shape()) +
                         " not divisible by anchor stride " + std::to_string(stride));
  }
  Tensor h = image;
  for (const auto& layer : params.backbone) h = relu(apply_conv(layer, h));
  return {apply_conv(params.objectness, h), apply_conv(params.offsets, h)};
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_thresh) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  std::vector<bool> dropped(detections.size(), false);
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(detections[i]);
    for (std::size_t j = i + 1; j < detections.size(); ++j) {
      if (!dropped[j] && iou(detections[i].box, detections[j].box) > iou_thresh) dropped[j] = true;
    }
  }
  return kept;
}

std::vector<Detection> decode_predictions(const DetectorOutput& out, const AnchorGrid& grid,
                                          double score_thresh, double nms_iou) {
  if (score_thresh < 0 || score_thresh > 1 || nms_iou < 0 || nms_iou > 1) {
    throw ContractError("decode_predictions: thresholds must lie in [0, 1]");
  }
  const std::size_t cells = grid.cells();
  if (out.objectness.numel() != grid.count() || out.offsets.numel() != 4 * grid.count()) {
    throw DimensionError("decode_predictions: head sizes do not match anchor grid");
  }
  const auto logits = out.objectness.data();
  const auto offsets = out.offsets.data();
  std::vector<Detection> candidates;
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const double conf = 1.0 / (1.0 + std::exp(-logits[i]));
    if (conf < score_thresh) continue;
    const std::size_t a = i / cells, cell = i % cells;
    BoxOffsets d{};
    for (std::size_t k = 0; k < 4; ++k) d[k] = offsets[(4 * a + k) * cells + cell];
    // Clamp log-size offsets so exp() stays finite for untrained heads.
    d[2] = std::clamp(d[2], -4.0, 4.0);
    d[3] = std::clamp(d[3], -4.0, 4.0);
    Box b = decode_box(d, grid.anchor(i));
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(grid.image_width));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(grid.image_width));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(grid.image_height));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(grid.image_height));
    if (!b.valid()) continue;
    candidates.push_back({b, conf});
  }
  return nms(std::move(candidates), nms_iou);
}

}  // namespace detgan
