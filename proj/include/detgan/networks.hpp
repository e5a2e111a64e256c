#pragma once

// Toy-scale generator, PatchGAN discriminator, and single-level anchor
// detector. Images are [C, H, W] tensors; a batch is a vector of images.

#include <cstdint>
#include <string>
#include <vector>

#include "detgan/anchors.hpp"
#include "detgan/rng.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int stride = 1;
  int pad = 0;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// He-normal weights scaled by `gain`, constant bias.
ConvLayer make_conv(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng,
                    double gain = 1.0, double bias = 0.0);
Tensor apply_conv(const ConvLayer& layer, const Tensor& x);

// ---- generator ------------------------------------------------------------

struct GeneratorConfig {
  int image_channels = 1;
  int base_channels = 8;
  int residual_blocks = 3;
};

struct ResidualBlock {
  ConvLayer first, second;
};

/// Encoder (two stride-2 convs), residual trunk, decoder (two nearest
/// upsampling stages). The last conv also sees the raw image and mask.
struct GeneratorParams {
  ConvLayer down1, down2;
  std::vector<ResidualBlock> blocks;
  ConvLayer up1, out;

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    self.down1.visit("down1", f);
    self.down2.visit("down2", f);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      self.blocks[i].first.visit("res" + std::to_string(i) + ".a", f);
      self.blocks[i].second.visit("res" + std::to_string(i) + ".b", f);
    }
    self.up1.visit("up1", f);
    self.out.visit("out", f);
  }
};

GeneratorParams make_generator(const GeneratorConfig& cfg, Rng& rng);

/// image [C,H,W] and mask [1,H,W] -> image in (-1, 1). H and W must be
/// divisible by 4.
Tensor generator_forward(const GeneratorParams& params, const Tensor& image, const Tensor& mask);

// ---- discriminator ---------------------------------------------------------

struct DiscriminatorConfig {
  int image_channels = 1;
  int base_channels = 8;
  int layers = 3;
  int kernel = 4;
};

/// Stride-2 conv stack emitting one probability per patch.
struct DiscriminatorParams {
  std::vector<ConvLayer> layers;

  int receptive_field() const;

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      self.layers[i].visit("conv" + std::to_string(i), f);
    }
  }
};

DiscriminatorParams make_discriminator(const DiscriminatorConfig& cfg, Rng& rng);

/// [C,H,W] -> [1,h,w] score map in (0,1). DimensionError when the image is
/// smaller than the receptive field.
Tensor discriminator_forward(const DiscriminatorParams& params, const Tensor& image);

// ---- detector --------------------------------------------------------------

struct DetectorConfig {
  int image_channels = 1;
  std::vector<int> channels{16, 32, 32};
  std::size_t num_anchors = 2;
};

struct DetectorParams {
  std::vector<ConvLayer> backbone;
  ConvLayer objectness, offsets;

  int stride() const { return 1 << backbone.size(); }

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.backbone.size(); ++i) {
      self.backbone[i].visit("backbone" + std::to_string(i), f);
    }
    self.objectness.visit("objectness", f);
    self.offsets.visit("offsets", f);
  }
};

DetectorParams make_detector(const DetectorConfig& cfg, Rng& rng);

struct DetectorOutput {
  Tensor objectness;  // [A, Hg, Wg] logits
  Tensor offsets;     // [4A, Hg, Wg], channel 4a+k
};

DetectorOutput detector_forward(const DetectorParams& params, const Tensor& image);

struct Detection {
  Box box;
  double confidence = 0;
};

/// Greedy NMS: keep the most confident box, drop boxes with IoU > iou_thresh
/// against it, repeat. Ties in confidence keep input order.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_thresh);

/// Sigmoid scores >= score_thresh, decoded, clipped to the image, then NMS.
std::vector<Detection> decode_predictions(const DetectorOutput& out, const AnchorGrid& grid,
                                          double score_thresh, double nms_iou);

// ---- parameter-set helpers --------------------------------------------------

template <class P>
std::vector<Tensor> parameter_list(const P& params) {
  std::vector<Tensor> out;
  params.visit([&out](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

/// Copy of `params` with tensors replaced in visit order.
template <class P>
P with_parameters(const P& params, const std::vector<Tensor>& tensors) {
  P copy = params;
  std::size_t i = 0;
  copy.visit([&](const std::string&, Tensor& t) { t = tensors.at(i++); });
  return copy;
}

/// Fresh leaf copies, detached from any graph.
template <class P>
P detached(const P& params) {
  P copy = params;
  copy.visit([](const std::string&, Tensor& t) {
    t = Tensor::parameter(t.shape(), {t.data().begin(), t.data().end()});
  });
  return copy;
}

template <class P>
std::size_t parameter_count(const P& params) {
  std::size_t n = 0;
  params.visit([&n](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

/// FNV-1a over the raw bytes of every parameter value.
template <class P>
std::uint64_t checksum(const P& params) {
  std::uint64_t h = 1469598103934665603ULL;
  params.visit([&h](const std::string&, const Tensor& t) {
    for (double v : t.data()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
      for (std::size_t b = 0; b < sizeof(double); ++b) {
        h ^= bytes[b];
        h *= 1099511628211ULL;
      }
    }
  });
  return h;
}

}  // namespace detgan
