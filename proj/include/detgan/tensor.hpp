#pragma once

// Dense 64-bit tensors with reverse-mode differentiation.
//
// Every op that sees a gradient-requiring input records its inputs and a
// backward rule. Backward rules are themselves written in terms of tensor ops,
// so running them with recording enabled (backward_as_graph) yields gradients
// that are graph nodes and can be differentiated again.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace detgan {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::uint64_t id = 0;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  // False when `backward` computes raw values instead of composing ops.
  bool graph_backward = true;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// Leaf tensor that gradients are taken with respect to.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const;

  bool requires_grad() const;
  bool is_leaf() const;
  std::string_view op_name() const;
  std::uint64_t id() const;

  /// Same values, no graph linkage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// In-place access for leaves only (optimizer updates between passes).
  std::span<double> mutable_data();

  const detail::Node* node() const noexcept { return node_.get(); }
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_result(std::string_view op, Shape shape, std::vector<double> value,
                               std::vector<Tensor> inputs, detail::BackwardFn backward,
                               bool graph_backward);
  friend std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> inputs,
                                       bool create_graph);
};

/// Build an op output. Records inputs and the backward rule only when
/// recording is enabled and some input requires a gradient. Throws
/// NumericError naming `op` if any value is non-finite.
Tensor make_op_result(std::string_view op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, detail::BackwardFn backward,
                      bool graph_backward = true);

bool grad_recording_enabled();

/// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- autodiff -----------------------------------------------------------

/// d loss / d input for each input. Inputs that the loss does not depend on
/// receive zeros. With create_graph the returned tensors are graph nodes.
std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> inputs,
                              bool create_graph);

/// First-order gradients as plain values.
std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> params);

/// Gradients that stay differentiable. Throws UnsupportedOpError if an op on
/// the path only has a first-order rule.
std::vector<Tensor> backward_as_graph(const Tensor& loss, std::span<const Tensor> params);

// ---- elementwise ---------------------------------------------------------
// Binary ops accept equal shapes or a single-element operand broadcast
// against the other; anything else is a DimensionError.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
/// log(sigmoid(a)) evaluated without overflow.
Tensor log_sigmoid(const Tensor& a);
/// 0.5 d^2 if |d| < 1 else |d| - 0.5.
Tensor smooth_l1(const Tensor& a);

/// User-defined elementwise op with a first-order rule only. Usable with
/// backward(); backward_as_graph() through it throws UnsupportedOpError.
Tensor map_elementwise(const Tensor& a, std::string_view name, std::function<double(double)> f,
                       std::function<double(double)> df);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions and shape ------------------------------------------------

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Broadcast a single-element tensor to `shape`.
Tensor expand(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- convolution (single image, C x H x W) ------------------------------

/// input [Cin, H, W] * kernel [Cout, Cin, k, k] -> [Cout, H', W'], zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);
/// Adjoint of conv2d with respect to its input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int pad);
/// Adjoint of conv2d with respect to its kernel.
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int pad);

/// bias [C] -> [C, H, W]
Tensor channel_broadcast(const Tensor& bias, std::size_t height, std::size_t width);
/// [C, H, W] -> [C]
Tensor channel_sum(const Tensor& a);

// ---- spatial -------------------------------------------------------------

/// Half-open region [c0,c1) x [y0,y1) x [x0,x1) of a C x H x W tensor.
struct Region {
  std::size_t c0, c1, y0, y1, x0, x1;
};

/// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct PixelRect {
  int x0, y0, x1, y1;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const PixelRect&) const = default;
};

Tensor upsample_nearest(const Tensor& a, std::size_t factor);
/// Sum over non-overlapping factor x factor blocks (adjoint of upsample_nearest).
Tensor sum_pool(const Tensor& a, std::size_t factor);
/// Box crop over all channels. RangeError if the rectangle leaves the image.
Tensor crop(const Tensor& a, const PixelRect& rect);
Tensor crop_region(const Tensor& a, const Region& region);
/// Zero tensor of `shape` with `a` written into `region` (adjoint of crop).
Tensor embed(const Tensor& a, const Shape& shape, const Region& region);
/// Concatenate along the channel axis.
Tensor concat_channels(std::span<const Tensor> parts);
Tensor concat_channels(std::initializer_list<Tensor> parts);
/// [C, H, W] -> [C], mean over each channel's pixels.
Tensor mean_spatial(const Tensor& a);
/// Bilinear resample of the rectangle to out_h x out_w (pixel-center aligned).
Tensor crop_resize(const Tensor& a, const PixelRect& rect, std::size_t out_h, std::size_t out_w);

}  // namespace detgan
