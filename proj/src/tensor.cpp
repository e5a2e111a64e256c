#include "detgan/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <mutex>
#include <set>
#include <sstream>
#include <unordered_map>

#include "detgan/errors.hpp"

namespace detgan {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_recording = true;

class RecordingScope {
 public:
  explicit RecordingScope(bool on) : previous_(g_recording) { g_recording = on; }
  ~RecordingScope() { g_recording = previous_; }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  bool previous_;
};

void check_finite(std::string_view op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    }
  }
}

bool is_single(const Tensor& t) { return t.numel() == 1; }

Shape broadcast_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_single(b)) return a.shape();
  if (is_single(a)) return b.shape();
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " do not broadcast");
}

template <class F>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, std::size_t n, F f) {
  std::vector<double> out(n);
  const auto da = a.data();
  const auto db = b.data();
  const bool sa = da.size() == 1 && n != 1;
  const bool sb = db.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(sa ? da[0] : da[i], sb ? db[0] : db[i]);
  return out;
}

template <class F>
std::vector<double> unary_values(const Tensor& a, F f) {
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i]);
  return out;
}

template <class F>
Tensor constant_like(const Tensor& a, F f) {
  return Tensor::from_data(a.shape(), unary_values(a, f));
}

// Sum a broadcast gradient back down to a single-element operand.
Tensor reduce_to(const Tensor& grad, const Shape& shape) {
  if (grad.shape() == shape) return grad;
  if (shape_numel(shape) == 1) return reshape(sum_all(grad), shape);
  return reshape(grad, shape);
}

double stable_log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

std::size_t conv_out_size(std::size_t in, std::size_t k, int stride, int pad) {
  return (in + 2 * static_cast<std::size_t>(pad) - k) / static_cast<std::size_t>(stride) + 1;
}

struct ConvGeom {
  std::size_t cin, h, w, cout, k, ho, wo;
  int stride, pad;
};

ConvGeom conv_geometry(std::string_view op, const Shape& in, const Shape& kernel, int stride,
                       int pad) {
  if (in.size() != 3 || kernel.size() != 4) {
    throw DimensionError(std::string(op) + ": expected input [C,H,W] and kernel [O,C,k,k], got " +
                         shape_str(in) + " and " + shape_str(kernel));
  }
  if (stride < 1 || pad < 0) throw DimensionError(std::string(op) + ": stride must be >= 1, pad >= 0");
  if (kernel[1] != in[0]) {
    throw DimensionError(std::string(op) + ": kernel expects " + std::to_string(kernel[1]) +
                         " input channels, got " + std::to_string(in[0]));
  }
  if (kernel[2] != kernel[3]) throw DimensionError(std::string(op) + ": kernel must be square");
  const std::size_t k = kernel[2];
  const auto p2 = 2 * static_cast<std::size_t>(pad);
  if (k > in[1] + p2 || k > in[2] + p2) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(k) +
                         " larger than padded input " + shape_str(in));
  }
  return {in[0], in[1], in[2], kernel[0], k, conv_out_size(in[1], k, stride, pad),
          conv_out_size(in[2], k, stride, pad), stride, pad};
}

// Patch matrix [cin*k*k, ho*wo]; row (ci, ky, kx), column (oy, ox). Padding
// positions hold zero.
std::vector<double> im2col(const ConvGeom& g, const double* in) {
  const std::size_t np = g.ho * g.wo;
  std::vector<double> cols(g.cin * g.k * g.k * np, 0.0);
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        double* dst = cols.data() + r * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy) * g.stride + static_cast<std::ptrdiff_t>(ky) - g.pad;
          if (iy < 0 || iy >= h) continue;
          const double* row = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox) * g.stride + static_cast<std::ptrdiff_t>(kx) - g.pad;
            if (ix >= 0 && ix < w) dst[oy * g.wo + ox] = row[ix];
          }
        }
      }
    }
  }
  return cols;
}

// Scatter-add of a patch matrix back onto the input grid (adjoint of im2col).
void col2im(const ConvGeom& g, const std::vector<double>& cols, double* out) {
  const std::size_t np = g.ho * g.wo;
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        const double* src = cols.data() + r * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy) * g.stride + static_cast<std::ptrdiff_t>(ky) - g.pad;
          if (iy < 0 || iy >= h) continue;
          double* row = out + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox) * g.stride + static_cast<std::ptrdiff_t>(kx) - g.pad;
            if (ix >= 0 && ix < w) row[ix] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

void conv_forward_kernel(const ConvGeom& g, const double* in, const double* ker, double* out) {
  const std::size_t np = g.ho * g.wo, nr = g.cin * g.k * g.k;
  const std::vector<double> cols = im2col(g, in);
  for (std::size_t co = 0; co < g.cout; ++co) {
    double* orow = out + co * np;
    for (std::size_t r = 0; r < nr; ++r) {
      const double wv = ker[co * nr + r];
      if (wv == 0.0) continue;
      const double* c = cols.data() + r * np;
      for (std::size_t p = 0; p < np; ++p) orow[p] += wv * c[p];
    }
  }
}

void conv_input_grad_kernel(const ConvGeom& g, const double* gout, const double* ker, double* gin) {
  const std::size_t np = g.ho * g.wo, nr = g.cin * g.k * g.k;
  std::vector<double> cols(nr * np, 0.0);
  for (std::size_t r = 0; r < nr; ++r) {
    double* c = cols.data() + r * np;
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double wv = ker[co * nr + r];
      if (wv == 0.0) continue;
      const double* grow = gout + co * np;
      for (std::size_t p = 0; p < np; ++p) c[p] += wv * grow[p];
    }
  }
  col2im(g, cols, gin);
}

void conv_weight_grad_kernel(const ConvGeom& g, const double* in, const double* gout, double* gker) {
  const std::size_t np = g.ho * g.wo, nr = g.cin * g.k * g.k;
  const std::vector<double> cols = im2col(g, in);
  for (std::size_t co = 0; co < g.cout; ++co) {
    const double* grow = gout + co * np;
    for (std::size_t r = 0; r < nr; ++r) {
      const double* c = cols.data() + r * np;
      double acc = 0.0;
      for (std::size_t p = 0; p < np; ++p) acc += grow[p] * c[p];
      gker[co * nr + r] += acc;
    }
  }
}

// Sparse row-major linear operator; `transpose` is kept alongside so the
// adjoint op can be built without recomputation.
struct SparseMap {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_start;  // size rows + 1
  std::vector<std::size_t> col;
  std::vector<double> weight;
};

struct LinearOperator {
  SparseMap forward;
  SparseMap adjoint;
};

SparseMap transpose_map(const SparseMap& m) {
  SparseMap t;
  t.rows = m.cols;
  t.cols = m.rows;
  t.row_start.assign(t.rows + 1, 0);
  for (std::size_t c : m.col) ++t.row_start[c + 1];
  for (std::size_t r = 0; r < t.rows; ++r) t.row_start[r + 1] += t.row_start[r];
  t.col.resize(m.col.size());
  t.weight.resize(m.weight.size());
  std::vector<std::size_t> fill(t.row_start.begin(), t.row_start.end() - 1);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t j = m.row_start[r]; j < m.row_start[r + 1]; ++j) {
      const std::size_t dst = fill[m.col[j]]++;
      t.col[dst] = r;
      t.weight[dst] = m.weight[j];
    }
  }
  return t;
}

Tensor apply_linear(const Tensor& a, std::shared_ptr<const LinearOperator> op, bool adjoint,
                    const Shape& out_shape) {
  const SparseMap& m = adjoint ? op->adjoint : op->forward;
  if (a.numel() != m.cols) throw DimensionError("linear map: input size mismatch");
  const auto da = a.data();
  std::vector<double> out(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = m.row_start[r]; j < m.row_start[r + 1]; ++j) acc += m.weight[j] * da[m.col[j]];
    out[r] = acc;
  }
  const Shape in_shape = a.shape();
  return make_op_result(
      "crop_resize", out_shape, std::move(out), {a},
      [op, adjoint, in_shape](const Tensor& g, const Tensor&) {
        return std::vector<Tensor>{apply_linear(g, op, !adjoint, in_shape)};
      });
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  check_finite("leaf", data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return from_data(std::move(shape), std::move(data), true);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t c, std::size_t y, std::size_t x) const {
  const auto& s = shape();
  if (s.size() != 3) throw DimensionError("at(c,y,x) needs a rank-3 tensor");
  return node_->value[(c * s[1] + y) * s[2] + x];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_ || !node_->backward; }
std::string_view Tensor::op_name() const { return node_ ? node_->op : "undefined"; }
std::uint64_t Tensor::id() const { return node_ ? node_->id : 0; }

Tensor Tensor::detach() const { return from_data(shape(), node_->value); }

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (node_->backward) throw ContractError("in-place update of a non-leaf tensor");
  return node_->value;
}

Tensor make_op_result(std::string_view op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, detail::BackwardFn backward,
                      bool graph_backward) {
  check_finite(op, value);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  if (g_recording &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->graph_backward = graph_backward;
  }
  return Tensor(std::move(node));
}

bool grad_recording_enabled() { return g_recording; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

// ---- autodiff --------------------------------------------------------------

std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> inputs,
                              bool create_graph) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("gradient requested of a non-scalar loss " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("(undefined)")));
  }
  std::vector<Tensor> result(inputs.size());
  std::unordered_map<const detail::Node*, bool> relevant;
  for (const auto& in : inputs) {
    if (in.defined()) relevant[in.node()] = true;
  }

  std::vector<Tensor> order;
  if (loss.requires_grad()) {
    // A node matters if it is a requested input or leads to one.
    std::unordered_map<const detail::Node*, bool> seen;
    std::function<bool(const Tensor&)> visit = [&](const Tensor& t) -> bool {
      const auto* n = t.node();
      if (auto it = seen.find(n); it != seen.end()) return it->second;
      bool rel = relevant.count(n) > 0;
      for (const auto& parent : n->inputs) {
        if (parent.requires_grad() && visit(parent)) rel = true;
      }
      seen[n] = rel;
      if (rel) order.push_back(t);
      return rel;
    };
    visit(loss);
    relevant = std::move(seen);
  }
  std::sort(order.begin(), order.end(),
            [](const Tensor& a, const Tensor& b) { return a.id() > b.id(); });

  std::unordered_map<const detail::Node*, Tensor> grads;
  if (!order.empty()) grads[loss.node()] = Tensor::ones(loss.shape());

  RecordingScope scope(create_graph);
  for (const auto& t : order) {
    const auto* n = t.node();
    auto it = grads.find(n);
    if (it == grads.end() || !n->backward) continue;
    if (create_graph && !n->graph_backward) throw UnsupportedOpError(std::string(n->op));
    const Tensor g = it->second;
    auto in_grads = n->backward(g, t);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const Tensor& parent = n->inputs[i];
      if (!parent.requires_grad() || !in_grads[i].defined()) continue;
      auto rel = relevant.find(parent.node());
      if (rel == relevant.end() || !rel->second) continue;
      auto [slot, inserted] = grads.try_emplace(parent.node(), in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
    bool requested = false;
    for (const auto& in : inputs) requested = requested || (in.defined() && in.node() == n);
    if (!requested) grads.erase(n);
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto it = grads.find(inputs[i].node());
    if (it != grads.end()) {
      result[i] = create_graph ? it->second : it->second.detach();
    } else {
      result[i] = Tensor::zeros(inputs[i].shape());
    }
  }
  return result;
}

std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> params) {
  return gradients(loss, params, false);
}

std::vector<Tensor> backward_as_graph(const Tensor& loss, std::span<const Tensor> params) {
  return gradients(loss, params, true);
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("add", a, b);
  auto v = binary_values(a, b, shape_numel(shape), [](double x, double y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op_result("add", std::move(shape), std::move(v), {a, b},
                        [sa, sb](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{reduce_to(g, sa), reduce_to(g, sb)};
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("sub", a, b);
  auto v = binary_values(a, b, shape_numel(shape), [](double x, double y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op_result("sub", std::move(shape), std::move(v), {a, b},
                        [sa, sb](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{reduce_to(g, sa), reduce_to(neg(g), sb)};
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("mul", a, b);
  auto v = binary_values(a, b, shape_numel(shape), [](double x, double y) { return x * y; });
  return make_op_result("mul", std::move(shape), std::move(v), {a, b},
                        [a, b](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{
                              a.requires_grad() ? reduce_to(mul(g, b), a.shape()) : Tensor{},
                              b.requires_grad() ? reduce_to(mul(g, a), b.shape()) : Tensor{}};
                        });
}

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

Tensor neg(const Tensor& a) {
  return make_op_result("neg", a.shape(), unary_values(a, [](double x) { return -x; }), {a},
                        [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double factor) {
  return make_op_result("scale", a.shape(), unary_values(a, [factor](double x) { return factor * x; }),
                        {a}, [factor](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{scale(g, factor)};
                        });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return make_op_result("add_scalar", a.shape(),
                        unary_values(a, [offset](double x) { return x + offset; }), {a},
                        [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g}; });
}

Tensor tanh(const Tensor& a) {
  return make_op_result("tanh", a.shape(), unary_values(a, [](double x) { return std::tanh(x); }),
                        {a}, [](const Tensor& g, const Tensor& y) {
                          return std::vector<Tensor>{mul(g, add_scalar(neg(square(y)), 1.0))};
                        });
}

Tensor sigmoid(const Tensor& a) {
  return make_op_result("sigmoid", a.shape(), unary_values(a, stable_sigmoid), {a},
                        [](const Tensor& g, const Tensor& y) {
                          return std::vector<Tensor>{mul(g, mul(y, add_scalar(neg(y), 1.0)))};
                        });
}

Tensor relu(const Tensor& a) {
  return make_op_result("relu", a.shape(), unary_values(a, [](double x) { return x > 0 ? x : 0.0; }),
                        {a}, [a](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{
                              mul(g, constant_like(a, [](double x) { return x > 0 ? 1.0 : 0.0; }))};
                        });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return make_op_result(
      "leaky_relu", a.shape(), unary_values(a, [slope](double x) { return x > 0 ? x : slope * x; }),
      {a}, [a, slope](const Tensor& g, const Tensor&) {
        // Second derivative is zero everywhere, including the kink.
        return std::vector<Tensor>{
            mul(g, constant_like(a, [slope](double x) { return x > 0 ? 1.0 : slope; }))};
      });
}

Tensor log(const Tensor& a) {
  return make_op_result("log", a.shape(), unary_values(a, [](double x) { return std::log(x); }),
                        {a}, [a](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{mul(g, reciprocal(a))};
                        });
}

Tensor exp(const Tensor& a) {
  return make_op_result("exp", a.shape(), unary_values(a, [](double x) { return std::exp(x); }),
                        {a}, [](const Tensor& g, const Tensor& y) {
                          return std::vector<Tensor>{mul(g, y)};
                        });
}

Tensor square(const Tensor& a) {
  return make_op_result("square", a.shape(), unary_values(a, [](double x) { return x * x; }), {a},
                        [a](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{mul(g, scale(a, 2.0))};
                        });
}

Tensor abs(const Tensor& a) {
  return make_op_result(
      "abs", a.shape(), unary_values(a, [](double x) { return std::abs(x); }), {a},
      [a](const Tensor& g, const Tensor&) {
        return std::vector<Tensor>{
            mul(g, constant_like(a, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }))};
      });
}

Tensor reciprocal(const Tensor& a) {
  return make_op_result("reciprocal", a.shape(), unary_values(a, [](double x) { return 1.0 / x; }),
                        {a}, [](const Tensor& g, const Tensor& y) {
                          return std::vector<Tensor>{mul(g, neg(square(y)))};
                        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return make_op_result("clamp", a.shape(),
                        unary_values(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }), {a},
                        [a, lo, hi](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{mul(g, constant_like(a, [lo, hi](double x) {
                                                           return (x >= lo && x <= hi) ? 1.0 : 0.0;
                                                         }))};
                        });
}

Tensor log_sigmoid(const Tensor& a) {
  return make_op_result("log_sigmoid", a.shape(), unary_values(a, stable_log_sigmoid), {a},
                        [a](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{mul(g, sigmoid(neg(a)))};
                        });
}

Tensor smooth_l1(const Tensor& a) {
  return make_op_result("smooth_l1", a.shape(), unary_values(a, [](double d) {
                          const double ad = std::abs(d);
                          return ad < 1.0 ? 0.5 * d * d : ad - 0.5;
                        }),
                        {a}, [a](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{mul(g, clamp(a, -1.0, 1.0))};
                        });
}

Tensor map_elementwise(const Tensor& a, std::string_view name, std::function<double(double)> f,
                       std::function<double(double)> df) {
  // Node op names are string_views; intern so they outlive the graph.
  static std::mutex mutex;
  static std::set<std::string, std::less<>> names;
  std::string_view interned;
  {
    std::lock_guard lock(mutex);
    interned = *names.emplace(name).first;
  }
  return make_op_result(
      interned, a.shape(), unary_values(a, f), {a},
      [a, df](const Tensor& g, const Tensor&) {
        const auto da = a.data();
        const auto dg = g.data();
        std::vector<double> out(da.size());
        for (std::size_t i = 0; i < da.size(); ++i) out[i] = dg[i] * df(da[i]);
        return std::vector<Tensor>{Tensor::from_data(a.shape(), std::move(out))};
      },
      false);
}

// ---- reductions and shape ---------------------------------------------------

Tensor sum_all(const Tensor& a) {
  const auto d = a.data();
  double s = 0.0;
  for (double v : d) s += v;
  const Shape in_shape = a.shape();
  return make_op_result("sum_all", {}, {s}, {a}, [in_shape](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{expand(g, in_shape)};
  });
}

Tensor mean_all(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum_all(a), 1.0 / n);
}

Tensor expand(const Tensor& a, const Shape& shape) {
  if (a.numel() != 1) throw DimensionError("expand needs a single-element tensor");
  const Shape in_shape = a.shape();
  return make_op_result("expand", shape, std::vector<double>(shape_numel(shape), a.data()[0]), {a},
                        [in_shape](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{reshape(sum_all(g), in_shape)};
                        });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const Shape in_shape = a.shape();
  return make_op_result("reshape", shape, std::vector<double>(a.data().begin(), a.data().end()), {a},
                        [in_shape](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{reshape(g, in_shape)};
                        });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * db[p * n + j];
    }
  }
  return make_op_result("matmul", {m, n}, std::move(out), {a, b},
                        [a, b](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{
                              a.requires_grad() ? matmul(g, transpose(b)) : Tensor{},
                              b.requires_grad() ? matmul(transpose(a), g) : Tensor{}};
                        });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto d = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  return make_op_result("transpose", {c, r}, std::move(out), {a},
                        [](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{transpose(g)};
                        });
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  const ConvGeom g = conv_geometry("conv2d", input.shape(), kernel.shape(), stride, pad);
  std::vector<double> out(g.cout * g.ho * g.wo, 0.0);
  conv_forward_kernel(g, input.data().data(), kernel.data().data(), out.data());
  return make_op_result(
      "conv2d", {g.cout, g.ho, g.wo}, std::move(out), {input, kernel},
      [input, kernel, stride, pad](const Tensor& gout, const Tensor&) {
        return std::vector<Tensor>{
            input.requires_grad() ? conv2d_input_grad(gout, kernel, input.shape(), stride, pad)
                                  : Tensor{},
            kernel.requires_grad() ? conv2d_weight_grad(input, gout, kernel.shape(), stride, pad)
                                   : Tensor{}};
      });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int pad) {
  const ConvGeom g = conv_geometry("conv2d_input_grad", input_shape, kernel.shape(), stride, pad);
  if (grad_out.shape() != Shape{g.cout, g.ho, g.wo}) {
    throw DimensionError("conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  std::vector<double> out(g.cin * g.h * g.w, 0.0);
  conv_input_grad_kernel(g, grad_out.data().data(), kernel.data().data(), out.data());
  return make_op_result(
      "conv2d_input_grad", input_shape, std::move(out), {grad_out, kernel},
      [grad_out, kernel, stride, pad](const Tensor& v, const Tensor&) {
        return std::vector<Tensor>{
            grad_out.requires_grad() ? conv2d(v, kernel, stride, pad) : Tensor{},
            kernel.requires_grad() ? conv2d_weight_grad(v, grad_out, kernel.shape(), stride, pad)
                                   : Tensor{}};
      });
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int pad) {
  const ConvGeom g = conv_geometry("conv2d_weight_grad", input.shape(), kernel_shape, stride, pad);
  if (grad_out.shape() != Shape{g.cout, g.ho, g.wo}) {
    throw DimensionError("conv2d_weight_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  std::vector<double> out(shape_numel(kernel_shape), 0.0);
  conv_weight_grad_kernel(g, input.data().data(), grad_out.data().data(), out.data());
  return make_op_result(
      "conv2d_weight_grad", kernel_shape, std::move(out), {input, grad_out},
      [input, grad_out, stride, pad](const Tensor& v, const Tensor&) {
        return std::vector<Tensor>{
            input.requires_grad() ? conv2d_input_grad(grad_out, v, input.shape(), stride, pad)
                                  : Tensor{},
            grad_out.requires_grad() ? conv2d(input, v, stride, pad) : Tensor{}};
      });
}

Tensor channel_broadcast(const Tensor& bias, std::size_t height, std::size_t width) {
  require_rank("channel_broadcast", bias, 1);
  const std::size_t c = bias.dim(0), hw = height * width;
  const auto d = bias.data();
  std::vector<double> out(c * hw);
  for (std::size_t i = 0; i < c; ++i) std::fill_n(out.begin() + i * hw, hw, d[i]);
  return make_op_result("channel_broadcast", {c, height, width}, std::move(out), {bias},
                        [](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{channel_sum(g)};
                        });
}

Tensor channel_sum(const Tensor& a) {
  require_rank("channel_sum", a, 3);
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2), hw = h * w;
  const auto d = a.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i] += d[i * hw + j];
  return make_op_result("channel_sum", {c}, std::move(out), {a},
                        [h, w](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{channel_broadcast(g, h, w)};
                        });
}

// ---- spatial ---------------------------------------------------------------

Tensor upsample_nearest(const Tensor& a, std::size_t factor) {
  require_rank("upsample_nearest", a, 3);
  if (factor < 1) throw DimensionError("upsample_nearest: factor must be >= 1");
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto d = a.data();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[(ch * oh + y) * ow + x] = d[(ch * h + y / factor) * w + x / factor];
  return make_op_result("upsample_nearest", {c, oh, ow}, std::move(out), {a},
                        [factor](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{sum_pool(g, factor)};
                        });
}

Tensor sum_pool(const Tensor& a, std::size_t factor) {
  require_rank("sum_pool", a, 3);
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (factor < 1 || h % factor || w % factor) {
    throw DimensionError("sum_pool: size " + shape_str(a.shape()) + " not divisible by factor");
  }
  const std::size_t oh = h / factor, ow = w / factor;
  const auto d = a.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * oh + y / factor) * ow + x / factor] += d[(ch * h + y) * w + x];
  return make_op_result("sum_pool", {c, oh, ow}, std::move(out), {a},
                        [factor](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{upsample_nearest(g, factor)};
                        });
}

Tensor crop_region(const Tensor& a, const Region& r) {
  require_rank("crop", a, 3);
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (r.c0 >= r.c1 || r.y0 >= r.y1 || r.x0 >= r.x1 || r.c1 > c || r.y1 > h || r.x1 > w) {
    throw RangeError("crop region outside tensor " + shape_str(a.shape()));
  }
  const std::size_t oc = r.c1 - r.c0, oh = r.y1 - r.y0, ow = r.x1 - r.x0;
  const auto d = a.data();
  std::vector<double> out(oc * oh * ow);
  for (std::size_t ch = 0; ch < oc; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[(ch * oh + y) * ow + x] = d[((ch + r.c0) * h + y + r.y0) * w + x + r.x0];
  const Shape in_shape = a.shape();
  return make_op_result("crop", {oc, oh, ow}, std::move(out), {a},
                        [in_shape, r](const Tensor& g, const Tensor&) {
                          return std::vector<Tensor>{embed(g, in_shape, r)};
                        });
}

Tensor crop(const Tensor& a, const PixelRect& rect) {
  require_rank("crop", a, 3);
  if (rect.x0 < 0 || rect.y0 < 0 || rect.x1 <= rect.x0 || rect.y1 <= rect.y0 ||
      rect.x1 > static_cast<int>(a.dim(2)) || rect.y1 > static_cast<int>(a.dim(1))) {
    throw RangeError("crop box (" + std::to_string(rect.x0) + "," + std::to_string(rect.y0) + "," +
                     std::to_string(rect.x1) + "," + std::to_string(rect.y1) +
                     ") outside image " + shape_str(a.shape()));
  }
  return crop_region(a, Region{0, a.dim(0), static_cast<std::size_t>(rect.y0),
                               static_cast<std::size_t>(rect.y1), static_cast<std::size_t>(rect.x0),
                               static_cast<std::size_t>(rect.x1)});
}

Tensor embed(const Tensor& a, const Shape& shape, const Region& r) {
  require_rank("embed", a, 3);
  if (shape.size() != 3 || r.c1 > shape[0] || r.y1 > shape[1] || r.x1 > shape[2] ||
      a.shape() != Shape{r.c1 - r.c0, r.y1 - r.y0, r.x1 - r.x0}) {
    throw RangeError("embed region does not fit target " + shape_str(shape));
  }
  const std::size_t h = shape[1], w = shape[2];
  const std::size_t oc = r.c1 - r.c0, oh = r.y1 - r.y0, ow = r.x1 - r.x0;
  const auto d = a.data();
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t ch = 0; ch < oc; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[((ch + r.c0) * h + y + r.y0) * w + x + r.x0] = d[(ch * oh + y) * ow + x];
  return make_op_result("embed", shape, std::move(out), {a}, [r](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{crop_region(g, r)};
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t c = 0;
  for (const auto& p : parts) {
    require_rank("concat_channels", p, 3);
    if (p.dim(1) != h || p.dim(2) != w) {
      throw DimensionError("concat_channels: spatial sizes differ " + shape_str(p.shape()));
    }
    c += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(c * h * w);
  std::vector<Region> regions;
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    regions.push_back(Region{c0, c0 + p.dim(0), 0, h, 0, w});
    c0 += p.dim(0);
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op_result("concat_channels", {c, h, w}, std::move(out), std::move(inputs),
                        [regions](const Tensor& g, const Tensor&) {
                          std::vector<Tensor> gs;
                          for (const auto& r : regions) gs.push_back(crop_region(g, r));
                          return gs;
                        });
}

Tensor concat_channels(std::initializer_list<Tensor> parts) {
  return concat_channels(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor mean_spatial(const Tensor& a) {
  require_rank("mean_spatial", a, 3);
  return scale(channel_sum(a), 1.0 / static_cast<double>(a.dim(1) * a.dim(2)));
}

Tensor crop_resize(const Tensor& a, const PixelRect& rect, std::size_t out_h, std::size_t out_w) {
  require_rank("crop_resize", a, 3);
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (rect.x0 < 0 || rect.y0 < 0 || rect.x1 <= rect.x0 || rect.y1 <= rect.y0 ||
      rect.x1 > static_cast<int>(w) || rect.y1 > static_cast<int>(h)) {
    throw RangeError("crop_resize box outside image " + shape_str(a.shape()));
  }
  if (out_h == 0 || out_w == 0) throw DimensionError("crop_resize: empty output");
  auto op = std::make_shared<LinearOperator>();
  SparseMap& m = op->forward;
  m.rows = c * out_h * out_w;
  m.cols = c * h * w;
  m.row_start.push_back(0);
  const double bh = rect.height(), bw = rect.width();
  auto taps = [](double pos, int lo, int hi) {
    // Bilinear taps along one axis, clamped to [lo, hi).
    pos = std::clamp(pos, static_cast<double>(lo), static_cast<double>(hi - 1));
    const int i0 = static_cast<int>(std::floor(pos));
    const int i1 = std::min(i0 + 1, hi - 1);
    const double f = pos - i0;
    return std::tuple<int, int, double>{i0, i1, f};
  };
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1, fy] =
          taps(rect.y0 + (oy + 0.5) * bh / static_cast<double>(out_h) - 0.5, rect.y0, rect.y1);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1, fx] =
            taps(rect.x0 + (ox + 0.5) * bw / static_cast<double>(out_w) - 0.5, rect.x0, rect.x1);
        std::unordered_map<std::size_t, double> acc;
        auto put = [&](int y, int x, double wgt) {
          if (wgt != 0.0) acc[(ch * h + y) * w + x] += wgt;
        };
        put(y0, x0, (1 - fy) * (1 - fx));
        put(y0, x1, (1 - fy) * fx);
        put(y1, x0, fy * (1 - fx));
        put(y1, x1, fy * fx);
        std::vector<std::pair<std::size_t, double>> entries(acc.begin(), acc.end());
        std::sort(entries.begin(), entries.end());
        for (const auto& [col, wgt] : entries) {
          m.col.push_back(col);
          m.weight.push_back(wgt);
        }
        m.row_start.push_back(m.col.size());
      }
    }
  }
  op->adjoint = transpose_map(m);
  return apply_linear(a, op, false, {c, out_h, out_w});
}

}  // namespace detgan
