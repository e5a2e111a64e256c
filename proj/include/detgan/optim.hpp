#pragma once

// In-place optimizers over leaf parameter tensors. State is kept per tensor in
// the order the parameters are passed, which must stay fixed between steps.

#include <cmath>
#include <string>
#include <vector>

#include "detgan/checkpoint.hpp"
#include "detgan/errors.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

class Adam {
 public:
  explicit Adam(double lr = 2e-4, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    check(params, grads);
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_data();
      const auto g = grads[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m_[i][k] = beta1_ * m_[i][k] + (1 - beta1_) * g[k];
        v_[i][k] = beta2_ * v_[i][k] + (1 - beta2_) * g[k] * g[k];
        w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  long steps() const { return t_; }

  void save(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      out.emplace_back(prefix + "m" + std::to_string(i), Tensor::from_data({m_[i].size()}, m_[i]));
      out.emplace_back(prefix + "v" + std::to_string(i), Tensor::from_data({v_[i].size()}, v_[i]));
    }
  }

  void load(const std::string& prefix, const NamedTensors& stored, const std::vector<Tensor>& params) {
    m_.clear();
    v_.clear();
    t_ = 0;
    const Tensor* t = find(stored, prefix + "t");
    if (!t || t->item() == 0) return;
    t_ = static_cast<long>(t->item());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(load_vec(stored, prefix + "m" + std::to_string(i), params[i].numel()));
      v_.push_back(load_vec(stored, prefix + "v" + std::to_string(i), params[i].numel()));
    }
  }

 private:
  static void check(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ContractError("optimizer: params/grads count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].shape() != grads[i].shape()) throw DimensionError("optimizer: grad shape mismatch");
    }
  }
  static const Tensor* find(const NamedTensors& stored, const std::string& key) {
    for (const auto& [n, v] : stored) {
      if (n == key) return &v;
    }
    return nullptr;
  }
  static std::vector<double> load_vec(const NamedTensors& stored, const std::string& key, std::size_t n) {
    const Tensor* t = find(stored, key);
    if (!t || t->numel() != n) throw ParseError("checkpoint optimizer state '" + key + "' missing or mis-sized", 0);
    return {t->data().begin(), t->data().end()};
  }
  friend class Sgd;

  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Heavy-ball SGD: v = mu v + g, w -= lr v.
class Sgd {
 public:
  explicit Sgd(double lr = 0.01, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    Adam::check(params, grads);
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.numel(), 0.0);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_data();
      const auto g = grads[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        velocity_[i][k] = momentum_ * velocity_[i][k] + g[k];
        w[k] -= lr_ * velocity_[i][k];
      }
    }
  }

  double lr() const { return lr_; }

  void save(const std::string& prefix, NamedTensors& out) const {
    for (std::size_t i = 0; i < velocity_.size(); ++i) {
      out.emplace_back(prefix + "vel" + std::to_string(i),
                       Tensor::from_data({velocity_[i].size()}, velocity_[i]));
    }
  }

  void load(const std::string& prefix, const NamedTensors& stored, const std::vector<Tensor>& params) {
    velocity_.clear();
    if (!Adam::find(stored, prefix + "vel0")) return;
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_.push_back(Adam::load_vec(stored, prefix + "vel" + std::to_string(i), params[i].numel()));
    }
  }

 private:
  double lr_, momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace detgan
