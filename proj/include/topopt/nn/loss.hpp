#pragma once

#include <cmath>
#include <vector>

#include "topopt/nn/layers.hpp"
#include "topopt/nn/tensor.hpp"

namespace topopt::nn {

namespace detail {
// log(1 + e^z) without overflow
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
// p log p with 0 log 0 = 0
inline double xlogx(double p) { return p > 0 ? p * std::log(p) : 0.0; }
}  // namespace detail

/// Mean per-pixel Bernoulli KL divergence D(p || q) between targets p in
/// [0,1] and probabilities q in (0,1).
template <typename T>
double kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  if (p.size() != q.size()) throw ShapeMismatch("kl target vs output");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], qi = q[i];
    if (!(qi > 0.0 && qi < 1.0)) throw NonFinite("kl output outside (0, 1)");
    s += detail::xlogx(pi) + detail::xlogx(1 - pi) - pi * std::log(qi) - (1 - pi) * std::log1p(-qi);
  }
  return s / static_cast<double>(p.size());
}

template <typename T>
struct LossAndGrad {
  double value = 0.0;
  Tensor<T> grad;
};

/// Same divergence evaluated on pre-sigmoid logits z, q = sigmoid(z).
/// The gradient with respect to z is (q - p) / N.
template <typename T>
LossAndGrad<T> kl_with_logits(const Tensor<T>& p, const Tensor<T>& z) {
  if (p.size() != z.size()) throw ShapeMismatch("kl target vs logits");
  const double invN = 1.0 / static_cast<double>(p.size());
  LossAndGrad<T> out{0.0, Tensor<T>(z.shape())};
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], zi = z[i];
    // -log q = softplus(-z), -log(1-q) = softplus(z)
    s += detail::xlogx(pi) + detail::xlogx(1 - pi) + pi * detail::softplus(-zi) + (1 - pi) * detail::softplus(zi);
    const double q = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
    out.grad[i] = static_cast<T>((q - pi) * invN);
  }
  out.value = s * invN;
  if (!std::isfinite(out.value)) throw NonFinite("kl loss");
  return out;
}

/// lambda * 1/2 * sum(theta^2) over decayed parameters. Adds lambda*theta
/// to their gradients when `accumulate` is set.
template <typename T>
double l2_penalty(std::vector<Param<T>*> const& params, double lambda, bool accumulate = false) {
  if (lambda < 0) throw ConfigError("l2 weight must be >= 0");
  double s = 0.0;
  for (auto* p : params) {
    if (!p->decay) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double th = p->value[i];
      s += th * th;
      if (accumulate) p->grad[i] += static_cast<T>(lambda * th);
    }
  }
  return 0.5 * lambda * s;
}

}  // namespace topopt::nn
