#pragma once

// Layers with hand-written reverse-mode gradients. Each layer caches what
// its backward pass needs during forward(); backward() returns the input
// gradient and accumulates parameter gradients into Param::grad.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "topopt/nn/tensor.hpp"

namespace topopt::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value, grad, m, v;
  bool decay = false;  // included in the L2 penalty

  Param() = default;
  Param(std::string n, Tensor<T> init, bool l2)
      : name(std::move(n)), value(std::move(init)), decay(l2) {
    grad = Tensor<T>(value.shape());
    m = Tensor<T>(value.shape());
    v = Tensor<T>(value.shape());
  }
  void zero_grad() { grad.fill(T{}); }
};

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Stride-1 2-D cross-correlation, NHWC input, kernels [kh, kw, cin, cout].
template <typename T>
class Conv2D {
 public:
  Conv2D() = default;
  Conv2D(std::string name, std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout, Padding pad)
      : kh_(kh), kw_(kw), cin_(cin), cout_(cout), pad_(pad),
        weight(name + ".w", Tensor<T>({kh, kw, cin, cout}), true),
        bias(name + ".b", Tensor<T>({cout}), false) {}

  template <typename Rng>
  void init_he(Rng& rng) {
    const double fan_in = static_cast<double>(kh_ * kw_ * cin_);
    weight.value = random_normal<T>({kh_, kw_, cin_, cout_}, rng, std::sqrt(2.0 / fan_in));
    bias.value.fill(T{});
  }

  std::size_t out_h(std::size_t h) const { return pad_ == Padding::Same ? h : h - kh_ + 1; }
  std::size_t out_w(std::size_t w) const { return pad_ == Padding::Same ? w : w - kw_ + 1; }
  std::size_t pad_top() const { return pad_ == Padding::Same ? (kh_ - 1) / 2 : 0; }
  std::size_t pad_left() const { return pad_ == Padding::Same ? (kw_ - 1) / 2 : 0; }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

  Tensor<T> forward(const Tensor<T>& x) {
    check_input(x);
    input_ = x;
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = out_h(H), Wo = out_w(W), K = kh_ * kw_ * cin_;
    Tensor<T> y({N, Ho, Wo, cout_});
    Eigen::Map<const RowMat<T>> Wm(weight.value.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout_));
    Eigen::Map<const RowVec<T>> b(bias.value.data(), static_cast<Eigen::Index>(cout_));
    RowMat<T> col(static_cast<Eigen::Index>(Ho * Wo), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < N; ++n) {
      im2col(x, n, col);
      Eigen::Map<RowMat<T>> Y(y.data() + n * Ho * Wo * cout_, static_cast<Eigen::Index>(Ho * Wo),
                              static_cast<Eigen::Index>(cout_));
      Y.noalias() = col * Wm;
      Y.rowwise() += b;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Tensor<T>& x = input_;
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = out_h(H), Wo = out_w(W), K = kh_ * kw_ * cin_;
    if (gy.shape() != std::vector<std::size_t>{N, Ho, Wo, cout_}) throw ShapeMismatch("conv2d backward grad_out");
    Tensor<T> gx(x.shape());
    Eigen::Map<const RowMat<T>> Wm(weight.value.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout_));
    Eigen::Map<RowMat<T>> gW(weight.grad.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout_));
    Eigen::Map<RowVec<T>> gb(bias.grad.data(), static_cast<Eigen::Index>(cout_));
    RowMat<T> col(static_cast<Eigen::Index>(Ho * Wo), static_cast<Eigen::Index>(K));
    RowMat<T> gcol(static_cast<Eigen::Index>(Ho * Wo), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < N; ++n) {
      Eigen::Map<const RowMat<T>> G(gy.data() + n * Ho * Wo * cout_, static_cast<Eigen::Index>(Ho * Wo),
                                    static_cast<Eigen::Index>(cout_));
      im2col(x, n, col);
      gW.noalias() += col.transpose() * G;
      gb += G.colwise().sum();
      gcol.noalias() = G * Wm.transpose();
      col2im(gcol, n, gx);
    }
    return gx;
  }

  Param<T> weight, bias;

 private:
  void check_input(const Tensor<T>& x) const {
    require_rank4(x, "conv2d");
    if (x.dim(3) != cin_) throw ShapeMismatch("conv2d input channels " + shape_string(x.shape()));
    if (pad_ == Padding::Valid && (x.dim(1) < kh_ || x.dim(2) < kw_))
      throw ShapeMismatch("conv2d kernel larger than input");
  }

  void im2col(const Tensor<T>& x, std::size_t n, RowMat<T>& col) const {
    const std::size_t H = x.dim(1), W = x.dim(2), Ho = out_h(H), Wo = out_w(W);
    const auto pt = static_cast<std::ptrdiff_t>(pad_top()), pl = static_cast<std::ptrdiff_t>(pad_left());
    const T* src = x.data() + n * H * W * cin_;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = col.data() + (oy * Wo + ox) * kh_ * kw_ * cin_;
        for (std::size_t ky = 0; ky < kh_; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pt;
          for (std::size_t kx = 0; kx < kw_; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pl;
            T* dst = row + (ky * kw_ + kx) * cin_;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix >= static_cast<std::ptrdiff_t>(W))
              std::fill_n(dst, cin_, T{});
            else
              std::copy_n(src + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * cin_, cin_, dst);
          }
        }
      }
  }

  void col2im(const RowMat<T>& gcol, std::size_t n, Tensor<T>& gx) const {
    const std::size_t H = gx.dim(1), W = gx.dim(2), Ho = out_h(H), Wo = out_w(W);
    const auto pt = static_cast<std::ptrdiff_t>(pad_top()), pl = static_cast<std::ptrdiff_t>(pad_left());
    T* dst = gx.data() + n * H * W * cin_;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T* row = gcol.data() + (oy * Wo + ox) * kh_ * kw_ * cin_;
        for (std::size_t ky = 0; ky < kh_; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pt;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < kw_; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pl;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            T* d = dst + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * cin_;
            const T* s = row + (ky * kw_ + kx) * cin_;
            for (std::size_t c = 0; c < cin_; ++c) d[c] += s[c];
          }
        }
      }
  }

  std::size_t kh_ = 0, kw_ = 0, cin_ = 0, cout_ = 0;
  Padding pad_ = Padding::Same;
  Tensor<T> input_;
};

/// 2x2 kernel, stride 2 transpose convolution: each input pixel paints a
/// 2x2 output patch. Kernels are [2, 2, cin, cout].
template <typename T>
class TransposeConv2 {
 public:
  TransposeConv2() = default;
  TransposeConv2(std::string name, std::size_t cin, std::size_t cout)
      : cin_(cin), cout_(cout),
        weight(name + ".w", Tensor<T>({2, 2, cin, cout}), true),
        bias(name + ".b", Tensor<T>({cout}), false) {}

  template <typename Rng>
  void init_he(Rng& rng) {
    weight.value = random_normal<T>({2, 2, cin_, cout_}, rng, std::sqrt(2.0 / static_cast<double>(cin_)));
    bias.value.fill(T{});
  }

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

  Tensor<T> forward(const Tensor<T>& x) {
    require_rank4(x, "transpose_conv2");
    if (x.dim(3) != cin_) throw ShapeMismatch("transpose_conv2 input channels " + shape_string(x.shape()));
    input_ = x;
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<T> y({N, 2 * H, 2 * W, cout_});
    const RowMat<T> Wk = packed_kernel();
    RowMat<T> patch(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(4 * cout_));
    for (std::size_t n = 0; n < N; ++n) {
      Eigen::Map<const RowMat<T>> X(x.data() + n * H * W * cin_, static_cast<Eigen::Index>(H * W),
                                    static_cast<Eigen::Index>(cin_));
      patch.noalias() = X * Wk;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              T* dst = &y.at(n, 2 * i + a, 2 * j + b, 0);
              const T* src = patch.data() + (i * W + j) * 4 * cout_ + (a * 2 + b) * cout_;
              for (std::size_t c = 0; c < cout_; ++c) dst[c] = src[c] + bias.value[c];
            }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Tensor<T>& x = input_;
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (gy.shape() != std::vector<std::size_t>{N, 2 * H, 2 * W, cout_})
      throw ShapeMismatch("transpose_conv2 backward grad_out");
    Tensor<T> gx(x.shape());
    const RowMat<T> Wk = packed_kernel();
    RowMat<T> gWk = RowMat<T>::Zero(static_cast<Eigen::Index>(cin_), static_cast<Eigen::Index>(4 * cout_));
    RowMat<T> gpatch(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(4 * cout_));
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              const T* src = &gy.at(n, 2 * i + a, 2 * j + b, 0);
              T* dst = gpatch.data() + (i * W + j) * 4 * cout_ + (a * 2 + b) * cout_;
              for (std::size_t c = 0; c < cout_; ++c) {
                dst[c] = src[c];
                bias.grad[c] += src[c];
              }
            }
      Eigen::Map<const RowMat<T>> X(x.data() + n * H * W * cin_, static_cast<Eigen::Index>(H * W),
                                    static_cast<Eigen::Index>(cin_));
      Eigen::Map<RowMat<T>> GX(gx.data() + n * H * W * cin_, static_cast<Eigen::Index>(H * W),
                               static_cast<Eigen::Index>(cin_));
      gWk.noalias() += X.transpose() * gpatch;
      GX.noalias() = gpatch * Wk.transpose();
    }
    for (std::size_t ab = 0; ab < 4; ++ab)
      for (std::size_t ci = 0; ci < cin_; ++ci)
        for (std::size_t co = 0; co < cout_; ++co)
          weight.grad[(ab * cin_ + ci) * cout_ + co] +=
              gWk(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(ab * cout_ + co));
    return gx;
  }

  Param<T> weight, bias;

 private:
  // [cin, 4*cout] with column (a*2+b)*cout + co.
  RowMat<T> packed_kernel() const {
    RowMat<T> k(static_cast<Eigen::Index>(cin_), static_cast<Eigen::Index>(4 * cout_));
    for (std::size_t ab = 0; ab < 4; ++ab)
      for (std::size_t ci = 0; ci < cin_; ++ci)
        for (std::size_t co = 0; co < cout_; ++co)
          k(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(ab * cout_ + co)) =
              weight.value[(ab * cin_ + ci) * cout_ + co];
    return k;
  }

  std::size_t cin_ = 0, cout_ = 0;
  Tensor<T> input_;
};

/// Per-channel batch normalization over N, H and W.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::string name, std::size_t channels, double momentum = 0.99, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps),
        gamma(name + ".gamma", Tensor<T>({channels}, T{1}), false),
        beta(name + ".beta", Tensor<T>({channels}), false),
        running_mean({channels}, T{0}), running_var({channels}, T{1}) {}

  std::size_t channels() const { return channels_; }
  double momentum() const { return momentum_; }
  double eps() const { return eps_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    require_rank4(x, "batchnorm");
    if (x.dim(3) != channels_) throw ShapeMismatch("batchnorm channels " + shape_string(x.shape()));
    mode_ = mode;
    const std::size_t C = channels_, M = x.size() / C;
    Tensor<T> y(x.shape());
    inv_std_.assign(C, 0.0);
    if (mode == Mode::Train) {
      if (x.dim(0) < 2) throw DegenerateBatch("train-mode batch norm needs batch size >= 2");
      std::vector<double> mean(C, 0.0), var(C, 0.0);
      for (std::size_t p = 0; p < M; ++p)
        for (std::size_t c = 0; c < C; ++c) mean[c] += static_cast<double>(x[p * C + c]);
      for (auto& m : mean) m /= static_cast<double>(M);
      for (std::size_t p = 0; p < M; ++p)
        for (std::size_t c = 0; c < C; ++c) {
          const double d = static_cast<double>(x[p * C + c]) - mean[c];
          var[c] += d * d;
        }
      for (auto& v : var) v /= static_cast<double>(M);
      xhat_ = Tensor<T>(x.shape());
      for (std::size_t c = 0; c < C; ++c) inv_std_[c] = 1.0 / std::sqrt(var[c] + eps_);
      for (std::size_t p = 0; p < M; ++p)
        for (std::size_t c = 0; c < C; ++c) {
          const auto i = p * C + c;
          const double xh = (static_cast<double>(x[i]) - mean[c]) * inv_std_[c];
          xhat_[i] = static_cast<T>(xh);
          y[i] = static_cast<T>(static_cast<double>(gamma.value[c]) * xh + static_cast<double>(beta.value[c]));
        }
      const double unbias = static_cast<double>(M) / static_cast<double>(M - 1);
      for (std::size_t c = 0; c < C; ++c) {
        running_mean[c] = static_cast<T>(momentum_ * running_mean[c] + (1.0 - momentum_) * mean[c]);
        running_var[c] = static_cast<T>(momentum_ * running_var[c] + (1.0 - momentum_) * var[c] * unbias);
      }
    } else {
      xhat_ = Tensor<T>(x.shape());
      for (std::size_t c = 0; c < C; ++c) inv_std_[c] = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps_);
      for (std::size_t p = 0; p < M; ++p)
        for (std::size_t c = 0; c < C; ++c) {
          const auto i = p * C + c;
          const double xh = (static_cast<double>(x[i]) - running_mean[c]) * inv_std_[c];
          xhat_[i] = static_cast<T>(xh);
          y[i] = static_cast<T>(static_cast<double>(gamma.value[c]) * xh + static_cast<double>(beta.value[c]));
        }
    }
    shape_ = x.shape();
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    if (gy.shape() != shape_) throw ShapeMismatch("batchnorm backward grad_out");
    const std::size_t C = channels_, M = gy.size() / C;
    Tensor<T> gx(gy.shape());
    std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
    for (std::size_t p = 0; p < M; ++p)
      for (std::size_t c = 0; c < C; ++c) {
        const auto i = p * C + c;
        sum_g[c] += static_cast<double>(gy[i]);
        sum_gx[c] += static_cast<double>(gy[i]) * static_cast<double>(xhat_[i]);
      }
    for (std::size_t c = 0; c < C; ++c) {
      gamma.grad[c] += static_cast<T>(sum_gx[c]);
      beta.grad[c] += static_cast<T>(sum_g[c]);
    }
    if (mode_ == Mode::Infer) {
      // Statistics are constants here: a per-channel affine map.
      for (std::size_t p = 0; p < M; ++p)
        for (std::size_t c = 0; c < C; ++c)
          gx[p * C + c] = static_cast<T>(gy[p * C + c] * gamma.value[c] * inv_std_[c]);
      return gx;
    }
    const double invM = 1.0 / static_cast<double>(M);
    for (std::size_t p = 0; p < M; ++p)
      for (std::size_t c = 0; c < C; ++c) {
        const auto i = p * C + c;
        const double g = static_cast<double>(gy[i]) - sum_g[c] * invM - static_cast<double>(xhat_[i]) * sum_gx[c] * invM;
        gx[i] = static_cast<T>(static_cast<double>(gamma.value[c]) * inv_std_[c] * g);
      }
    return gx;
  }

  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;

 private:
  std::size_t channels_ = 0;
  double momentum_ = 0.99, eps_ = 1e-5;
  Mode mode_ = Mode::Train;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  std::vector<std::size_t> shape_;
};

/// 2x2 max pooling, stride 2. Ties go to the first position in row-major
/// window order.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    require_rank4(x, "maxpool2");
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (H % 2 || W % 2) throw OddDimension("maxpool2 input " + shape_string(x.shape()));
    in_shape_ = x.shape();
    Tensor<T> y({N, H / 2, W / 2, C});
    argmax_.assign(y.size(), 0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H / 2; ++i)
        for (std::size_t j = 0; j < W / 2; ++j)
          for (std::size_t c = 0; c < C; ++c) {
            std::size_t best = ((n * H + 2 * i) * W + 2 * j) * C + c;
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b) {
                const std::size_t idx = ((n * H + 2 * i + a) * W + 2 * j + b) * C + c;
                if (x[idx] > x[best]) best = idx;
              }
            const std::size_t o = ((n * (H / 2) + i) * (W / 2) + j) * C + c;
            y[o] = x[best];
            argmax_[o] = best;
          }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    if (gy.size() != argmax_.size()) throw ShapeMismatch("maxpool2 backward grad_out");
    Tensor<T> gx(in_shape_);
    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax_[o]] += gy[o];
    return gx;
  }

 private:
  std::vector<std::size_t> in_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    out_ = x;
    for (auto& v : out_.values()) v = v > T{} ? v : T{};
    return out_;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    if (gy.shape() != out_.shape()) throw ShapeMismatch("relu backward");
    Tensor<T> gx(gy.shape());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = out_[i] > T{} ? gy[i] : T{};
    return gx;
  }

 private:
  Tensor<T> out_;
};

/// Logistic function clamped to the open interval (0, 1) at the working
/// precision.
template <typename T>
T sigmoid(T z) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
  const T s = z >= T{} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
  return std::clamp(s, lo, hi);
}

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    out_ = x;
    for (auto& v : out_.values()) v = sigmoid(v);
    return out_;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    if (gy.shape() != out_.shape()) throw ShapeMismatch("sigmoid backward");
    Tensor<T> gx(gy.shape());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * out_[i] * (T{1} - out_[i]);
    return gx;
  }

 private:
  Tensor<T> out_;
};

}  // namespace topopt::nn
