#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "topopt/nn/layers.hpp"

using namespace topopt;
using namespace topopt::nn;
using T64 = Tensor<double>;

namespace {

std::mt19937_64 rng_for(int seed) { return std::mt19937_64(static_cast<std::uint64_t>(seed)); }

/// Uniform in [-1, 1] with |x| >= gap, so kinks of ReLU are avoided.
T64 away_from_zero(std::vector<std::size_t> shape, std::mt19937_64& rng, double gap = 0.05) {
  T64 t = random_uniform<double>(std::move(shape), rng, -1.0, 1.0);
  for (auto& v : t.values())
    if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
  return t;
}

/// Brute-force stride-1 cross-correlation with zero padding `top`/`left`.
T64 conv_oracle(const T64& x, const T64& k, const T64& b, std::size_t Ho, std::size_t Wo, std::size_t top,
                std::size_t left) {
  const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const auto kh = k.dim(0), kw = k.dim(1), Co = k.dim(3);
  T64 y({N, Ho, Wo, Co});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t co = 0; co < Co; ++co) {
          double s = b[co];
          for (std::size_t s1 = 0; s1 < kh; ++s1)
            for (std::size_t t1 = 0; t1 < kw; ++t1)
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                const long iy = static_cast<long>(oy + s1) - static_cast<long>(top);
                const long ix = static_cast<long>(ox + t1) - static_cast<long>(left);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += k[((s1 * kw + t1) * Ci + ci) * Co + co] *
                     x.at(n, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), ci);
              }
          y.at(n, oy, ox, co) = s;
        }
  return y;
}

}  // namespace

TEST(Conv2D, OneByOneUnitKernelIsIdentity) {
  auto rng = rng_for(1);
  Conv2D<double> conv("c", 1, 1, 1, 1, Padding::Same);
  conv.weight.value.fill(1.0);
  const T64 x = random_normal<double>({2, 4, 5, 1}, rng);
  EXPECT_EQ(conv.forward(x), x);
}

TEST(Conv2D, ZeroKernelGivesBias) {
  Conv2D<double> conv("c", 3, 3, 2, 3, Padding::Same);
  conv.bias.value = T64({3}, std::vector<double>{0.5, -1.0, 2.0});
  auto rng = rng_for(2);
  const auto y = conv.forward(random_normal<double>({1, 4, 4, 2}, rng));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], conv.bias.value[i % 3]);
}

TEST(Conv2D, MatchesBruteForce) {
  auto rng = rng_for(3);
  const T64 x = random_normal<double>({1, 5, 5, 2}, rng);
  for (auto pad : {Padding::Same, Padding::Valid}) {
    Conv2D<double> conv("c", 3, 3, 2, 1, pad);
    conv.init_he(rng);
    conv.bias.value[0] = 0.3;
    const auto y = conv.forward(x);
    const bool same = pad == Padding::Same;
    const auto ref = conv_oracle(x, conv.weight.value, conv.bias.value, same ? 5 : 3, same ? 5 : 3, same, same);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
  // Even kernel, valid: the stem shape 41x81 -> 40x80 in miniature.
  Conv2D<double> stem("s", 2, 2, 2, 3, Padding::Valid);
  stem.init_he(rng);
  const T64 x2 = random_normal<double>({2, 5, 7, 2}, rng);
  const auto y2 = stem.forward(x2);
  const auto ref2 = conv_oracle(x2, stem.weight.value, stem.bias.value, 4, 6, 0, 0);
  for (std::size_t i = 0; i < y2.size(); ++i) EXPECT_NEAR(y2[i], ref2[i], 1e-12);
}

TEST(Conv2D, ShapeErrors) {
  Conv2D<double> conv("c", 3, 3, 2, 1, Padding::Valid);
  EXPECT_THROW(conv.forward(T64({1, 4, 4, 3})), ShapeMismatch);
  EXPECT_THROW(conv.forward(T64({1, 2, 4, 2})), ShapeMismatch);
  EXPECT_THROW(conv.forward(T64({4, 4, 2})), ShapeMismatch);
}

TEST(Conv2D, ZeroUpstreamGradient) {
  auto rng = rng_for(4);
  Conv2D<double> conv("c", 3, 3, 2, 2, Padding::Same);
  conv.init_he(rng);
  const auto y = conv.forward(random_normal<double>({2, 4, 4, 2}, rng));
  const auto gx = conv.backward(T64(y.shape()));
  for (double v : gx.values()) EXPECT_EQ(v, 0.0);
  for (double v : conv.weight.grad.values()) EXPECT_EQ(v, 0.0);
  for (double v : conv.bias.grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2D, IdentityKernelPassesGradient) {
  auto rng = rng_for(5);
  Conv2D<double> conv("c", 3, 3, 1, 1, Padding::Same);
  conv.weight.value[4] = 1.0;  // centre tap
  conv.forward(random_normal<double>({1, 5, 6, 1}, rng));
  const T64 gy = random_normal<double>({1, 5, 6, 1}, rng);
  EXPECT_EQ(conv.backward(gy), gy);
}

TEST(Conv2D, GradientsMatchFiniteDifferences) {
  auto rng = rng_for(6);
  for (auto pad : {Padding::Same, Padding::Valid}) {
    Conv2D<double> conv("c", 3, 3, 3, 2, pad);
    conv.init_he(rng);
    conv.bias.value = random_normal<double>({2}, rng);
    T64 x = random_normal<double>({2, 6, 6, 3}, rng);
    const auto y0 = conv.forward(x);
    const T64 w = random_normal<double>(y0.shape(), rng);
    auto loss = [&] { return dot(conv.forward(x), w); };
    conv.forward(x);
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    const auto gx = conv.backward(w);
    const auto gw = conv.weight.grad, gb = conv.bias.grad;
    EXPECT_LE(gradcheck::max_error(x, gx, loss), 1e-6);
    EXPECT_LE(gradcheck::max_error(conv.weight.value, gw, loss), 1e-6);
    EXPECT_LE(gradcheck::max_error(conv.bias.value, gb, loss), 1e-6);
  }
}

TEST(Conv2D, AdjointIdentity) {
  auto rng = rng_for(7);
  Conv2D<double> conv("c", 3, 3, 3, 4, Padding::Same);
  conv.init_he(rng);
  const T64 x = random_normal<double>({2, 6, 5, 3}, rng);
  const T64 y = random_normal<double>({2, 6, 5, 4}, rng);
  const double lhs = dot(conv.forward(x), y);
  const double rhs = dot(x, conv.backward(y));
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(TransposeConv2, SinglePixelPaintsKernel) {
  auto rng = rng_for(8);
  TransposeConv2<double> up("u", 1, 2);
  up.init_he(rng);
  const T64 x({1, 1, 1, 1}, std::vector<double>{-2.5});
  const auto y = up.forward(x);
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{1, 2, 2, 2}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(y.at(0, a, b, c), -2.5 * up.weight.value[(a * 2 + b) * 2 + c]);
}

TEST(TransposeConv2, Linear) {
  auto rng = rng_for(9);
  TransposeConv2<double> up("u", 3, 2);
  up.init_he(rng);
  const T64 a = random_normal<double>({2, 3, 4, 3}, rng), b = random_normal<double>({2, 3, 4, 3}, rng);
  T64 ab = a;
  add_inplace(ab, b);
  auto sum = up.forward(a);
  add_inplace(sum, up.forward(b));
  const auto direct = up.forward(ab);
  for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_NEAR(direct[i], sum[i], 1e-12);
}

TEST(TransposeConv2, AdjointOfStridedConvolution) {
  // <tconv(y), x> = <y, conv_s2(x)> where conv_s2 is the 2x2 stride-2
  // correlation with the same kernel read as [2, 2, cout -> cin].
  auto rng = rng_for(10);
  TransposeConv2<double> up("u", 3, 2);
  up.init_he(rng);
  const T64 y = random_normal<double>({2, 3, 4, 3}, rng);
  const T64 x = random_normal<double>({2, 6, 8, 2}, rng);
  T64 conv_x({2, 3, 4, 3});
  const auto& k = up.weight.value;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t ci = 0; ci < 3; ++ci) {
          double s = 0;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              for (std::size_t co = 0; co < 2; ++co) s += k[((a * 2 + b) * 3 + ci) * 2 + co] * x.at(n, 2 * i + a, 2 * j + b, co);
          conv_x.at(n, i, j, ci) = s;
        }
  const double lhs = dot(up.forward(y), x), rhs = dot(y, conv_x);
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
  const auto back = up.backward(x);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], conv_x[i], 1e-12);
}

TEST(TransposeConv2, GradientsMatchFiniteDifferences) {
  auto rng = rng_for(11);
  TransposeConv2<double> up("u", 3, 2);
  up.init_he(rng);
  up.bias.value = random_normal<double>({2}, rng);
  T64 x = random_normal<double>({2, 3, 3, 3}, rng);
  const T64 w = random_normal<double>({2, 6, 6, 2}, rng);
  auto loss = [&] { return dot(up.forward(x), w); };
  up.forward(x);
  const auto gx = up.backward(w);
  const auto gw = up.weight.grad, gb = up.bias.grad;
  EXPECT_LE(gradcheck::max_error(x, gx, loss), 1e-6);
  EXPECT_LE(gradcheck::max_error(up.weight.value, gw, loss), 1e-6);
  EXPECT_LE(gradcheck::max_error(up.bias.value, gb, loss), 1e-6);
  EXPECT_THROW(up.forward(T64({1, 2, 2, 4})), ShapeMismatch);
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  auto rng = rng_for(12);
  BatchNorm<double> bn("bn", 3, 0.99, 1e-12);
  T64 x = random_normal<double>({4, 5, 6, 3}, rng, 3.0);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<double>(i % 3) * 5.0;
  const auto y = bn.forward(x, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const std::size_t M = y.size() / 3;
    for (std::size_t p = 0; p < M; ++p) m += y[p * 3 + c];
    m /= static_cast<double>(M);
    for (std::size_t p = 0; p < M; ++p) v += (y[p * 3 + c] - m) * (y[p * 3 + c] - m);
    v /= static_cast<double>(M);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(BatchNorm, StandardizedBatchPassesThrough) {
  // Two samples of +-1 per channel: mean 0, variance 1 already.
  BatchNorm<double> bn("bn", 2);
  T64 x({2, 1, 1, 2}, std::vector<double>{1.0, -1.0, -1.0, 1.0});
  const auto y = bn.forward(x, Mode::Train);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, RunningStatisticsAndInferAffine) {
  auto rng = rng_for(13);
  BatchNorm<double> bn("bn", 2, 0.99, 1e-5);
  const T64 x = random_normal<double>({3, 2, 2, 2}, rng);
  bn.forward(x, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t p = 0; p < 12; ++p) m += x[p * 2 + c];
    m /= 12;
    for (std::size_t p = 0; p < 12; ++p) v += (x[p * 2 + c] - m) * (x[p * 2 + c] - m);
    v /= 11;  // unbiased
    EXPECT_NEAR(bn.running_mean[c], 0.01 * m, 1e-15);
    EXPECT_NEAR(bn.running_var[c], 0.99 + 0.01 * v, 1e-15);
  }
  bn.gamma.value = T64({2}, std::vector<double>{1.5, -0.5});
  bn.beta.value = T64({2}, std::vector<double>{0.1, 0.2});
  // Frozen statistics: y = a_c x + b_c exactly per channel.
  const T64 z0({1, 1, 1, 2}, 0.0), z1({1, 1, 1, 2}, 1.0);
  const auto b = bn.forward(z0, Mode::Infer), ab = bn.forward(z1, Mode::Infer);
  const T64 probe = random_normal<double>({2, 3, 3, 2}, rng);
  const auto y = bn.forward(probe, Mode::Infer);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t c = i % 2;
    EXPECT_NEAR(y[i], b[c] + (ab[c] - b[c]) * probe[i], 1e-12);
  }
  EXPECT_EQ(bn.forward(probe, Mode::Infer), y);
}

TEST(BatchNorm, DegenerateBatch) {
  BatchNorm<double> bn("bn", 2);
  EXPECT_THROW(bn.forward(T64({1, 3, 3, 2}), Mode::Train), DegenerateBatch);
  EXPECT_NO_THROW(bn.forward(T64({1, 3, 3, 2}), Mode::Infer));
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  auto rng = rng_for(14);
  for (auto mode : {Mode::Train, Mode::Infer}) {
    BatchNorm<double> bn("bn", 3);
    bn.gamma.value = random_uniform<double>({3}, rng, 0.5, 1.5);
    bn.beta.value = random_normal<double>({3}, rng);
    bn.running_mean = random_normal<double>({3}, rng);
    bn.running_var = random_uniform<double>({3}, rng, 0.5, 2.0);
    const auto rm = bn.running_mean, rv = bn.running_var;
    T64 x = random_normal<double>({2, 4, 3, 3}, rng);
    const T64 w = random_normal<double>(x.shape(), rng);
    auto loss = [&] {
      const double l = dot(bn.forward(x, mode), w);
      bn.running_mean = rm;
      bn.running_var = rv;
      return l;
    };
    loss();
    bn.forward(x, mode);
    bn.running_mean = rm;
    bn.running_var = rv;
    const auto gx = bn.backward(w);
    const auto gg = bn.gamma.grad, gb = bn.beta.grad;
    EXPECT_LE(gradcheck::max_error(x, gx, loss), 1e-6);
    EXPECT_LE(gradcheck::max_error(bn.gamma.value, gg, loss), 1e-6);
    EXPECT_LE(gradcheck::max_error(bn.beta.value, gb, loss), 1e-6);
  }
}

TEST(MaxPool2, ConstantInputRoutesToFirstIndex) {
  MaxPool2<double> pool;
  const auto y = pool.forward(T64({1, 4, 4, 1}, 2.0));
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{1, 2, 2, 1}));
  for (double v : y.values()) EXPECT_EQ(v, 2.0);
  const auto g = pool.backward(T64({1, 2, 2, 1}, 1.0));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g.at(0, r, c, 0), (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool2, RampGivesWindowMaxima) {
  T64 x({1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  MaxPool2<double> pool;
  const auto y = pool.forward(x);
  EXPECT_EQ(y.storage(), (std::vector<double>{5, 7, 13, 15}));
  EXPECT_THROW(pool.forward(T64({1, 3, 4, 1})), OddDimension);
  EXPECT_THROW(pool.forward(T64({1, 4, 5, 1})), OddDimension);
}

TEST(MaxPool2, GradientMatchesFiniteDifferences) {
  auto rng = rng_for(15);
  // A permutation of well separated values: no ties within 2h.
  T64 x({2, 4, 6, 3});
  std::vector<double> vals(x.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  x = T64(x.shape(), vals);
  MaxPool2<double> pool;
  const T64 w = random_normal<double>({2, 2, 3, 3}, rng);
  auto loss = [&] { return dot(pool.forward(x), w); };
  pool.forward(x);
  EXPECT_LE(gradcheck::max_error(x, pool.backward(w), loss), 1e-6);
}

TEST(Activations, ValuesAndRange) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-800.0), 0.0);
  EXPECT_LT(sigmoid(800.0), 1.0);
  EXPECT_GT(sigmoid(-200.0f), 0.0f);
  EXPECT_LT(sigmoid(40.0f), 1.0f);
  ReLU<double> relu;
  const auto y = relu.forward(T64({1, 1, 1, 3}, std::vector<double>{-2.0, 0.0, 3.0}));
  EXPECT_EQ(y.storage(), (std::vector<double>{0.0, 0.0, 3.0}));
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  auto rng = rng_for(16);
  T64 x = away_from_zero({2, 3, 4, 2}, rng);
  const T64 w = random_normal<double>(x.shape(), rng);
  ReLU<double> relu;
  Sigmoid<double> sig;
  auto lr = [&] { return dot(relu.forward(x), w); };
  auto ls = [&] { return dot(sig.forward(x), w); };
  relu.forward(x);
  EXPECT_LE(gradcheck::max_error(x, relu.backward(w), lr), 1e-6);
  sig.forward(x);
  EXPECT_LE(gradcheck::max_error(x, sig.backward(w), ls), 1e-6);
}
