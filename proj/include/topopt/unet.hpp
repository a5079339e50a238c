#pragma once

// Encoder-decoder surrogate with skip connections, mapping the
// (H+1) x (W+1) x C nodal input tensor to an H x W density map.
//
//   stem      2x2 valid conv + ReLU                     (H+1, W+1) -> (H, W)
//   encoder   3 x {conv-BN-ReLU, conv-BN-ReLU, pool}    halves each time
//   bridge    2 x {conv-ReLU}
//   decoder   3 x {concat skip, tconv x2, BN-ReLU, conv-ReLU}
//   head      concat stem output, conv-BN-ReLU, conv -> logits -> sigmoid
//
// Decoder block i concatenates the running features with the pooled output
// of encoder block 2-i (same resolution) before upsampling.

#include <array>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "topopt/binary_io.hpp"
#include "topopt/nn/layers.hpp"
#include "topopt/nn/loss.hpp"
#include "topopt/nn/optim.hpp"

namespace topopt::unet {

using nn::Mode;
using nn::Tensor;

struct ArchitectureConfig {
  std::uint32_t in_channels = 6;
  std::uint32_t stem_kernel = 2;
  std::uint32_t stem_width = 16;
  std::uint32_t conv_kernel = 3;
  std::array<std::uint32_t, 3> encoder{16, 32, 64};
  std::uint32_t bridge = 64;
  std::array<std::uint32_t, 3> decoder{32, 16, 16};
  std::uint32_t head = 8;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;

  void validate() const {
    if (in_channels == 0 || stem_width == 0 || bridge == 0 || head == 0) throw ConfigError("zero layer width");
    for (auto w : encoder)
      if (w == 0) throw ConfigError("zero encoder width");
    for (auto w : decoder)
      if (w == 0) throw ConfigError("zero decoder width");
    if (stem_kernel < 1 || conv_kernel < 1) throw ConfigError("kernel sizes must be >= 1");
    if (conv_kernel % 2 == 0) throw ConfigError("same-padding conv kernel must be odd");
  }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

template <typename T>
class UNet {
 public:
  explicit UNet(ArchitectureConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    using nn::Padding;
    const std::size_t k = cfg_.conv_kernel;
    stem_ = nn::Conv2D<T>("stem", cfg_.stem_kernel, cfg_.stem_kernel, cfg_.in_channels, cfg_.stem_width, Padding::Valid);
    std::size_t prev = cfg_.stem_width;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "enc" + std::to_string(i + 1);
      auto& b = enc_[i];
      b.conv1 = nn::Conv2D<T>(n + ".conv1", k, k, prev, cfg_.encoder[i], Padding::Same);
      b.bn1 = nn::BatchNorm<T>(n + ".bn1", cfg_.encoder[i], cfg_.bn_momentum, cfg_.bn_eps);
      b.conv2 = nn::Conv2D<T>(n + ".conv2", k, k, cfg_.encoder[i], cfg_.encoder[i], Padding::Same);
      b.bn2 = nn::BatchNorm<T>(n + ".bn2", cfg_.encoder[i], cfg_.bn_momentum, cfg_.bn_eps);
      prev = cfg_.encoder[i];
    }
    bridge1_ = nn::Conv2D<T>("bridge1", k, k, prev, cfg_.bridge, Padding::Same);
    bridge2_ = nn::Conv2D<T>("bridge2", k, k, cfg_.bridge, cfg_.bridge, Padding::Same);
    prev = cfg_.bridge;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "dec" + std::to_string(i + 1);
      auto& b = dec_[i];
      const std::size_t skip = cfg_.encoder[2 - i];
      b.up = nn::TransposeConv2<T>(n + ".up", prev + skip, cfg_.decoder[i]);
      b.bn = nn::BatchNorm<T>(n + ".bn", cfg_.decoder[i], cfg_.bn_momentum, cfg_.bn_eps);
      b.conv = nn::Conv2D<T>(n + ".conv", k, k, cfg_.decoder[i], cfg_.decoder[i], Padding::Same);
      b.skip_channels = skip;
      b.prev_channels = prev;
      prev = cfg_.decoder[i];
    }
    head_conv_ = nn::Conv2D<T>("head.conv", k, k, prev + cfg_.stem_width, cfg_.head, Padding::Same);
    head_bn_ = nn::BatchNorm<T>("head.bn", cfg_.head, cfg_.bn_momentum, cfg_.bn_eps);
    out_conv_ = nn::Conv2D<T>("head.out", k, k, cfg_.head, 1, Padding::Same);
  }

  const ArchitectureConfig& config() const noexcept { return cfg_; }

  template <typename Rng>
  void initialize(Rng& rng) {
    stem_.init_he(rng);
    for (auto& b : enc_) {
      b.conv1.init_he(rng);
      b.conv2.init_he(rng);
    }
    bridge1_.init_he(rng);
    bridge2_.init_he(rng);
    for (auto& b : dec_) {
      b.up.init_he(rng);
      b.conv.init_he(rng);
    }
    head_conv_.init_he(rng);
    out_conv_.init_he(rng);
  }

  /// NHWC input of shape (N, H+1, W+1, C) -> logits (N, H, W, 1).
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    nn::require_rank4(x, "unet input");
    if (x.dim(3) != cfg_.in_channels) throw ShapeMismatch("unet input channels " + nn::shape_string(x.shape()));
    if (x.dim(1) < cfg_.stem_kernel || x.dim(2) < cfg_.stem_kernel) throw ShapeMismatch("unet input too small");
    const std::size_t H = x.dim(1) - cfg_.stem_kernel + 1, W = x.dim(2) - cfg_.stem_kernel + 1;
    if (H % 8 || W % 8) throw ShapeMismatch("unet element grid must be divisible by 8, got " + nn::shape_string(x.shape()));
    trace_.clear();

    Tensor<T> h = stem_relu_.forward(stem_.forward(x));
    stem_out_channels_ = h.dim(3);
    trace_.push_back({h.dim(1), h.dim(2)});
    Tensor<T> stem_out = h;
    std::array<Tensor<T>, 3> skips;
    for (std::size_t i = 0; i < 3; ++i) {
      auto& b = enc_[i];
      h = b.relu1.forward(b.bn1.forward(b.conv1.forward(h), mode));
      h = b.relu2.forward(b.bn2.forward(b.conv2.forward(h), mode));
      h = b.pool.forward(h);
      skips[i] = h;
      trace_.push_back({h.dim(1), h.dim(2)});
    }
    h = bridge_relu1_.forward(bridge1_.forward(h));
    h = bridge_relu2_.forward(bridge2_.forward(h));
    for (std::size_t i = 0; i < 3; ++i) {
      auto& b = dec_[i];
      h = skip_enabled_[2 - i] ? nn::concat_channels(h, skips[2 - i])
                               : nn::concat_channels(h, Tensor<T>(skips[2 - i].shape()));
      h = b.relu1.forward(b.bn.forward(b.up.forward(h), mode));
      h = b.relu2.forward(b.conv.forward(h));
      trace_.push_back({h.dim(1), h.dim(2)});
    }
    h = nn::concat_channels(h, stem_out);
    h = head_relu_.forward(head_bn_.forward(head_conv_.forward(h), mode));
    return out_conv_.forward(h);
  }

  /// Back-propagates d(loss)/d(logits); returns d(loss)/d(input).
  Tensor<T> backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = out_conv_.backward(grad_logits);
    g = head_conv_.backward(head_bn_.backward(head_relu_.backward(g)));
    auto [g_dec, g_stem] = nn::split_channels(g, cfg_.decoder[2]);
    g = std::move(g_dec);
    std::array<Tensor<T>, 3> g_skips;
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t i = 2 - k;
      auto& b = dec_[i];
      g = b.conv.backward(b.relu2.backward(g));
      g = b.up.backward(b.bn.backward(b.relu1.backward(g)));
      auto [g_prev, g_skip] = nn::split_channels(g, b.prev_channels);
      g = std::move(g_prev);
      if (!skip_enabled_[2 - i]) g_skip.fill(T{});
      g_skips[2 - i] = std::move(g_skip);
    }
    g = bridge1_.backward(bridge_relu1_.backward(bridge2_.backward(bridge_relu2_.backward(g))));
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t i = 2 - k;
      auto& b = enc_[i];
      nn::add_inplace(g, g_skips[i]);
      g = b.pool.backward(g);
      g = b.conv2.backward(b.bn2.backward(b.relu2.backward(g)));
      g = b.conv1.backward(b.bn1.backward(b.relu1.backward(g)));
    }
    nn::add_inplace(g, g_stem);
    return stem_.backward(stem_relu_.backward(g));
  }

  /// Sigmoid probabilities in infer mode, shape (N, H, W, 1).
  Tensor<T> predict(const Tensor<T>& x) {
    Tensor<T> z = forward(x, Mode::Infer);
    for (auto& v : z.values()) v = nn::sigmoid(v);
    return z;
  }

  /// Replaces the skip from encoder block `block` (0-based) with zeros.
  void set_skip_enabled(std::size_t block, bool enabled) { skip_enabled_.at(block) = enabled; }

  /// Spatial (H, W) after the stem, each encoder block and each decoder block.
  const std::vector<std::array<std::size_t, 2>>& shape_trace() const noexcept { return trace_; }

  std::vector<nn::Param<T>*> parameters() {
    std::vector<nn::Param<T>*> ps;
    auto conv = [&](nn::Conv2D<T>& c) {
      ps.push_back(&c.weight);
      ps.push_back(&c.bias);
    };
    auto bn = [&](nn::BatchNorm<T>& b) {
      ps.push_back(&b.gamma);
      ps.push_back(&b.beta);
    };
    conv(stem_);
    for (auto& b : enc_) {
      conv(b.conv1);
      bn(b.bn1);
      conv(b.conv2);
      bn(b.bn2);
    }
    conv(bridge1_);
    conv(bridge2_);
    for (auto& b : dec_) {
      ps.push_back(&b.up.weight);
      ps.push_back(&b.up.bias);
      bn(b.bn);
      conv(b.conv);
    }
    conv(head_conv_);
    bn(head_bn_);
    conv(out_conv_);
    return ps;
  }

  /// Batch-norm running statistics, in a fixed order.
  std::vector<Tensor<T>*> buffers() {
    std::vector<Tensor<T>*> bs;
    auto bn = [&](nn::BatchNorm<T>& b) {
      bs.push_back(&b.running_mean);
      bs.push_back(&b.running_var);
    };
    for (auto& b : enc_) {
      bn(b.bn1);
      bn(b.bn2);
    }
    for (auto& b : dec_) bn(b.bn);
    bn(head_bn_);
    return bs;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

 private:
  struct EncoderBlock {
    nn::Conv2D<T> conv1, conv2;
    nn::BatchNorm<T> bn1, bn2;
    nn::ReLU<T> relu1, relu2;
    nn::MaxPool2<T> pool;
  };
  struct DecoderBlock {
    nn::TransposeConv2<T> up;
    nn::BatchNorm<T> bn;
    nn::Conv2D<T> conv;
    nn::ReLU<T> relu1, relu2;
    std::size_t skip_channels = 0, prev_channels = 0;
  };

  ArchitectureConfig cfg_;
  nn::Conv2D<T> stem_;
  nn::ReLU<T> stem_relu_;
  std::array<EncoderBlock, 3> enc_;
  nn::Conv2D<T> bridge1_, bridge2_;
  nn::ReLU<T> bridge_relu1_, bridge_relu2_;
  std::array<DecoderBlock, 3> dec_;
  nn::Conv2D<T> head_conv_, out_conv_;
  nn::BatchNorm<T> head_bn_;
  nn::ReLU<T> head_relu_;
  std::array<bool, 3> skip_enabled_{true, true, true};
  std::size_t stem_out_channels_ = 0;
  std::vector<std::array<std::size_t, 2>> trace_;
};

}  // namespace topopt::unet
