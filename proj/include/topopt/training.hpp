#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string_view>
#include <string>
#include <vector>

#include "topopt/binary_io.hpp"
#include "topopt/grid.hpp"
#include "topopt/seed.hpp"
#include "topopt/unet.hpp"

namespace topopt::unet {

/// One network input/target pair: input (H+1, W+1, C), target (H, W, 1).
template <typename T>
struct Example {
  Tensor<T> input;
  Tensor<T> target;
};

struct EpochRecord {
  std::uint32_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean KL over training batches, train-mode batch norm
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double learning_rate = 0.0;
};

/// Optional per-channel affine map x' = (x - mean) / scale applied to
/// network inputs, fitted on the training split. Empty means raw inputs.
struct InputNormalization {
  std::vector<double> mean, scale;

  bool empty() const noexcept { return mean.empty(); }

  /// Applies in place to a tensor whose last dimension is the channel.
  template <typename T>
  void apply(Tensor<T>& x) const {
    if (empty()) return;
    const std::size_t C = mean.size();
    if (x.shape().back() != C) throw ShapeMismatch("normalization channel count");
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<T>((static_cast<double>(x[i]) - mean[i % C]) / scale[i % C]);
  }
};

template <typename T>
struct TrainState {
  UNet<T> model;
  nn::OptimizerConfig optimizer;
  nn::PlateauScheduler scheduler;
  std::int64_t step = 0;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> history;
  InputNormalization normalization;

  TrainState(ArchitectureConfig arch, nn::OptimizerConfig opt, std::uint64_t seed_)
      : model(arch), optimizer(opt), scheduler(opt.learning_rate, opt.patience, opt.decay), seed(seed_) {
    opt.validate();
    std::mt19937_64 rng(topopt::derive_seed(seed_, "init"));
    model.initialize(rng);
  }

};

template <typename T>
Tensor<T> stack_inputs(const std::vector<Example<T>>& data, std::span<const std::size_t> idx) {
  const auto& s = data.at(idx[0]).input.shape();
  Tensor<T> out({idx.size(), s[0], s[1], s[2]});
  const std::size_t per = data[idx[0]].input.size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& in = data.at(idx[b]).input;
    if (in.shape() != s) throw ShapeMismatch("inconsistent example input shapes");
    std::copy_n(in.data(), per, out.data() + b * per);
  }
  return out;
}

template <typename T>
Tensor<T> stack_targets(const std::vector<Example<T>>& data, std::span<const std::size_t> idx) {
  const auto& s = data.at(idx[0]).target.shape();
  Tensor<T> out({idx.size(), s[0], s[1], 1});
  const std::size_t per = data[idx[0]].target.size();
  for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(data.at(idx[b]).target.data(), per, out.data() + b * per);
  return out;
}

/// Per-channel mean and standard deviation of the inputs in `idx`.
/// Constant channels keep scale 1.
template <typename T>
InputNormalization fit_normalization(const std::vector<Example<T>>& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ConfigError("normalization needs samples");
  const std::size_t C = data.at(idx[0]).input.shape().back();
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::size_t n = 0;
  for (std::size_t i : idx) {
    const auto& x = data.at(i).input;
    for (std::size_t k = 0; k < x.size(); ++k) sum[k % C] += static_cast<double>(x[k]);
    n += x.size() / C;
  }
  InputNormalization out{std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) out.mean[c] = sum[c] / static_cast<double>(n);
  for (std::size_t i : idx) {
    const auto& x = data.at(i).input;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = static_cast<double>(x[k]) - out.mean[k % C];
      sq[k % C] += d * d;
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(sq[c] / static_cast<double>(n));
    out.scale[c] = sd > 0.0 ? sd : 1.0;
  }
  return out;
}

/// Splits a list of indices into mini-batches of `batch` elements. A
/// trailing batch of one is merged into its predecessor so that train-mode
/// batch norm always sees at least two samples.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

/// Mean KL of the model over `idx` in infer mode.
template <typename T>
double evaluate_loss(UNet<T>& model, const std::vector<Example<T>>& data, const std::vector<std::size_t>& idx,
                     std::size_t batch = 32) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& b : make_batches(idx, batch)) {
    const auto x = stack_inputs(data, std::span<const std::size_t>(b));
    const auto p = stack_targets(data, std::span<const std::size_t>(b));
    total += nn::kl_with_logits(p, model.forward(x, Mode::Infer)).value * static_cast<double>(b.size());
  }
  return total / static_cast<double>(idx.size());
}

struct TrainOptions {
  std::uint32_t epochs = 50;  // total epoch count; training resumes from state.epoch
  std::size_t batch_size = 32;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called after an epoch that improved the best validation loss.
  std::function<void()> on_best;
};

/// Mini-batch training of KL + L2 with Adam (or SGD) and plateau decay.
template <typename T>
void train(TrainState<T>& st, const std::vector<Example<T>>& data, const std::vector<std::size_t>& train_idx,
           const std::vector<std::size_t>& val_idx, const TrainOptions& opts) {
  if (train_idx.size() < 2) throw ConfigError("training split needs at least two samples");
  st.optimizer.validate();
  for (std::size_t i : train_idx)
    if (data.at(i).input.dim(2) != st.model.config().in_channels)
      throw ConfigError("dataset channels do not match the model");
  auto params = st.model.parameters();

  while (st.epoch < opts.epochs) {
    const std::uint32_t epoch = st.epoch + 1;
    std::vector<std::size_t> order = train_idx;
    std::mt19937_64 rng(topopt::derive_seed(st.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double sum = 0.0;
    std::size_t seen = 0, batch_no = 0;
    const double lr = st.scheduler.learning_rate();
    for (const auto& b : make_batches(order, opts.batch_size)) {
      ++batch_no;
      const auto x = stack_inputs(data, std::span<const std::size_t>(b));
      const auto p = stack_targets(data, std::span<const std::size_t>(b));
      st.model.zero_grad();
      const Tensor<T> z = st.model.forward(x, Mode::Train);
      auto loss = nn::kl_with_logits(p, z);
      st.model.backward(loss.grad);
      nn::l2_penalty(params, st.optimizer.l2, true);

      double max_grad = 0.0;
      for (auto* prm : params)
        for (T g : prm->grad.values()) max_grad = std::max(max_grad, std::abs(static_cast<double>(g)));
      if (!std::isfinite(loss.value) || !std::isfinite(max_grad)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", batch " << batch_no << ", max |grad| " << max_grad;
        throw NonFinite(msg.str());
      }

      ++st.step;
      for (auto* prm : params) {
        if (st.optimizer.algorithm == nn::Algorithm::Adam)
          nn::adam_step(*prm, st.optimizer, lr, st.step);
        else
          nn::sgd_step(*prm, lr);
      }
      sum += loss.value * static_cast<double>(b.size());
      seen += b.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = sum / static_cast<double>(seen);
    rec.learning_rate = lr;
    bool improved = false;
    if (!val_idx.empty()) {
      rec.val_loss = evaluate_loss(st.model, data, val_idx, opts.batch_size);
      improved = rec.val_loss < st.scheduler.best();
      st.scheduler.observe(rec.val_loss);
    }
    st.history.push_back(rec);
    st.epoch = epoch;
    if (improved && opts.on_best) opts.on_best();
    if (opts.on_epoch) opts.on_epoch(rec);
  }
}

/// Infer-mode probabilities for one input tensor (H+1, W+1, C) -> (H, W).
template <typename T>
Grid<double> predict(UNet<T>& model, const Tensor<T>& input) {
  if (input.rank() != 3) throw ShapeMismatch("predict expects an (H+1, W+1, C) tensor");
  Tensor<T> x = input;
  x.reshape({1, input.dim(0), input.dim(1), input.dim(2)});
  const Tensor<T> q = model.predict(x);
  Grid<double> out(q.dim(1), q.dim(2));
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = static_cast<double>(q[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "TOPC", version, architecture block, scalar width, then
// parameters and batch-norm buffers with shape headers, optimizer state,
// scheduler state, training progress and the input normalization
// (u32 channel count, 0 when unused, then means and scales as f64).

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_tensor(io::Writer& w, const Tensor<T>& t) {
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
  w.put_array(t.values());
}

template <typename T>
void read_tensor_into(io::Reader& r, Tensor<T>& t, const std::string& what) {
  const auto rank = r.get<std::uint32_t>();
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.get<std::uint32_t>();
  if (shape != t.shape())
    throw IoError("checkpoint tensor " + what + " has shape " + nn::shape_string(shape) + ", model expects " +
                  nn::shape_string(t.shape()));
  r.get_array(t.values());
}

inline void write_arch(io::Writer& w, const ArchitectureConfig& a) {
  w.put(a.in_channels);
  w.put(a.stem_kernel);
  w.put(a.stem_width);
  w.put(a.conv_kernel);
  for (auto v : a.encoder) w.put(v);
  w.put(a.bridge);
  for (auto v : a.decoder) w.put(v);
  w.put(a.head);
  w.put(a.bn_momentum);
  w.put(a.bn_eps);
}

inline ArchitectureConfig read_arch(io::Reader& r) {
  ArchitectureConfig a;
  a.in_channels = r.get<std::uint32_t>();
  a.stem_kernel = r.get<std::uint32_t>();
  a.stem_width = r.get<std::uint32_t>();
  a.conv_kernel = r.get<std::uint32_t>();
  for (auto& v : a.encoder) v = r.get<std::uint32_t>();
  a.bridge = r.get<std::uint32_t>();
  for (auto& v : a.decoder) v = r.get<std::uint32_t>();
  a.head = r.get<std::uint32_t>();
  a.bn_momentum = r.get<double>();
  a.bn_eps = r.get<double>();
  return a;
}

}  // namespace detail

template <typename T>
void save_checkpoint(TrainState<T>& st, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    io::Writer w(os);
    w.put_magic("TOPC");
    w.put(kCheckpointVersion);
    detail::write_arch(w, st.model.config());
    w.put(static_cast<std::uint8_t>(sizeof(T)));
    auto params = st.model.parameters();
    w.put(static_cast<std::uint32_t>(params.size()));
    for (auto* p : params) {
      w.put_string(p->name);
      detail::write_tensor(w, p->value);
    }
    auto bufs = st.model.buffers();
    w.put(static_cast<std::uint32_t>(bufs.size()));
    for (auto* b : bufs) detail::write_tensor(w, *b);
    // optimizer
    const auto& o = st.optimizer;
    w.put(static_cast<std::uint8_t>(o.algorithm));
    w.put(o.learning_rate);
    w.put(o.beta1);
    w.put(o.beta2);
    w.put(o.epsilon);
    w.put(o.l2);
    w.put(static_cast<std::int32_t>(o.patience));
    w.put(o.decay);
    w.put(st.step);
    for (auto* p : params) {
      w.put_array(p->m.values());
      w.put_array(p->v.values());
    }
    // scheduler
    w.put(st.scheduler.best());
    w.put(static_cast<std::int32_t>(st.scheduler.epochs_since_best()));
    w.put(st.scheduler.learning_rate());
    // progress
    w.put(st.epoch);
    w.put(st.seed);
    w.put(static_cast<std::uint32_t>(st.history.size()));
    for (const auto& h : st.history) {
      w.put(h.epoch);
      w.put(h.train_loss);
      w.put(h.val_loss);
      w.put(h.learning_rate);
    }
    const auto& nrm = st.normalization;
    w.put(static_cast<std::uint32_t>(nrm.mean.size()));
    w.put_array(std::span<const double>(nrm.mean));
    w.put_array(std::span<const double>(nrm.scale));
    if (!os.flush()) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  io::Reader r(is);
  r.expect_magic("TOPC");
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(v));
  const ArchitectureConfig arch = detail::read_arch(r);
  if (r.get<std::uint8_t>() != sizeof(T)) throw IoError("checkpoint scalar width differs from the requested type");
  TrainState<T> st(arch, nn::OptimizerConfig{}, 0);
  auto params = st.model.parameters();
  if (r.get<std::uint32_t>() != params.size()) throw IoError("checkpoint parameter count mismatch");
  for (auto* p : params) {
    const std::string name = r.get_string();
    if (name != p->name) throw IoError("checkpoint parameter " + name + " where " + p->name + " expected");
    detail::read_tensor_into(r, p->value, name);
  }
  auto bufs = st.model.buffers();
  if (r.get<std::uint32_t>() != bufs.size()) throw IoError("checkpoint buffer count mismatch");
  for (auto* b : bufs) detail::read_tensor_into(r, *b, "buffer");
  auto& o = st.optimizer;
  o.algorithm = static_cast<nn::Algorithm>(r.get<std::uint8_t>());
  o.learning_rate = r.get<double>();
  o.beta1 = r.get<double>();
  o.beta2 = r.get<double>();
  o.epsilon = r.get<double>();
  o.l2 = r.get<double>();
  o.patience = r.get<std::int32_t>();
  o.decay = r.get<double>();
  st.step = r.get<std::int64_t>();
  for (auto* p : params) {
    r.get_array(p->m.values());
    r.get_array(p->v.values());
  }
  const double best = r.get<double>();
  const int since = r.get<std::int32_t>();
  const double lr = r.get<double>();
  st.scheduler = nn::PlateauScheduler(o.learning_rate, o.patience, o.decay);
  st.scheduler.restore(lr, best, since);
  st.epoch = r.get<std::uint32_t>();
  st.seed = r.get<std::uint64_t>();
  st.history.resize(r.get<std::uint32_t>());
  for (auto& h : st.history) {
    h.epoch = r.get<std::uint32_t>();
    h.train_loss = r.get<double>();
    h.val_loss = r.get<double>();
    h.learning_rate = r.get<double>();
  }
  const auto nc = r.get<std::uint32_t>();
  if (nc != 0 && nc != arch.in_channels) throw IoError("checkpoint normalization channel count");
  st.normalization.mean.resize(nc);
  st.normalization.scale.resize(nc);
  r.get_array(std::span<double>(st.normalization.mean));
  r.get_array(std::span<double>(st.normalization.scale));
  return st;
}

}  // namespace topopt::unet
