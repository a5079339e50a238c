#pragma once

// Training data: random load conditions, nodal input tensors from a
// uniform-density FE solve, SIMP targets, 8:1:1 splits and the on-disk
// format.
//
// Dataset file (little-endian):
//   "TOPD" u32 version
//   u32 nelx, u32 nely, u32 channels, u32 count, u64 master_seed, u8 bc_kind
//   per sample:
//     f64 f, u8 load_count, load_count x (u32 node, u8 dir, f64 magnitude),
//     u32 simp_iterations, f64 simp_compliance,
//     f32 input[(nely+1) * (nelx+1) * channels]   (y, x, channel)
//     f32 target[nely * nelx]                     (y, x)
// `count` is the requested size; a file may hold fewer complete samples
// while generation is still running.
//
// Split file: "TOPS" u32 version, then train, validation and test as
// (u32 length, u32 indices[length]).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "topopt/binary_io.hpp"
#include "topopt/fem.hpp"
#include "topopt/nn/tensor.hpp"
#include "topopt/seed.hpp"
#include "topopt/simp.hpp"

namespace topopt::dataset {

using nn::Tensor;

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kSplitVersion = 1;
inline constexpr double kMinVolumeFraction = 0.2;
inline constexpr double kMaxVolumeFraction = 0.8;

/// Channel layout of the 6-channel input and the indices kept by the
/// 3-channel variant.
enum Channel : std::size_t { Ux = 0, Uy = 1, EpsX = 2, EpsY = 3, GammaXY = 4, VolumeFraction = 5 };
inline constexpr std::array<std::size_t, 3> kThreeChannelSubset{Ux, Uy, VolumeFraction};

struct Conditions {
  double volume_fraction = 0.5;
  LoadCase loads;
};

/// Perimeter nodes that carry no fixed DOF, in node-index order.
inline std::vector<int> loadable_nodes(const MeshSpec& mesh, const BoundaryCondition& bc) {
  std::vector<int> nodes;
  for (int c = 0; c <= mesh.nelx; ++c)
    for (int r = 0; r <= mesh.nely; ++r) {
      const bool perimeter = r == 0 || r == mesh.nely || c == 0 || c == mesh.nelx;
      const int n = mesh.node(r, c);
      if (perimeter && !bc.node_has_fixed_dof(n)) nodes.push_back(n);
    }
  return nodes;
}

/// f ~ U(0.2, 0.8), load count ~ U{1..10}, direction ~ U{X+, X-, Y+, Y-},
/// node uniform over loadable perimeter nodes; repeated (node, direction)
/// pairs are redrawn. Unit magnitudes.
inline Conditions sample_conditions(std::uint64_t seed, const MeshSpec& mesh, const BoundaryCondition& bc) {
  std::mt19937_64 rng(seed);
  const auto nodes = loadable_nodes(mesh, bc);
  if (nodes.empty()) throw ConfigError("no loadable boundary nodes");
  std::uniform_real_distribution<double> vf(kMinVolumeFraction, kMaxVolumeFraction);
  std::uniform_int_distribution<int> count(1, static_cast<int>(kMaxLoads));
  std::uniform_int_distribution<int> dir(0, 3);
  std::uniform_int_distribution<std::size_t> pick(0, nodes.size() - 1);

  Conditions out;
  out.volume_fraction = vf(rng);
  const int n = count(rng);
  std::set<std::pair<int, int>> used;
  while (static_cast<int>(out.loads.loads.size()) < n) {
    const int node = nodes[pick(rng)];
    const int d = dir(rng);
    if (!used.emplace(node, d).second) continue;
    out.loads.loads.push_back({node, static_cast<Direction>(d), 1.0});
  }
  return out;
}

/// Nodal input tensor (nely+1, nelx+1, channels) from a uniform-density
/// solve at the volume fraction. Channels: ux, uy, [eps_x, eps_y, gamma_xy,]
/// vf.
inline Tensor<double> build_input(FeSolver& solver, double f, const LoadCase& loads, std::size_t channels,
                                  double penalty = 3.0) {
  if (channels != 3 && channels != 6) throw ConfigError("input channels must be 3 or 6");
  const MeshSpec& mesh = solver.mesh();
  Eigen::VectorXd U = Eigen::VectorXd::Zero(mesh.num_dofs());
  if (!loads.loads.empty()) U = solver.solve(loads, uniform_density(mesh, f), penalty);
  const NodalFields nf = nodal_fields(mesh, U);
  const auto R = static_cast<std::size_t>(mesh.node_rows()), C = static_cast<std::size_t>(mesh.node_cols());
  Tensor<double> t({R, C, channels});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      double* px = t.data() + (r * C + c) * channels;
      px[0] = nf.ux(r, c);
      px[1] = nf.uy(r, c);
      if (channels == 6) {
        px[2] = nf.eps_x(r, c);
        px[3] = nf.eps_y(r, c);
        px[4] = nf.gamma_xy(r, c);
      }
      px[channels - 1] = f;
    }
  return t;
}

inline Tensor<double> build_input(const MeshSpec& mesh, const BoundaryCondition& bc, double f, const LoadCase& loads,
                                  std::size_t channels, double penalty = 3.0) {
  FeSolver solver(mesh, bc);
  return build_input(solver, f, loads, channels, penalty);
}

/// Keeps the listed channels of an (H, W, C) tensor, in the given order.
template <typename T, std::size_t K>
Tensor<T> select_channels(const Tensor<T>& t, const std::array<std::size_t, K>& keep) {
  if (t.rank() != 3) throw ShapeMismatch("select_channels expects (H, W, C)");
  const std::size_t P = t.dim(0) * t.dim(1), C = t.dim(2);
  Tensor<T> out({t.dim(0), t.dim(1), K});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k) out[p * K + k] = t[p * C + keep[k]];
  return out;
}

struct SampleMeta {
  double volume_fraction = 0.0;
  LoadCase loads;
  std::uint32_t simp_iterations = 0;
  double simp_compliance = 0.0;
};

struct Sample {
  SampleMeta meta;
  Tensor<float> input;   // (nely+1, nelx+1, channels)
  Tensor<float> target;  // (nely, nelx)
};

struct Header {
  std::uint32_t nelx = 80, nely = 40, channels = 6, count = 0;
  std::uint64_t master_seed = 0;
  SupportKind bc_kind = SupportKind::Cantilever;

  MeshSpec mesh() const { return {static_cast<int>(nelx), static_cast<int>(nely)}; }
  friend bool operator==(const Header&, const Header&) = default;
};

struct Dataset {
  Header header;
  std::vector<Sample> samples;
  bool complete() const { return samples.size() == header.count; }
};

struct Split {
  std::vector<std::uint32_t> train, validation, test;
  friend bool operator==(const Split&, const Split&) = default;
};

/// Shuffled 8:1:1 split of `count` indices.
inline Split make_split(std::size_t count, std::uint64_t seed) {
  std::vector<std::uint32_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0u);
  std::mt19937_64 rng(derive_seed(seed, "split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * 0.1));
  const auto n_test = n_val;
  const std::size_t n_train = count - n_val - n_test;
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                      idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

// ---- serialization -------------------------------------------------------

inline void write_header(io::Writer& w, const Header& h) {
  w.put_magic("TOPD");
  w.put(kDatasetVersion);
  w.put(h.nelx);
  w.put(h.nely);
  w.put(h.channels);
  w.put(h.count);
  w.put(h.master_seed);
  w.put(static_cast<std::uint8_t>(h.bc_kind));
}

inline Header read_header(io::Reader& r) {
  r.expect_magic("TOPD");
  if (const auto v = r.get<std::uint32_t>(); v != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(v));
  Header h;
  h.nelx = r.get<std::uint32_t>();
  h.nely = r.get<std::uint32_t>();
  h.channels = r.get<std::uint32_t>();
  h.count = r.get<std::uint32_t>();
  h.master_seed = r.get<std::uint64_t>();
  const auto kind = r.get<std::uint8_t>();
  if (kind > 3) throw IoError("bad boundary condition kind in dataset header");
  h.bc_kind = static_cast<SupportKind>(kind);
  if (h.nelx == 0 || h.nely == 0 || (h.channels != 3 && h.channels != 6)) throw IoError("bad dataset header");
  return h;
}

inline constexpr std::size_t kHeaderBytes = 4 + 4 + 4 * 4 + 8 + 1;

inline void write_sample(io::Writer& w, const Sample& s) {
  w.put(s.meta.volume_fraction);
  w.put(static_cast<std::uint8_t>(s.meta.loads.loads.size()));
  for (const auto& l : s.meta.loads.loads) {
    w.put(static_cast<std::uint32_t>(l.node));
    w.put(static_cast<std::uint8_t>(l.direction));
    w.put(l.magnitude);
  }
  w.put(s.meta.simp_iterations);
  w.put(s.meta.simp_compliance);
  w.put_array(s.input.values());
  w.put_array(s.target.values());
}

inline Sample read_sample(io::Reader& r, const Header& h) {
  Sample s;
  s.meta.volume_fraction = r.get<double>();
  const auto n = r.get<std::uint8_t>();
  if (n == 0 || n > kMaxLoads) throw IoError("bad load count in sample");
  for (int i = 0; i < n; ++i) {
    PointLoad l;
    l.node = static_cast<int>(r.get<std::uint32_t>());
    const auto d = r.get<std::uint8_t>();
    if (d > 3) throw IoError("bad load direction in sample");
    l.direction = static_cast<Direction>(d);
    l.magnitude = r.get<double>();
    s.meta.loads.loads.push_back(l);
  }
  s.meta.simp_iterations = r.get<std::uint32_t>();
  s.meta.simp_compliance = r.get<double>();
  s.input = Tensor<float>({h.nely + 1u, h.nelx + 1u, h.channels});
  r.get_array(s.input.values());
  s.target = Tensor<float>({h.nely, h.nelx});
  r.get_array(s.target.values());
  return s;
}

inline std::size_t sample_bytes(const Header& h, std::size_t loads) {
  return 8 + 1 + loads * (4 + 1 + 8) + 4 + 8 +
         4 * (static_cast<std::size_t>(h.nely + 1) * (h.nelx + 1) * h.channels + static_cast<std::size_t>(h.nely) * h.nelx);
}

/// Reads every complete sample; a truncated trailing sample is ignored.
/// `valid_bytes`, when given, receives the length of the well-formed prefix.
inline Dataset read_dataset(const std::filesystem::path& path, std::size_t* valid_bytes = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset " + path.string());
  io::Reader r(is);
  Dataset ds;
  ds.header = read_header(r);
  std::size_t offset = kHeaderBytes;
  while (ds.samples.size() < ds.header.count) {
    if (is.peek() == std::char_traits<char>::eof()) break;
    try {
      Sample s = read_sample(r, ds.header);
      offset += sample_bytes(ds.header, s.meta.loads.loads.size());
      ds.samples.push_back(std::move(s));
    } catch (const IoError&) {
      break;
    }
  }
  if (valid_bytes) *valid_bytes = offset;
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write dataset " + path.string());
  io::Writer w(os);
  write_header(w, ds.header);
  for (const auto& s : ds.samples) write_sample(w, s);
}

inline void write_split(const std::filesystem::path& path, const Split& s) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write split " + path.string());
  io::Writer w(os);
  w.put_magic("TOPS");
  w.put(kSplitVersion);
  for (const auto* part : {&s.train, &s.validation, &s.test}) {
    w.put(static_cast<std::uint32_t>(part->size()));
    w.put_array(std::span<const std::uint32_t>(*part));
  }
}

inline Split read_split(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open split " + path.string());
  io::Reader r(is);
  r.expect_magic("TOPS");
  if (r.get<std::uint32_t>() != kSplitVersion) throw IoError("unsupported split version");
  Split s;
  for (auto* part : {&s.train, &s.validation, &s.test}) {
    part->resize(r.get<std::uint32_t>());
    r.get_array(std::span<std::uint32_t>(*part));
  }
  return s;
}

// ---- generation ----------------------------------------------------------

struct GenerateOptions {
  std::size_t count = 1000;
  MeshSpec mesh{};
  SupportKind bc = SupportKind::Cantilever;
  std::uint64_t seed = 0;
  std::size_t channels = 6;
  unsigned threads = 1;
  SimpConfig simp{};
  /// Called in index order after each sample is written.
  std::function<void(std::size_t index, const Sample&)> on_sample;
  /// Called when a draw fails and is replaced.
  std::function<void(std::size_t index, int attempt, const std::string& why)> on_redraw;
};

/// One sample from a given conditions seed.
inline Sample make_sample(FeSolver& solver, std::uint64_t seed, std::size_t channels, const SimpConfig& base) {
  const Conditions cond = sample_conditions(seed, solver.mesh(), solver.bc());
  SimpConfig cfg = base;
  cfg.volume_fraction = cond.volume_fraction;
  const SimpResult res = optimize(solver.mesh(), solver.bc(), cond.loads, cfg, solver.material());
  const Tensor<double> in = build_input(solver, cond.volume_fraction, cond.loads, channels, cfg.penalty);
  Sample s;
  s.meta = {cond.volume_fraction, cond.loads, static_cast<std::uint32_t>(res.iterations), res.compliance};
  s.input = in.cast<float>();
  s.target = Tensor<float>({res.density.rows(), res.density.cols()},
                           std::vector<float>(res.density.values().begin(), res.density.values().end()));
  return s;
}

/// Seed of sample `index` on its `attempt`-th draw.
inline std::uint64_t sample_seed(std::uint64_t master, std::size_t index, int attempt) {
  return derive_seed(derive_seed(master, "dataset", index), "attempt", static_cast<std::uint64_t>(attempt));
}

/// Sample `index` with redraws on numeric failure.
inline Sample generate_one(FeSolver& solver, const GenerateOptions& opt, std::size_t index, std::mutex* log_mutex) {
  for (int attempt = 0;; ++attempt) {
    try {
      return make_sample(solver, sample_seed(opt.seed, index, attempt), opt.channels, opt.simp);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric || attempt >= 100) throw;
      if (opt.on_redraw) {
        std::unique_lock lock(*log_mutex);
        opt.on_redraw(index, attempt, e.what());
      }
    }
  }
}

/// Generates (or resumes) a dataset file and writes its split file next to
/// it. Output is byte-identical for any thread count.
inline Split generate(const std::filesystem::path& path, const std::filesystem::path& split_path,
                      const GenerateOptions& opt) {
  if (opt.count < 10) throw ConfigError("dataset needs at least 10 samples");
  if (opt.channels != 3 && opt.channels != 6) throw ConfigError("channels must be 3 or 6");
  opt.mesh.validate();
  opt.simp.validate();
  const BoundaryCondition bc = BoundaryCondition::make(opt.bc, opt.mesh);
  Header header{static_cast<std::uint32_t>(opt.mesh.nelx), static_cast<std::uint32_t>(opt.mesh.nely),
                static_cast<std::uint32_t>(opt.channels), static_cast<std::uint32_t>(opt.count), opt.seed, opt.bc};

  std::size_t start = 0;
  if (std::filesystem::exists(path)) {
    std::size_t valid = 0;
    Dataset existing;
    bool usable = true;
    try {
      existing = read_dataset(path, &valid);
    } catch (const IoError&) {
      usable = false;
    }
    if (usable && existing.header == header) {
      start = existing.samples.size();
      std::filesystem::resize_file(path, valid);
    } else {
      std::filesystem::remove(path);
    }
  }
  if (start == 0) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write dataset " + path.string());
    io::Writer w(os);
    write_header(w, header);
  }

  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw IoError("cannot append to dataset " + path.string());
  io::Writer w(os);
  std::mutex log_mutex;
  auto emit = [&](std::size_t i, const Sample& s) {
    write_sample(w, s);
    os.flush();
    if (opt.on_sample) opt.on_sample(i, s);
  };

  const unsigned threads = std::max(1u, opt.threads);
  if (threads == 1) {
    FeSolver solver(opt.mesh, bc);
    for (std::size_t i = start; i < opt.count; ++i) emit(i, generate_one(solver, opt, i, &log_mutex));
  } else {
    std::mutex mu;
    std::condition_variable cv;
    std::map<std::size_t, Sample> ready;
    std::atomic<std::size_t> next{start};
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        try {
          FeSolver solver(opt.mesh, bc);
          for (std::size_t i = next++; i < opt.count; i = next++) {
            Sample s = generate_one(solver, opt, i, &log_mutex);
            std::unique_lock lock(mu);
            ready.emplace(i, std::move(s));
            cv.notify_all();
          }
        } catch (...) {
          std::unique_lock lock(mu);
          if (!failure) failure = std::current_exception();
          cv.notify_all();
        }
      });
    for (std::size_t i = start; i < opt.count; ++i) {
      std::unique_lock lock(mu);
      cv.wait(lock, [&] { return ready.count(i) || failure; });
      if (!ready.count(i)) break;
      Sample s = std::move(ready[i]);
      ready.erase(i);
      lock.unlock();
      emit(i, s);
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  os.close();

  const Split split = make_split(opt.count, opt.seed);
  write_split(split_path, split);
  return split;
}

}  // namespace topopt::dataset
