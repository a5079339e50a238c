// topopt: dataset generation, training, prediction, evaluation and
// sample-count sweeps for the U-Net topology predictor.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
// 3 numeric failure, 4 I/O failure.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "topopt/topopt.hpp"

namespace fs = std::filesystem;
using namespace topopt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path default_out_dir() {
  const char* env = std::getenv("TOPOPT_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

struct Common {
  fs::path out_dir = default_out_dir();
  std::uint64_t seed = 0;
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
};

fs::path resolve(const Common& c, const std::string& given, const std::string& fallback) {
  return given.empty() ? c.out_dir / fallback : fs::path(given);
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

void prepare_output(const fs::path& p) {
  const auto dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

fs::path split_path_for(const fs::path& data) { return fs::path(data.string() + ".split"); }

void write_density(const fs::path& path, const Grid<double>& g) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(9);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) os << g(r, c) << (c + 1 == g.cols() ? '\n' : ',');
  if (!os) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  std::size_t count = 1000;
  std::string bc = "cantilever";
  std::size_t channels = 6;
  int nelx = 80, nely = 40;
  std::string out;
  bool quiet = false;
};

int cmd_gen(const Common& c, const GenArgs& a) {
  dataset::GenerateOptions opt;
  opt.count = a.count;
  opt.mesh = {a.nelx, a.nely};
  opt.bc = parse_support_kind(a.bc);
  opt.seed = c.seed;
  opt.channels = a.channels;
  opt.threads = c.threads;
  const fs::path path = resolve(c, a.out, "dataset.topd");
  prepare_output(path);

  std::size_t done = 0;
  std::uint64_t iter_sum = 0;
  std::uint32_t iter_min = ~0u, iter_max = 0;
  const auto t0 = Clock::now();
  opt.on_sample = [&](std::size_t i, const dataset::Sample& s) {
    ++done;
    iter_sum += s.meta.simp_iterations;
    iter_min = std::min(iter_min, s.meta.simp_iterations);
    iter_max = std::max(iter_max, s.meta.simp_iterations);
    if (!a.quiet)
      std::cout << "sample " << i + 1 << '/' << a.count << "  f=" << std::setprecision(4) << s.meta.volume_fraction
                << "  loads=" << s.meta.loads.loads.size() << "  simp_iterations=" << s.meta.simp_iterations
                << "  compliance=" << std::setprecision(6) << s.meta.simp_compliance << '\n';
  };
  opt.on_redraw = [&](std::size_t i, int attempt, const std::string& why) {
    std::cerr << "sample " << i + 1 << ": redraw " << attempt + 1 << " (" << why << ")\n";
  };
  const auto split = dataset::generate(path, split_path_for(path), opt);
  const double secs = seconds_since(t0);

  const auto ds = dataset::read_dataset(path);
  if (!ds.complete() || ds.samples.size() != a.count) throw IoError("round-trip check failed for " + path.string());
  std::cout << "wrote " << path.string() << " (" << a.count << " samples, " << a.channels << " channels, "
            << to_string(opt.bc) << ")\n"
            << "split train/validation/test = " << split.train.size() << '/' << split.validation.size() << '/'
            << split.test.size() << '\n';
  if (done)
    std::cout << "simp iterations mean " << static_cast<double>(iter_sum) / static_cast<double>(done) << ", min "
              << iter_min << ", max " << iter_max << "; " << done << " generated in " << secs << " s\n";
  std::cout << "round-trip validated " << ds.samples.size() << " samples\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, checkpoint, best, log;
  std::uint32_t epochs = 50;
  std::size_t batch = 32;
  std::size_t count = 0;  // 0: whole dataset
  std::size_t channels = 0;  // 0: as stored
  std::string optimizer = "adam";
  double lr = 1e-3, l2 = 1e-5, decay = 0.1;
  int patience = 10;
  bool normalize = false, fresh = false;
};

struct Selection {
  std::vector<std::size_t> train, val, test;
};

// First `count` samples. Below 10 samples everything trains (memorization
// runs); the full set uses the stored split, a subset gets a fresh one.
Selection select(const fs::path& data, std::size_t total, std::size_t count, std::uint64_t seed) {
  Selection s;
  if (count < 10) {
    s.train.resize(count);
    std::iota(s.train.begin(), s.train.end(), 0);
    return s;
  }
  const auto split = count == total && fs::exists(split_path_for(data)) ? dataset::read_split(split_path_for(data))
                                                                         : dataset::make_split(count, derive_seed(seed, "split"));
  return {as_indices(split.train), as_indices(split.validation), as_indices(split.test)};
}

void write_log(const fs::path& path, const std::vector<unet::EpochRecord>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "epoch,train_loss,val_loss,learning_rate\n" << std::setprecision(9);
  for (const auto& h : history) {
    os << h.epoch << ',' << h.train_loss << ',';
    if (std::isfinite(h.val_loss)) os << h.val_loss;
    os << ',' << h.learning_rate << '\n';
  }
}

int cmd_train(const Common& c, const TrainArgs& a) {
  const fs::path data = resolve(c, a.data, "dataset.topd");
  const fs::path ckpt = resolve(c, a.checkpoint, "model.topc");
  const fs::path best = resolve(c, a.best, "model_best.topc");
  const fs::path log = resolve(c, a.log, "train_log.csv");
  require_file(data, "dataset");
  for (const auto& p : {ckpt, best, log}) prepare_output(p);

  nn::OptimizerConfig oc;
  if (a.optimizer == "sgd")
    oc.algorithm = nn::Algorithm::SGD;
  else if (a.optimizer != "adam")
    throw ConfigError("optimizer must be adam or sgd");
  oc.learning_rate = a.lr;
  oc.l2 = a.l2;
  oc.patience = a.patience;
  oc.decay = a.decay;
  oc.validate();
  if (a.batch == 0) throw ConfigError("batch size must be positive");

  const auto ds = dataset::read_dataset(data);
  if (!ds.complete()) throw IoError("dataset is incomplete; rerun gen to finish it: " + data.string());
  const std::size_t count = a.count ? a.count : ds.samples.size();
  if (count > ds.samples.size()) throw ConfigError("--count exceeds the dataset size");
  const std::size_t channels = a.channels ? a.channels : ds.header.channels;
  const Selection sel = select(data, ds.samples.size(), count, c.seed);

  std::vector<unet::Example<float>> examples;
  examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) examples.push_back(to_example<float>(ds.samples[i], channels));

  const bool resume = !a.fresh && fs::exists(ckpt);
  unet::ArchitectureConfig arch;
  arch.in_channels = channels;
  unet::TrainState<float> st = resume ? unet::load_checkpoint<float>(ckpt) : unet::TrainState<float>(arch, oc, c.seed);
  if (resume) {
    if (st.model.config().in_channels != channels) throw ConfigError("checkpoint channels differ from --channels");
    std::cout << "resuming " << ckpt.string() << " at epoch " << st.epoch << '\n';
  } else if (a.normalize) {
    st.normalization = unet::fit_normalization(examples, sel.train);
  }
  normalize(examples, st.normalization);

  std::cout << "training on " << sel.train.size() << " samples, validating on " << sel.val.size() << ", " << channels
            << " channels, " << st.model.parameter_count() << " parameters\n";
  unet::TrainOptions to;
  to.epochs = a.epochs;
  to.batch_size = a.batch;
  auto t_epoch = Clock::now();
  to.on_best = [&] { unet::save_checkpoint(st, best); };
  to.on_epoch = [&](const unet::EpochRecord& r) {
    unet::save_checkpoint(st, ckpt);
    write_log(log, st.history);
    std::cout << "epoch " << r.epoch << "  train_loss " << std::setprecision(6) << r.train_loss;
    if (std::isfinite(r.val_loss)) std::cout << "  val_loss " << r.val_loss;
    std::cout << "  lr " << r.learning_rate << "  (" << std::setprecision(3) << seconds_since(t_epoch) << " s)\n";
    t_epoch = Clock::now();
  };
  unet::train(st, examples, sel.train, sel.val, to);
  if (sel.val.empty()) unet::save_checkpoint(st, best);
  unet::save_checkpoint(st, ckpt);
  write_log(log, st.history);
  if (!st.history.empty())
    std::cout << "final train_loss " << st.history.back().train_loss << "; checkpoint " << ckpt.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string checkpoint, data, out, pgm, bc = "cantilever";
  long index = -1;
  bool compare = false;
};

int cmd_predict(const Common& c, const PredictArgs& a) {
  const fs::path ckpt = resolve(c, a.checkpoint, "model_best.topc");
  const fs::path out = resolve(c, a.out, "prediction.csv");
  const fs::path pgm = resolve(c, a.pgm, "prediction.pgm");
  require_file(ckpt, "checkpoint");
  if (a.index >= 0) require_file(resolve(c, a.data, "dataset.topd"), "dataset");
  prepare_output(out);
  prepare_output(pgm);

  auto st = unet::load_checkpoint<float>(ckpt);
  const std::size_t channels = st.model.config().in_channels;

  // Problem: a stored sample, or fresh conditions drawn from --seed.
  MeshSpec mesh{};
  SupportKind kind = parse_support_kind(a.bc);
  double f = 0.0;
  LoadCase loads;
  std::optional<Grid<double>> stored_target;
  if (a.index >= 0) {
    const auto ds = dataset::read_dataset(resolve(c, a.data, "dataset.topd"));
    if (static_cast<std::size_t>(a.index) >= ds.samples.size()) throw ConfigError("--index out of range");
    mesh = ds.header.mesh();
    kind = ds.header.bc_kind;
    const auto p = to_problem(ds.samples[static_cast<std::size_t>(a.index)], static_cast<std::size_t>(a.index), 6);
    f = p.volume_fraction;
    loads = p.loads;
    stored_target = p.target;
  } else {
    const auto cond = dataset::sample_conditions(derive_seed(c.seed, "predict"), mesh, BoundaryCondition::make(kind, mesh));
    f = cond.volume_fraction;
    loads = cond.loads;
  }
  const auto bc = BoundaryCondition::make(kind, mesh);

  const auto t_in = Clock::now();
  FeSolver solver(mesh, bc);
  nn::Tensor<float> input = dataset::build_input(solver, f, loads, channels).cast<float>();
  const double input_seconds = seconds_since(t_in);
  nn::Tensor<float> x = input;
  st.normalization.apply(x);
  unet::predict(st.model, x);  // warm-up
  const auto t_net = Clock::now();
  const Grid<double> pred = unet::predict(st.model, x);
  const double predict_seconds = seconds_since(t_net);

  write_density(out, pred);
  eval::write_pgm(pgm, pred);
  std::cout << "problem: " << to_string(kind) << ", f=" << std::setprecision(6) << f << ", " << loads.loads.size()
            << " loads\n"
            << "prediction written to " << out.string() << " and " << pgm.string() << " (" << pred.cols() << "x"
            << pred.rows() << ")\n"
            << "predict_seconds " << predict_seconds << "\n"
            << "input_seconds " << input_seconds << "\n";

  if (a.compare) {
    SimpConfig cfg;
    cfg.volume_fraction = f;
    const auto t_simp = Clock::now();
    const SimpResult res = optimize(mesh, bc, loads, cfg);
    const double simp_seconds = seconds_since(t_simp);
    const Grid<double>& target = res.density;
    eval::write_pgm(fs::path(pgm).replace_filename(pgm.stem().string() + "_simp.pgm"), target);
    const auto pm = eval::pixel_metrics(pred, target);
    const auto ce = eval::compliance_error(pred, target, mesh, bc, loads, cfg.penalty);
    std::cout << "simp_seconds " << simp_seconds << " (" << res.iterations << " iterations)\n"
              << "speedup " << simp_seconds / predict_seconds << "x (network only), "
              << simp_seconds / (predict_seconds + input_seconds) << "x (including the input solve)\n"
              << "pixel_values_error " << pm.pixel_values_error << "\n"
              << "pixel_accuracy " << pm.pixel_accuracy << "\n"
              << "volume_fraction_error " << eval::volume_fraction_error(pred, target) << "\n"
              << "compliance_error ";
    if (ce)
      std::cout << *ce << "\n";
    else
      std::cout << "n/a (structural disconnection)\n";
    std::cout << "disconnected " << (ce ? 0 : 1) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, csv, bc = "cantilever", subset = "test";
  std::size_t count = 100;
};

std::vector<eval::Problem> problems_from(const dataset::Dataset& ds, const std::vector<std::size_t>& idx,
                                         std::size_t channels) {
  std::vector<eval::Problem> out;
  for (std::size_t i : idx) out.push_back(to_problem(ds.samples.at(i), i, channels));
  return out;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  const fs::path ckpt = resolve(c, a.checkpoint, "model_best.topc");
  require_file(ckpt, "checkpoint");
  const SupportKind kind = parse_support_kind(a.bc);
  if (!a.data.empty()) require_file(a.data, "dataset");
  if (a.subset != "test" && a.subset != "validation" && a.subset != "all") throw ConfigError("--subset must be test, validation or all");
  const fs::path csv_path = resolve(c, a.csv, std::string("eval_") + to_string(kind) + ".csv");
  prepare_output(csv_path);

  auto st = unet::load_checkpoint<float>(ckpt);
  const std::size_t channels = st.model.config().in_channels;

  // A dataset file, or fresh problems generated (and cached) for --bc.
  fs::path data = a.data;
  if (data.empty()) {
    data = c.out_dir / ("problems_" + std::string(to_string(kind)) + "_" + std::to_string(a.count) + "_" +
                        std::to_string(c.seed) + ".topd");
    dataset::GenerateOptions opt;
    opt.count = a.count;
    opt.bc = kind;
    opt.seed = derive_seed(c.seed, "eval");
    opt.threads = c.threads;
    std::cout << "generating " << a.count << " " << to_string(kind) << " problems into " << data.string() << '\n';
    dataset::generate(data, split_path_for(data), opt);
  }
  const auto ds = dataset::read_dataset(data);
  if (!ds.complete()) throw IoError("dataset is incomplete: " + data.string());
  std::vector<std::size_t> idx;
  if (!a.data.empty() && a.subset != "all") {
    const auto split = dataset::read_split(split_path_for(data));
    idx = as_indices(a.subset == "test" ? split.test : split.validation);
  } else {
    idx.resize(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  const MeshSpec mesh = ds.header.mesh();
  const auto bc = BoundaryCondition::make(ds.header.bc_kind, mesh);
  const auto problems = problems_from(ds, idx, channels);

  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  const auto rep = eval::evaluate_set(make_predictor(st.model, st.normalization), problems, mesh, bc, 3.0, &csv);

  const auto predict = make_predictor(st.model, st.normalization);
  double cont = 0.0;
  for (const auto& p : problems) cont += eval::compliance_error_continuous(predict(p.input), p.target, mesh, bc, p.loads);
  std::ostringstream table;
  eval::write_summary_table(table, to_string(ds.header.bc_kind), rep.summary);
  table << "continuous compliance error (all samples, signed) "
        << eval::percent(problems.empty() ? 0.0 : cont / static_cast<double>(problems.size())) << '\n';
  std::cout << table.str();
  const fs::path summary = fs::path(csv_path).replace_extension(".summary.txt");
  std::ofstream(summary, std::ios::trunc) << table.str();
  std::cout << "metrics written to " << csv_path.string() << " (" << rep.records.size() << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  std::string data, out, counts = "100,250,500,1000";
  int replicates = 3;
  std::uint32_t epochs = 50;
  std::size_t batch = 32;
  bool normalize = false;
};

std::vector<std::size_t> parse_counts(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(tok, &pos);
      if (pos != tok.size() || v < 10) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("counts must be integers >= 10, got '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("no counts given");
  return out;
}

int cmd_sweep(const Common& c, const SweepArgs& a) {
  const fs::path data = resolve(c, a.data, "dataset.topd");
  const fs::path out = resolve(c, a.out, "sweep.csv");
  require_file(data, "dataset");
  prepare_output(out);
  const auto counts = parse_counts(a.counts);
  if (a.replicates < 1) throw ConfigError("--replicates must be >= 1");
  const auto ds = dataset::read_dataset(data);
  if (!ds.complete()) throw IoError("dataset is incomplete: " + data.string());
  for (auto n : counts)
    if (n > ds.samples.size()) throw ConfigError("count " + std::to_string(n) + " exceeds the dataset size");
  const std::size_t channels = ds.header.channels;
  const MeshSpec mesh = ds.header.mesh();
  const auto bc = BoundaryCondition::make(ds.header.bc_kind, mesh);

  std::ofstream os(out, std::ios::trunc);
  if (!os) throw IoError("cannot write " + out.string());
  os << "count";
  for (int r = 1; r <= a.replicates; ++r) os << ",replicate_" << r;
  os << ",mean,spread\n" << std::setprecision(9);

  double prev_mean = -1.0;
  for (std::size_t n : counts) {
    std::vector<double> acc;
    for (int r = 0; r < a.replicates; ++r) {
      const std::uint64_t rs = derive_seed(c.seed, "sweep", n * 1000 + static_cast<std::size_t>(r));
      const auto split = dataset::make_split(n, derive_seed(rs, "split"));
      std::vector<unet::Example<float>> ex;
      for (std::size_t i = 0; i < n; ++i) ex.push_back(to_example<float>(ds.samples[i], channels));
      unet::ArchitectureConfig arch;
      arch.in_channels = channels;
      unet::TrainState<float> st(arch, nn::OptimizerConfig{}, rs);
      if (a.normalize) st.normalization = unet::fit_normalization(ex, as_indices(split.train));
      normalize(ex, st.normalization);
      unet::TrainOptions to;
      to.epochs = a.epochs;
      to.batch_size = a.batch;
      unet::train(st, ex, as_indices(split.train), as_indices(split.validation), to);
      const auto problems = problems_from(ds, as_indices(split.test), channels);
      const auto rep = eval::evaluate_set(make_predictor(st.model, st.normalization), problems, mesh, bc);
      acc.push_back(rep.summary.pixel_accuracy);
      std::cout << "count " << n << " replicate " << r + 1 << ": pixel accuracy " << eval::percent(acc.back()) << '\n';
    }
    const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
    os << n;
    for (double v : acc) os << ',' << v;
    os << ',' << mean << ',' << *hi - *lo << '\n';
    os.flush();
    if (mean < prev_mean)
      std::cerr << "warning: mean accuracy dropped from " << eval::percent(prev_mean) << " to " << eval::percent(mean)
                << " at count " << n << " (small-sample training is unstable)\n";
    prev_mean = mean;
  }
  std::cout << "sweep written to " << out.string() << '\n';
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Numeric: return 3;
    case ErrorKind::Io: return 4;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-Net topology optimization: generate SIMP datasets, train, predict and evaluate"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out-dir", common.out_dir, "Default directory for outputs (env TOPOPT_OUT_DIR, else .)")
        ->capture_default_str();
    sub->add_option("--seed", common.seed, "Master seed")->capture_default_str();
    sub->add_option("--threads", common.threads, "Worker threads (default: available cores)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
  };

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a SIMP dataset (resumes an interrupted file)");
  add_common(g);
  g->add_option("--count", gen.count, "Number of samples")->capture_default_str();
  g->add_option("--bc", gen.bc, "cantilever | simply-supported | continuous")->capture_default_str();
  g->add_option("--channels", gen.channels, "Input channels stored (3 or 6)")->capture_default_str();
  g->add_option("--nelx", gen.nelx, "Elements along x")->capture_default_str();
  g->add_option("--nely", gen.nely, "Elements along y")->capture_default_str();
  g->add_option("--out", gen.out, "Dataset path (default <out-dir>/dataset.topd; split at <path>.split)");
  g->add_flag("--quiet", gen.quiet, "Suppress per-sample lines");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the U-Net; resumes from --checkpoint when present");
  add_common(t);
  t->add_option("--data", tr.data, "Dataset path (default <out-dir>/dataset.topd)");
  t->add_option("--checkpoint", tr.checkpoint, "Last-epoch checkpoint (default <out-dir>/model.topc)");
  t->add_option("--best", tr.best, "Best-validation checkpoint (default <out-dir>/model_best.topc)");
  t->add_option("--log", tr.log, "Per-epoch CSV log (default <out-dir>/train_log.csv)");
  t->add_option("--epochs", tr.epochs, "Total epochs")->capture_default_str();
  t->add_option("--batch", tr.batch, "Mini-batch size")->capture_default_str();
  t->add_option("--count", tr.count, "Use the first N samples (below 10: all train, no validation)");
  t->add_option("--channels", tr.channels, "Input channels 3 or 6 (default: as stored)");
  t->add_option("--optimizer", tr.optimizer, "adam | sgd")->capture_default_str();
  t->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  t->add_option("--l2", tr.l2, "L2 weight on conv kernels")->capture_default_str();
  t->add_option("--patience", tr.patience, "Plateau epochs before decay")->capture_default_str();
  t->add_option("--decay", tr.decay, "Learning-rate decay factor")->capture_default_str();
  t->add_flag("--normalize", tr.normalize, "Standardize input channels with training-split statistics");
  t->add_flag("--fresh", tr.fresh, "Ignore an existing checkpoint");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict one layout; --compare also runs SIMP");
  add_common(p);
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint (default <out-dir>/model_best.topc)");
  p->add_option("--data", pr.data, "Dataset for --index (default <out-dir>/dataset.topd)");
  p->add_option("--index", pr.index, "Sample index in --data; otherwise conditions are drawn from --seed");
  p->add_option("--bc", pr.bc, "Boundary condition for drawn conditions")->capture_default_str();
  p->add_option("--out", pr.out, "Density map CSV (default <out-dir>/prediction.csv)");
  p->add_option("--pgm", pr.pgm, "Image path (default <out-dir>/prediction.pgm)");
  p->add_flag("--compare", pr.compare, "Run SIMP on the same problem and report timings and metrics");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on stored or freshly generated problems");
  add_common(e);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint (default <out-dir>/model_best.topc)");
  e->add_option("--data", ev.data, "Dataset to evaluate; without it, --count fresh --bc problems are generated");
  e->add_option("--subset", ev.subset, "test | validation | all (with --data)")->capture_default_str();
  e->add_option("--bc", ev.bc, "Boundary condition for fresh problems")->capture_default_str();
  e->add_option("--count", ev.count, "Fresh problem count")->capture_default_str();
  e->add_option("--csv", ev.csv, "Per-sample metrics (default <out-dir>/eval_<bc>.csv)");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Pixel accuracy against training-set size");
  add_common(s);
  s->add_option("--data", sw.data, "Dataset (default <out-dir>/dataset.topd)");
  s->add_option("--counts", sw.counts, "Comma-separated sample counts")->capture_default_str();
  s->add_option("--replicates", sw.replicates, "Runs per count")->capture_default_str();
  s->add_option("--epochs", sw.epochs, "Epochs per run")->capture_default_str();
  s->add_option("--batch", sw.batch, "Mini-batch size")->capture_default_str();
  s->add_option("--out", sw.out, "CSV path (default <out-dir>/sweep.csv)");
  s->add_flag("--normalize", sw.normalize, "Standardize input channels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (*g) return cmd_gen(common, gen);
    if (*t) return cmd_train(common, tr);
    if (*p) return cmd_predict(common, pr);
    if (*e) return cmd_eval(common, ev);
    if (*s) return cmd_sweep(common, sw);
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return exit_code(ex.kind());
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}
