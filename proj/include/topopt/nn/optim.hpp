#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "topopt/nn/layers.hpp"

namespace topopt::nn {

enum class Algorithm : std::uint8_t { SGD = 0, Adam = 1 };

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double l2 = 1e-5;
  int patience = 10;
  double decay = 0.1;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
    if (!(l2 >= 0)) throw ConfigError("l2 weight must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }
};

/// theta <- theta - lr * g
template <typename T>
void sgd_step(Param<T>& p, double lr) {
  for (std::size_t i = 0; i < p.value.size(); ++i)
    p.value[i] = static_cast<T>(p.value[i] - lr * p.grad[i]);
}

/// One Adam update with bias correction at step t >= 1. The epsilon sits
/// inside the square root: theta -= lr * mhat / sqrt(vhat + eps).
template <typename T>
void adam_step(Param<T>& p, const OptimizerConfig& cfg, double lr, std::int64_t t) {
  if (t < 1) throw ConfigError("adam step index must be >= 1");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i];
    const double m = b1 * p.m[i] + (1.0 - b1) * g;
    const double v = b2 * p.v[i] + (1.0 - b2) * g * g;
    p.m[i] = static_cast<T>(m);
    p.v[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    p.value[i] = static_cast<T>(p.value[i] - lr * mhat / std::sqrt(vhat + cfg.epsilon));
  }
}

/// Multiplies the learning rate by `decay` whenever the best validation
/// loss has not strictly improved for `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler() = default;
  PlateauScheduler(double lr, int patience, double decay) : lr_(lr), patience_(patience), decay_(decay) {}

  /// Records one epoch's validation loss and returns the learning rate
  /// to use from now on.
  double observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      since_best_ = 0;
    } else if (++since_best_ >= patience_) {
      lr_ *= decay_;
      since_best_ = 0;
    }
    return lr_;
  }

  double learning_rate() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  int epochs_since_best() const noexcept { return since_best_; }
  void restore(double lr, double best, int since_best) {
    lr_ = lr;
    best_ = best;
    since_best_ = since_best;
  }

 private:
  double lr_ = 1e-3;
  int patience_ = 10;
  double decay_ = 0.1;
  double best_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
};

/// Learning rate after replaying a whole validation history.
inline double plateau_learning_rate(const std::vector<double>& history, double lr, int patience = 10,
                                    double decay = 0.1) {
  if (history.empty()) throw ConfigError("validation history is empty");
  PlateauScheduler s(lr, patience, decay);
  for (double v : history) s.observe(v);
  return s.learning_rate();
}

}  // namespace topopt::nn
