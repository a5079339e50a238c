#pragma once

// SIMP compliance minimization with a density filter and the
// optimality-criteria update, following the 88-line reference code.

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <vector>

#include "topopt/fem.hpp"

namespace topopt {

struct SimpConfig {
  double volume_fraction = 0.5;
  double penalty = 3.0;
  double filter_radius = 1.5;
  double move_limit = 0.2;
  double damping = 0.5;
  double convergence_tol = 0.01;
  int max_iterations = 200;
  double min_density = kMinDensity;
  double multiplier_tol = 1e-3;  // relative bracket width of the bisection
  double volume_tol = 1e-3;

  void validate() const {
    if (!(volume_fraction > 0.0 && volume_fraction <= 1.0)) throw ConfigError("volume fraction must be in (0, 1]");
    if (!(penalty >= 1.0)) throw ConfigError("penalty must be >= 1");
    if (!(filter_radius >= 1.0)) throw ConfigError("filter radius must be >= 1");
    if (!(move_limit > 0.0)) throw ConfigError("move limit must be positive");
    if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
  }
};

/// Cone-weighted density filter: w(e, i) = max(0, rmin - dist(e, i)).
/// Rows are indexed by the row-major element position r*nelx + c.
class FilterOperator {
 public:
  FilterOperator(const MeshSpec& mesh, double rmin) : nelx_(mesh.nelx), nely_(mesh.nely) {
    const int reach = static_cast<int>(std::ceil(rmin)) - 1;
    const int n = mesh.num_elements();
    std::vector<Eigen::Triplet<double>> trips;
    for (int r = 0; r < nely_; ++r)
      for (int c = 0; c < nelx_; ++c) {
        for (int r2 = std::max(r - reach, 0); r2 <= std::min(r + reach, nely_ - 1); ++r2)
          for (int c2 = std::max(c - reach, 0); c2 <= std::min(c + reach, nelx_ - 1); ++c2) {
            const double w = rmin - std::hypot(r - r2, c - c2);
            if (w > 0.0) trips.emplace_back(r * nelx_ + c, r2 * nelx_ + c2, w);
          }
      }
    H_.resize(n, n);
    H_.setFromTriplets(trips.begin(), trips.end());
    Hs_ = H_ * Eigen::VectorXd::Ones(n);
  }

  const Eigen::SparseMatrix<double, Eigen::RowMajor>& weights() const noexcept { return H_; }
  const Eigen::VectorXd& normalizers() const noexcept { return Hs_; }

  /// (H x) / Hs
  Grid<double> apply(const Grid<double>& field) const {
    check(field);
    Grid<double> out(field.rows(), field.cols());
    Eigen::Map<const Eigen::VectorXd> in(field.values().data(), static_cast<Eigen::Index>(field.size()));
    Eigen::Map<Eigen::VectorXd> res(out.values().data(), static_cast<Eigen::Index>(out.size()));
    res = (H_ * in).cwiseQuotient(Hs_);
    return out;
  }

  /// Chain rule through apply(): H^T (g / Hs). H is symmetric.
  Grid<double> apply_adjoint(const Grid<double>& grad) const {
    check(grad);
    Grid<double> out(grad.rows(), grad.cols());
    Eigen::Map<const Eigen::VectorXd> in(grad.values().data(), static_cast<Eigen::Index>(grad.size()));
    Eigen::Map<Eigen::VectorXd> res(out.values().data(), static_cast<Eigen::Index>(out.size()));
    res = H_.transpose() * in.cwiseQuotient(Hs_);
    return out;
  }

 private:
  void check(const Grid<double>& g) const {
    if (g.rows() != static_cast<std::size_t>(nely_) || g.cols() != static_cast<std::size_t>(nelx_))
      throw ShapeMismatch("filter field shape");
  }

  int nelx_, nely_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> H_;
  Eigen::VectorXd Hs_;
};

inline Grid<double> apply_filter(const FilterOperator& filter, const Grid<double>& field) {
  return filter.apply(field);
}

/// dc/dx_e = -p x_e^(p-1) (E0 - Emin) u_e^T k0 u_e
inline Grid<double> sensitivities(const MeshSpec& mesh, const Eigen::VectorXd& U, const DensityMap& x, double penalty,
                                  const Material& mat = {}) {
  auto dc = element_energies(mesh, U, element_stiffness(mat));
  for (std::size_t i = 0; i < dc.size(); ++i) {
    const double xe = x.values()[i];
    dc.values()[i] *= -penalty * std::pow(xe, penalty - 1.0) * (mat.E0 - mat.Emin);
  }
  return dc;
}

inline double mean(const Grid<double>& g) {
  double s = 0.0;
  for (double v : g.values()) s += v;
  return s / static_cast<double>(g.size());
}

struct OcResult {
  DensityMap design;    // updated design variables
  DensityMap physical;  // filtered densities (equal to design without a filter)
  double multiplier = 0.0;
};

/// Optimality-criteria update with bisection on the volume multiplier.
/// `dc` and `dv` are sensitivities with respect to the design variables.
/// When `filter` is given the volume is measured on the filtered field.
inline OcResult oc_update(const DensityMap& x, const Grid<double>& dc, const Grid<double>& dv, const SimpConfig& cfg,
                          const FilterOperator* filter = nullptr) {
  if (!x.same_shape(dc) || !x.same_shape(dv)) throw ShapeMismatch("oc_update inputs");
  const double target = cfg.volume_fraction;
  const std::size_t n = x.size();

  auto candidate = [&](double lambda) {
    DensityMap xn(x.rows(), x.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const double xe = x.values()[i];
      const double ratio = std::max(0.0, -dc.values()[i]) / dv.values()[i] / lambda;
      const double step = xe * (cfg.damping == 0.5 ? std::sqrt(ratio) : std::pow(ratio, cfg.damping));
      xn.values()[i] = std::max(cfg.min_density,
                                std::max(xe - cfg.move_limit, std::min(1.0, std::min(xe + cfg.move_limit, step))));
    }
    DensityMap phys = filter ? filter->apply(xn) : xn;
    // The weighted average can land an ulp outside [x_min, 1].
    for (auto& v : phys.values()) v = std::clamp(v, cfg.min_density, 1.0);
    return std::pair{std::move(xn), std::move(phys)};
  };
  auto volume_at_bound = [&](double bound_sign) {
    DensityMap xn(x.rows(), x.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const double xe = x.values()[i];
      xn.values()[i] = bound_sign > 0 ? std::min(1.0, xe + cfg.move_limit)
                                      : std::max(cfg.min_density, xe - cfg.move_limit);
    }
    return mean(filter ? filter->apply(xn) : xn);
  };
  if (volume_at_bound(+1) < target - cfg.volume_tol || volume_at_bound(-1) > target + cfg.volume_tol)
    throw BisectionFailure("target volume unreachable within move limit");

  double l1 = 0.0, l2 = 1e9;
  OcResult res;
  for (int it = 0; it < 200; ++it) {
    const double lmid = 0.5 * (l1 + l2);
    auto [xn, phys] = candidate(lmid);
    const double vol = mean(phys);
    if (vol > target)
      l1 = lmid;
    else
      l2 = lmid;
    res = {std::move(xn), std::move(phys), lmid};
    if ((l2 - l1) / (l1 + l2) <= cfg.multiplier_tol && std::abs(vol - target) <= cfg.volume_tol) return res;
  }
  throw BisectionFailure("multiplier bisection did not converge");
}

struct SimpResult {
  DensityMap density;  // physical (filtered) densities
  double compliance = 0.0;
  int iterations = 0;
  std::vector<double> compliance_history;
  std::vector<double> volume_history;
  double initial_compliance = 0.0;
};

inline SimpResult optimize(const MeshSpec& mesh, const BoundaryCondition& bc, const LoadCase& loads,
                           const SimpConfig& cfg, const Material& mat = {}) {
  cfg.validate();
  loads.validate(mesh, bc);
  FeSolver solver(mesh, bc, mat);
  const Eigen::VectorXd F = loads.force_vector(mesh);
  SimpResult out;

  if (cfg.volume_fraction >= 1.0) {
    out.density = uniform_density(mesh, 1.0);
    const auto U = solver.solve(F, out.density, cfg.penalty);
    out.compliance = out.initial_compliance = compliance(mesh, U, out.density, cfg.penalty, mat);
    out.iterations = 1;
    out.compliance_history = {out.compliance};
    out.volume_history = {1.0};
    return out;
  }

  const FilterOperator filter(mesh, cfg.filter_radius);
  const Grid<double> ones(static_cast<std::size_t>(mesh.nely), static_cast<std::size_t>(mesh.nelx), 1.0);
  const Grid<double> dv = filter.apply_adjoint(ones);

  DensityMap x = uniform_density(mesh, cfg.volume_fraction);
  DensityMap phys = x;
  double change = 1.0;
  int iter = 0;
  while (change >= cfg.convergence_tol && iter < cfg.max_iterations) {
    ++iter;
    const auto U = solver.solve(F, phys, cfg.penalty);
    const double c = compliance(mesh, U, phys, cfg.penalty, mat);
    if (!std::isfinite(c)) throw NonFinite("compliance at iteration " + std::to_string(iter));
    if (iter == 1) out.initial_compliance = c;
    out.compliance_history.push_back(c);

    const auto dc = filter.apply_adjoint(sensitivities(mesh, U, phys, cfg.penalty, mat));
    auto step = oc_update(x, dc, dv, cfg, &filter);
    change = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      change = std::max(change, std::abs(step.design.values()[i] - x.values()[i]));
    x = std::move(step.design);
    phys = std::move(step.physical);
    out.volume_history.push_back(mean(phys));
  }
  const auto U = solver.solve(F, phys, cfg.penalty);
  out.compliance = compliance(mesh, U, phys, cfg.penalty, mat);
  out.density = std::move(phys);
  out.iterations = iter;
  return out;
}

}  // namespace topopt
