#pragma once

// Plane-stress finite elements on a regular grid of unit bilinear quads.
//
// Numbering follows the 88-line SIMP code: nodes and elements are numbered
// column by column, top to bottom. Node (row r, col c) has index
// c*(nely+1)+r, DOF 2n is its x displacement and 2n+1 its y displacement
// (y points up, so row 0 is the top edge). Element (r, c) has index c*nely+r.

#include <Eigen/Dense>
#include <Eigen/CholmodSupport>
#include <Eigen/Sparse>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "topopt/error.hpp"
#include "topopt/grid.hpp"

namespace topopt {

struct MeshSpec {
  int nelx = 80;
  int nely = 40;

  int node_rows() const noexcept { return nely + 1; }
  int node_cols() const noexcept { return nelx + 1; }
  int num_nodes() const noexcept { return (nelx + 1) * (nely + 1); }
  int num_dofs() const noexcept { return 2 * num_nodes(); }
  int num_elements() const noexcept { return nelx * nely; }

  int node(int row, int col) const noexcept { return col * (nely + 1) + row; }
  int element(int row, int col) const noexcept { return col * nely + row; }

  void validate() const {
    if (nelx < 1 || nely < 1) throw ConfigError("mesh needs nelx >= 1 and nely >= 1");
  }

  /// The eight DOFs of element (row, col): lower-left, lower-right,
  /// upper-right, upper-left, each as (x, y).
  std::array<int, 8> element_dofs(int row, int col) const noexcept {
    const int n1 = node(row, col);
    const int n2 = node(row, col + 1);
    return {2 * (n1 + 1), 2 * (n1 + 1) + 1, 2 * (n2 + 1), 2 * (n2 + 1) + 1,
            2 * n2,       2 * n2 + 1,       2 * n1,       2 * n1 + 1};
  }

  friend bool operator==(const MeshSpec&, const MeshSpec&) = default;
};

struct Material {
  double E0 = 1.0;
  double Emin = 1e-9;
  double nu = 0.3;

  void validate() const {
    if (!(Emin > 0.0 && Emin < E0)) throw ConfigError("material needs 0 < Emin < E0");
    if (!(nu >= 0.0 && nu < 0.5)) throw ConfigError("material needs 0 <= nu < 0.5");
  }

  /// Modified SIMP interpolation.
  double modulus(double density, double penalty) const noexcept {
    return Emin + std::pow(density, penalty) * (E0 - Emin);
  }
};

/// Lower bound on element densities.
inline constexpr double kMinDensity = 1e-3;

/// nely x nelx element densities, row 0 at the top.
using DensityMap = Grid<double>;

inline DensityMap uniform_density(const MeshSpec& mesh, double value) {
  return DensityMap(static_cast<std::size_t>(mesh.nely), static_cast<std::size_t>(mesh.nelx), value);
}

inline void validate_density(const MeshSpec& mesh, const DensityMap& x, double lower = kMinDensity) {
  if (x.rows() != static_cast<std::size_t>(mesh.nely) || x.cols() != static_cast<std::size_t>(mesh.nelx))
    throw ShapeMismatch("density map does not match mesh");
  for (double v : x.values())
    if (!(v >= lower && v <= 1.0)) throw ConfigError("density outside [x_min, 1]: " + std::to_string(v));
}

enum class SupportKind : std::uint8_t { Cantilever = 0, SimplySupported = 1, ContinuousBeam = 2, Custom = 3 };

inline const char* to_string(SupportKind k) {
  switch (k) {
    case SupportKind::Cantilever: return "cantilever";
    case SupportKind::SimplySupported: return "simply-supported";
    case SupportKind::ContinuousBeam: return "continuous";
    case SupportKind::Custom: return "custom";
  }
  return "unknown";
}

inline SupportKind parse_support_kind(const std::string& s) {
  if (s == "cantilever") return SupportKind::Cantilever;
  if (s == "simply-supported" || s == "simply_supported") return SupportKind::SimplySupported;
  if (s == "continuous" || s == "continuous-beam") return SupportKind::ContinuousBeam;
  throw ConfigError("unknown boundary condition: " + s);
}

struct BoundaryCondition {
  SupportKind kind = SupportKind::Cantilever;
  std::vector<int> fixed_dofs;  // sorted, unique

  static BoundaryCondition make(SupportKind kind, const MeshSpec& mesh) {
    BoundaryCondition bc{kind, {}};
    const int bottom = mesh.nely;
    switch (kind) {
      case SupportKind::Cantilever:
        for (int r = 0; r <= mesh.nely; ++r) {
          const int n = mesh.node(r, 0);
          bc.fixed_dofs.push_back(2 * n);
          bc.fixed_dofs.push_back(2 * n + 1);
        }
        break;
      case SupportKind::SimplySupported: {
        const int left = mesh.node(bottom, 0);
        bc.fixed_dofs = {2 * left, 2 * left + 1, 2 * mesh.node(bottom, mesh.nelx) + 1};
        break;
      }
      case SupportKind::ContinuousBeam: {
        const int left = mesh.node(bottom, 0);
        bc.fixed_dofs = {2 * left, 2 * left + 1, 2 * mesh.node(bottom, mesh.nelx / 2) + 1,
                         2 * mesh.node(bottom, mesh.nelx) + 1};
        break;
      }
      case SupportKind::Custom:
        throw ConfigError("custom supports need an explicit DOF list");
    }
    std::sort(bc.fixed_dofs.begin(), bc.fixed_dofs.end());
    return bc;
  }

  static BoundaryCondition custom(std::vector<int> dofs) {
    std::sort(dofs.begin(), dofs.end());
    dofs.erase(std::unique(dofs.begin(), dofs.end()), dofs.end());
    return {SupportKind::Custom, std::move(dofs)};
  }

  bool is_fixed(int dof) const { return std::binary_search(fixed_dofs.begin(), fixed_dofs.end(), dof); }
  bool node_has_fixed_dof(int node) const { return is_fixed(2 * node) || is_fixed(2 * node + 1); }

  /// True when the constraints remove translation in x and y and rotation.
  bool removes_rigid_modes(const MeshSpec& mesh) const {
    if (fixed_dofs.size() < 3) return false;
    Eigen::MatrixXd modes(static_cast<Eigen::Index>(fixed_dofs.size()), 3);
    for (std::size_t i = 0; i < fixed_dofs.size(); ++i) {
      const int d = fixed_dofs[i];
      const int n = d / 2;
      const double x = n / (mesh.nely + 1);
      const double y = mesh.nely - n % (mesh.nely + 1);
      const bool is_x = d % 2 == 0;
      const auto row = static_cast<Eigen::Index>(i);
      modes(row, 0) = is_x ? 1.0 : 0.0;
      modes(row, 1) = is_x ? 0.0 : 1.0;
      modes(row, 2) = is_x ? -y : x;
    }
    return Eigen::FullPivLU<Eigen::MatrixXd>(modes).rank() == 3;
  }
};

enum class Direction : std::uint8_t { XPlus = 0, XMinus = 1, YPlus = 2, YMinus = 3 };

struct PointLoad {
  int node = 0;
  Direction direction = Direction::YMinus;
  double magnitude = 1.0;

  int dof() const noexcept {
    return direction == Direction::XPlus || direction == Direction::XMinus ? 2 * node : 2 * node + 1;
  }
  double signed_magnitude() const noexcept {
    return direction == Direction::XPlus || direction == Direction::YPlus ? magnitude : -magnitude;
  }
  friend bool operator==(const PointLoad&, const PointLoad&) = default;
};

inline constexpr std::size_t kMaxLoads = 10;

struct LoadCase {
  std::vector<PointLoad> loads;

  void validate(const MeshSpec& mesh, const BoundaryCondition& bc) const {
    if (loads.empty() || loads.size() > kMaxLoads) throw ConfigError("load count must be in [1, 10]");
    for (const auto& l : loads) {
      if (l.node < 0 || l.node >= mesh.num_nodes()) throw ConfigError("load node outside grid");
      if (!(l.magnitude > 0.0)) throw ConfigError("load magnitude must be positive");
      if (bc.is_fixed(l.dof())) throw ConfigError("load applied on a fixed DOF");
    }
  }

  Eigen::VectorXd force_vector(const MeshSpec& mesh) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(mesh.num_dofs());
    for (const auto& l : loads) f[l.dof()] += l.signed_magnitude();
    return f;
  }
  friend bool operator==(const LoadCase&, const LoadCase&) = default;
};

/// Displacements and strains sampled on the (nely+1) x (nelx+1) node grid.
struct NodalFields {
  Grid<double> ux, uy, eps_x, eps_y, gamma_xy;
};

using ElementMatrix = Eigen::Matrix<double, 8, 8>;

/// Stiffness of a unit square bilinear element in plane stress with E = 1.
inline ElementMatrix element_stiffness(const Material& mat) {
  const double nu = mat.nu;
  const double A11[4][4] = {{12, 3, -6, -3}, {3, 12, 3, 0}, {-6, 3, 12, -3}, {-3, 0, -3, 12}};
  const double A12[4][4] = {{-6, -3, 0, 3}, {-3, -6, -3, -6}, {0, -3, -6, 3}, {3, -6, 3, -6}};
  const double B11[4][4] = {{-4, 3, -2, 9}, {3, -4, -9, 4}, {-2, -9, -4, -3}, {9, 4, -3, -4}};
  const double B12[4][4] = {{2, -3, 4, -9}, {-3, 2, 9, -2}, {4, 9, 2, 3}, {-9, -2, 3, 2}};
  const double scale = 1.0 / (1.0 - nu * nu) / 24.0;
  ElementMatrix k;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      k(i, j) = scale * (A11[i][j] + nu * B11[i][j]);
      k(i, j + 4) = scale * (A12[i][j] + nu * B12[i][j]);
      k(i + 4, j) = scale * (A12[j][i] + nu * B12[j][i]);
      k(i + 4, j + 4) = scale * (A11[i][j] + nu * B11[i][j]);
    }
  }
  return k;
}

/// Unconstrained global stiffness for the given densities.
inline Eigen::SparseMatrix<double> assemble_global(const MeshSpec& mesh, const Material& mat, const DensityMap& x,
                                                   double penalty) {
  const ElementMatrix ke = element_stiffness(mat);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(mesh.num_elements()) * 64);
  for (int c = 0; c < mesh.nelx; ++c) {
    for (int r = 0; r < mesh.nely; ++r) {
      const double E = mat.modulus(x(r, c), penalty);
      const auto dofs = mesh.element_dofs(r, c);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) trips.emplace_back(dofs[i], dofs[j], E * ke(i, j));
    }
  }
  Eigen::SparseMatrix<double> K(mesh.num_dofs(), mesh.num_dofs());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

/// Reusable equilibrium solver: the sparsity pattern and the symbolic
/// Cholesky analysis (CHOLMOD, supernodal) are computed once, each solve
/// only refactorizes. Not copyable; one instance per thread.
class FeSolver {
 public:
  FeSolver(MeshSpec mesh, BoundaryCondition bc, Material mat = {})
      : mesh_(mesh), bc_(std::move(bc)), mat_(mat), ke_(element_stiffness(mat)) {
    mesh_.validate();
    mat_.validate();
    if (!bc_.removes_rigid_modes(mesh_))
      throw SingularSystem("supports do not remove all rigid-body modes");
    for (int d : bc_.fixed_dofs)
      if (d < 0 || d >= mesh_.num_dofs()) throw ConfigError("fixed DOF outside mesh");

    reduced_.assign(static_cast<std::size_t>(mesh_.num_dofs()), -1);
    int next = 0;
    for (int d = 0; d < mesh_.num_dofs(); ++d)
      if (!bc_.is_fixed(d)) reduced_[static_cast<std::size_t>(d)] = next++;
    nfree_ = next;

    std::vector<Eigen::Triplet<double>> trips;
    for (int c = 0; c < mesh_.nelx; ++c)
      for (int r = 0; r < mesh_.nely; ++r) {
        const auto dofs = mesh_.element_dofs(r, c);
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const int a = reduced_[static_cast<std::size_t>(dofs[i])];
            const int b = reduced_[static_cast<std::size_t>(dofs[j])];
            if (a >= 0 && b >= 0 && b <= a) trips.emplace_back(a, b, 1.0);
          }
      }
    K_.resize(nfree_, nfree_);
    K_.setFromTriplets(trips.begin(), trips.end());
    K_.makeCompressed();

    // Slot of every lower-triangular (element, i, j) contribution in K_'s value array.
    slots_.assign(static_cast<std::size_t>(mesh_.num_elements()) * 64, -1);
    for (int c = 0; c < mesh_.nelx; ++c)
      for (int r = 0; r < mesh_.nely; ++r) {
        const auto dofs = mesh_.element_dofs(r, c);
        const auto e = static_cast<std::size_t>(mesh_.element(r, c));
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const int a = reduced_[static_cast<std::size_t>(dofs[i])];
            const int b = reduced_[static_cast<std::size_t>(dofs[j])];
            if (a >= 0 && b >= 0 && b <= a) slots_[e * 64 + static_cast<std::size_t>(i * 8 + j)] = slot_of(a, b);
          }
      }
    llt_.analyzePattern(K_);
  }

  const MeshSpec& mesh() const noexcept { return mesh_; }
  const BoundaryCondition& bc() const noexcept { return bc_; }
  const Material& material() const noexcept { return mat_; }
  const ElementMatrix& ke() const noexcept { return ke_; }

  /// Solves K(x) U = F. Fixed DOFs get zero displacement.
  Eigen::VectorXd solve(const Eigen::VectorXd& F, const DensityMap& x, double penalty) {
    if (F.size() != mesh_.num_dofs()) throw ShapeMismatch("force vector length");
    validate_density(mesh_, x, 0.0);

    double* values = K_.valuePtr();
    std::fill(values, values + K_.nonZeros(), 0.0);
    for (int c = 0; c < mesh_.nelx; ++c)
      for (int r = 0; r < mesh_.nely; ++r) {
        const auto e = static_cast<std::size_t>(mesh_.element(r, c));
        const double E = mat_.modulus(x(r, c), penalty);
        const int* s = &slots_[e * 64];
        for (int k = 0; k < 64; ++k)
          if (s[k] >= 0) values[s[k]] += E * ke_(k / 8, k % 8);
      }

    Eigen::VectorXd f(nfree_);
    for (int d = 0; d < mesh_.num_dofs(); ++d) {
      const int a = reduced_[static_cast<std::size_t>(d)];
      if (a >= 0) f[a] = F[d];
    }

    Eigen::VectorXd U = Eigen::VectorXd::Zero(mesh_.num_dofs());
    const double fnorm = f.norm();
    if (fnorm == 0.0) return U;

    llt_.factorize(K_);
    if (llt_.info() != Eigen::Success) throw SingularSystem("Cholesky factorization failed");
    Eigen::VectorXd u = llt_.solve(f);
    if (!u.allFinite()) throw NonFinite("displacement solve");

    const Eigen::VectorXd res = K_.selfadjointView<Eigen::Lower>() * u - f;
    if (res.norm() > 1e-8 * fnorm) {
      // One step of iterative refinement before giving up.
      u -= llt_.solve(res);
      const Eigen::VectorXd res2 = K_.selfadjointView<Eigen::Lower>() * u - f;
      // High stiffness contrast (void next to solid) can leave a large
      // relative residual on a valid solve; only a poor backward error
      // indicates breakdown.
      if (res2.norm() > 1e-8 * fnorm && backward_error(res2, u, f) > 1e-10)
        throw SingularSystem("residual above tolerance");
    }
    for (int d = 0; d < mesh_.num_dofs(); ++d) {
      const int a = reduced_[static_cast<std::size_t>(d)];
      if (a >= 0) U[d] = u[a];
    }
    return U;
  }

  /// ||r||_inf / (||K||_inf ||u||_inf + ||f||_inf) on the reduced system.
  double backward_error(const Eigen::VectorXd& r, const Eigen::VectorXd& u, const Eigen::VectorXd& f) const {
    Eigen::VectorXd rows = Eigen::VectorXd::Zero(K_.rows());
    for (int j = 0; j < K_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(K_, j); it; ++it) {
        rows[it.row()] += std::abs(it.value());
        if (it.row() != it.col()) rows[it.col()] += std::abs(it.value());
      }
    return r.lpNorm<Eigen::Infinity>() / (rows.maxCoeff() * u.lpNorm<Eigen::Infinity>() + f.lpNorm<Eigen::Infinity>());
  }

  Eigen::VectorXd solve(const LoadCase& loads, const DensityMap& x, double penalty) {
    loads.validate(mesh_, bc_);
    return solve(loads.force_vector(mesh_), x, penalty);
  }

 private:
  int slot_of(int row, int col) const {
    const auto* outer = K_.outerIndexPtr();
    const auto* inner = K_.innerIndexPtr();
    const auto* begin = inner + outer[col];
    const auto* end = inner + outer[col + 1];
    const auto* it = std::lower_bound(begin, end, row);
    return static_cast<int>(it - inner);
  }

  MeshSpec mesh_;
  BoundaryCondition bc_;
  Material mat_;
  ElementMatrix ke_;
  std::vector<int> reduced_;
  int nfree_ = 0;
  Eigen::SparseMatrix<double> K_;
  std::vector<int> slots_;
  Eigen::CholmodSupernodalLLT<Eigen::SparseMatrix<double>, Eigen::Lower> llt_;
};

inline Eigen::VectorXd assemble_and_solve(const MeshSpec& mesh, const BoundaryCondition& bc, const LoadCase& loads,
                                          const DensityMap& x, double penalty, const Material& mat = {}) {
  validate_density(mesh, x);
  FeSolver solver(mesh, bc, mat);
  return solver.solve(loads, x, penalty);
}

inline Eigen::Matrix<double, 8, 1> element_displacements(const MeshSpec& mesh, const Eigen::VectorXd& U, int row,
                                                         int col) {
  const auto dofs = mesh.element_dofs(row, col);
  Eigen::Matrix<double, 8, 1> ue;
  for (int i = 0; i < 8; ++i) ue[i] = U[dofs[i]];
  return ue;
}

/// u_e^T k0 u_e for every element, as an nely x nelx grid.
inline Grid<double> element_energies(const MeshSpec& mesh, const Eigen::VectorXd& U, const ElementMatrix& ke) {
  Grid<double> ce(static_cast<std::size_t>(mesh.nely), static_cast<std::size_t>(mesh.nelx));
  for (int c = 0; c < mesh.nelx; ++c)
    for (int r = 0; r < mesh.nely; ++r) {
      const auto ue = element_displacements(mesh, U, r, c);
      ce(r, c) = ue.dot(ke * ue);
    }
  return ce;
}

/// Sum over elements of E_e(x_e) u_e^T k0 u_e.
inline double compliance(const MeshSpec& mesh, const Eigen::VectorXd& U, const DensityMap& x, double penalty,
                         const Material& mat = {}) {
  const auto ce = element_energies(mesh, U, element_stiffness(mat));
  double c = 0.0;
  for (int col = 0; col < mesh.nelx; ++col)
    for (int r = 0; r < mesh.nely; ++r) c += mat.modulus(x(r, col), penalty) * ce(r, col);
  return c;
}

/// Nodal displacements and strains. Each node's strain is the mean of the
/// strain evaluated at that node in every element touching it.
inline NodalFields nodal_fields(const MeshSpec& mesh, const Eigen::VectorXd& U) {
  if (U.size() != mesh.num_dofs()) throw ShapeMismatch("displacement vector length");
  const auto R = static_cast<std::size_t>(mesh.node_rows());
  const auto C = static_cast<std::size_t>(mesh.node_cols());
  NodalFields out{Grid<double>(R, C), Grid<double>(R, C), Grid<double>(R, C), Grid<double>(R, C),
                  Grid<double>(R, C)};
  Grid<int> hits(R, C, 0);
  for (int c = 0; c <= mesh.nelx; ++c)
    for (int r = 0; r <= mesh.nely; ++r) {
      const int n = mesh.node(r, c);
      out.ux(r, c) = U[2 * n];
      out.uy(r, c) = U[2 * n + 1];
    }

  // Local corners (xi, eta) in the element_dofs order: LL, LR, UR, UL.
  constexpr int cxi[4] = {0, 1, 1, 0};
  constexpr int ceta[4] = {0, 0, 1, 1};
  for (int c = 0; c < mesh.nelx; ++c)
    for (int r = 0; r < mesh.nely; ++r) {
      const auto ue = element_displacements(mesh, U, r, c);
      for (int k = 0; k < 4; ++k) {
        const double xi = cxi[k], eta = ceta[k];
        // Bilinear shape function derivatives at (xi, eta) for unit square.
        const double dNdx[4] = {-(1 - eta), (1 - eta), eta, -eta};
        const double dNdy[4] = {-(1 - xi), -xi, xi, (1 - xi)};
        double ex = 0, ey = 0, g = 0;
        for (int i = 0; i < 4; ++i) {
          ex += dNdx[i] * ue[2 * i];
          ey += dNdy[i] * ue[2 * i + 1];
          g += dNdy[i] * ue[2 * i] + dNdx[i] * ue[2 * i + 1];
        }
        // Corner k sits at row r+1-eta, col c+xi.
        const auto nr = static_cast<std::size_t>(r + 1 - ceta[k]);
        const auto nc = static_cast<std::size_t>(c + cxi[k]);
        out.eps_x(nr, nc) += ex;
        out.eps_y(nr, nc) += ey;
        out.gamma_xy(nr, nc) += g;
        hits(nr, nc) += 1;
      }
    }
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      const double h = hits(i, j);
      out.eps_x(i, j) /= h;
      out.eps_y(i, j) /= h;
      out.gamma_xy(i, j) /= h;
    }
  return out;
}

}  // namespace topopt
