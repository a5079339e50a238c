#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "topopt/fem.hpp"

using namespace topopt;

namespace {

LoadCase tip_load(const MeshSpec& m) { return {{{m.node(m.nely, m.nelx), Direction::YMinus, 1.0}}}; }

DensityMap random_density(const MeshSpec& m, std::mt19937_64& rng, double lo = 0.1) {
  std::uniform_real_distribution<double> u(lo, 1.0);
  auto x = uniform_density(m, 1.0);
  for (auto& v : x.values()) v = u(rng);
  return x;
}

LoadCase random_loads(const MeshSpec& m, const BoundaryCondition& bc, std::mt19937_64& rng, int count) {
  std::uniform_int_distribution<int> node(0, m.num_nodes() - 1), dir(0, 3);
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  LoadCase lc;
  while (static_cast<int>(lc.loads.size()) < count) {
    PointLoad l{node(rng), static_cast<Direction>(dir(rng)), mag(rng)};
    if (!bc.is_fixed(l.dof())) lc.loads.push_back(l);
  }
  return lc;
}

double free_residual(const MeshSpec& m, const BoundaryCondition& bc, const DensityMap& x, const LoadCase& lc,
                     const Eigen::VectorXd& U) {
  const Eigen::SparseMatrix<double> K = assemble_global(m, {}, x, 3.0);
  Eigen::VectorXd r = K * U - lc.force_vector(m);
  for (int d : bc.fixed_dofs) r[d] = 0.0;
  return r.norm() / lc.force_vector(m).norm();
}

}  // namespace

TEST(ElementStiffness, MatchesQuadratureOracle) {
  for (double nu : {0.0, 0.3, 0.45}) {
    const auto k = element_stiffness({1.0, 1e-9, nu});
    const auto ref = oracle::quadrature_stiffness(1.0, nu);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) EXPECT_NEAR(k(i, j), ref[i][j], 1e-12) << i << "," << j << " nu=" << nu;
  }
}

TEST(ElementStiffness, DiagonalClosedForm) {
  // (3 - nu) / (6 (1 - nu^2)) for the unit square.
  EXPECT_NEAR(element_stiffness({})(0, 0), 2.7 / (6.0 * 0.91), 1e-15);
}

TEST(ElementStiffness, SymmetricWithThreeRigidModes) {
  const auto k = element_stiffness({});
  EXPECT_EQ(k, k.transpose());
  Eigen::SelfAdjointEigenSolver<ElementMatrix> es(k);
  const auto ev = es.eigenvalues();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev[i], 0.0, 1e-12);
  for (int i = 3; i < 8; ++i) EXPECT_GT(ev[i], 1e-3);

  Eigen::Matrix<double, 8, 1> tx, ty, rot;
  tx << 1, 0, 1, 0, 1, 0, 1, 0;
  ty << 0, 1, 0, 1, 0, 1, 0, 1;
  // Corners LL(0,0) LR(1,0) UR(1,1) UL(0,1); small rotation u = (-y, x).
  rot << 0, 0, 0, 1, -1, 1, -1, 0;
  EXPECT_LT((k * tx).norm(), 1e-14);
  EXPECT_LT((k * ty).norm(), 1e-14);
  EXPECT_LT((k * rot).norm(), 1e-14);
}

TEST(Mesh, NumberingFollowsColumnMajorConvention) {
  const MeshSpec m{3, 2};
  EXPECT_EQ(m.num_nodes(), 12);
  EXPECT_EQ(m.node(0, 1), 3);
  EXPECT_EQ(m.element(1, 2), 5);
  const auto d = m.element_dofs(0, 0);
  // LL = node 1, LR = node 4, UR = node 3, UL = node 0.
  const std::array<int, 8> expect{2, 3, 8, 9, 6, 7, 0, 1};
  EXPECT_EQ(d, expect);
  EXPECT_THROW((MeshSpec{0, 3}.validate()), ConfigError);
}

TEST(BoundaryConditions, CanonicalSupportSets) {
  const MeshSpec m{8, 4};
  const auto cant = BoundaryCondition::make(SupportKind::Cantilever, m);
  EXPECT_EQ(cant.fixed_dofs.size(), 10u);
  const auto ss = BoundaryCondition::make(SupportKind::SimplySupported, m);
  EXPECT_EQ(ss.fixed_dofs, (std::vector<int>{2 * m.node(4, 0), 2 * m.node(4, 0) + 1, 2 * m.node(4, 8) + 1}));
  const auto cb = BoundaryCondition::make(SupportKind::ContinuousBeam, m);
  EXPECT_EQ(cb.fixed_dofs.size(), 4u);
  EXPECT_TRUE(cb.is_fixed(2 * m.node(4, 4) + 1));
  for (const auto* bc : {&cant, &ss, &cb}) EXPECT_TRUE(bc->removes_rigid_modes(m));
  // Two y-rollers leave x translation free.
  EXPECT_FALSE(BoundaryCondition::custom({1, 2 * m.node(0, 8) + 1, 2 * m.node(4, 8) + 1}).removes_rigid_modes(m));
  EXPECT_EQ(parse_support_kind("simply-supported"), SupportKind::SimplySupported);
  EXPECT_THROW(parse_support_kind("clamped"), ConfigError);
}

TEST(LoadCase, Validation) {
  const MeshSpec m{4, 4};
  const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
  EXPECT_THROW((LoadCase{}.validate(m, bc)), ConfigError);
  EXPECT_THROW((LoadCase{{{m.node(2, 0), Direction::XPlus, 1.0}}}.validate(m, bc)), ConfigError);
  EXPECT_THROW((LoadCase{{{m.num_nodes(), Direction::XPlus, 1.0}}}.validate(m, bc)), ConfigError);
  EXPECT_THROW((LoadCase{{{m.node(2, 3), Direction::XPlus, 0.0}}}.validate(m, bc)), ConfigError);
  LoadCase many;
  for (int i = 0; i < 11; ++i) many.loads.push_back({m.node(0, 4), Direction::YPlus, 1.0});
  EXPECT_THROW(many.validate(m, bc), ConfigError);
}

TEST(Solve, ZeroLoadsGiveZeroDisplacement) {
  const MeshSpec m{6, 3};
  FeSolver s(m, BoundaryCondition::make(SupportKind::Cantilever, m));
  const auto U = s.solve(Eigen::VectorXd::Zero(m.num_dofs()), uniform_density(m, 0.5), 3.0);
  EXPECT_EQ(U.norm(), 0.0);
}

TEST(Solve, NoSupportsIsSingular) {
  const MeshSpec m{4, 2};
  EXPECT_THROW(assemble_and_solve(m, BoundaryCondition::custom({}), tip_load(m), uniform_density(m, 1.0), 3.0),
               SingularSystem);
  EXPECT_THROW(FeSolver(m, BoundaryCondition::custom({0, 1})), SingularSystem);
}

TEST(Solve, CantileverMatchesDenseEliminationOracle) {
  const MeshSpec m{8, 4};
  const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
  const auto lc = tip_load(m);
  const auto U = assemble_and_solve(m, bc, lc, uniform_density(m, 1.0), 3.0);

  // Independent dense assembly from the quadrature matrix.
  const auto ke = oracle::quadrature_stiffness(1.0, 0.3);
  const int ndof = 2 * (m.nelx + 1) * (m.nely + 1);
  oracle::Dense K(static_cast<std::size_t>(ndof), std::vector<double>(static_cast<std::size_t>(ndof), 0.0));
  auto nid = [&](int r, int c) { return c * (m.nely + 1) + r; };
  for (int c = 0; c < m.nelx; ++c)
    for (int r = 0; r < m.nely; ++r) {
      const int nodes[4] = {nid(r + 1, c), nid(r + 1, c + 1), nid(r, c + 1), nid(r, c)};
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b)
          K[static_cast<std::size_t>(2 * nodes[a / 2] + a % 2)][static_cast<std::size_t>(2 * nodes[b / 2] + b % 2)] +=
              ke[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    }
  std::vector<int> freedofs;
  for (int d = 2 * (m.nely + 1); d < ndof; ++d) freedofs.push_back(d);
  const auto nf = freedofs.size();
  oracle::Dense A(nf, std::vector<double>(nf));
  std::vector<double> f(nf, 0.0);
  for (std::size_t i = 0; i < nf; ++i) {
    for (std::size_t j = 0; j < nf; ++j)
      A[i][j] = K[static_cast<std::size_t>(freedofs[i])][static_cast<std::size_t>(freedofs[j])];
    if (freedofs[i] == 2 * nid(m.nely, m.nelx) + 1) f[i] = -1.0;
  }
  const auto u = oracle::dense_solve(A, f);
  double umax = 0.0;
  for (double v : u) umax = std::max(umax, std::abs(v));
  for (std::size_t i = 0; i < nf; ++i) EXPECT_NEAR(U[freedofs[i]], u[i], 1e-10 * umax);
  const int tip = 2 * nid(m.nely, m.nelx) + 1;
  EXPECT_NEAR(U[tip], u[static_cast<std::size_t>(tip - 2 * (m.nely + 1))], 1e-10 * std::abs(U[tip]));
  for (int d : bc.fixed_dofs) EXPECT_EQ(U[d], 0.0);
}

TEST(Solve, ResidualBelowTolerance) {
  std::mt19937_64 rng(11);
  for (auto kind : {SupportKind::Cantilever, SupportKind::SimplySupported, SupportKind::ContinuousBeam}) {
    for (const MeshSpec m : {MeshSpec{8, 4}, MeshSpec{80, 40}}) {
      const auto bc = BoundaryCondition::make(kind, m);
      const auto x = random_density(m, rng, kMinDensity);
      const auto lc = random_loads(m, bc, rng, 5);
      const auto U = assemble_and_solve(m, bc, lc, x, 3.0);
      EXPECT_LE(free_residual(m, bc, x, lc, U), 1e-8) << to_string(kind) << " " << m.nelx;
    }
  }
}

TEST(Solve, RejectsDensityOutsideBounds) {
  const MeshSpec m{4, 2};
  const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
  EXPECT_THROW(assemble_and_solve(m, bc, tip_load(m), uniform_density(m, 1.5), 3.0), ConfigError);
  EXPECT_THROW(assemble_and_solve(m, bc, tip_load(m), uniform_density(m, 0.0), 3.0), ConfigError);
  EXPECT_THROW(assemble_and_solve(m, bc, tip_load(m), DensityMap(3, 3, 0.5), 3.0), ShapeMismatch);
}

TEST(GlobalStiffness, AnnihilatesRigidModes) {
  const MeshSpec m{6, 5};
  std::mt19937_64 rng(3);
  const auto K = assemble_global(m, {}, random_density(m, rng), 3.0);
  Eigen::VectorXd tx = Eigen::VectorXd::Zero(m.num_dofs()), ty = tx, rot = tx;
  for (int c = 0; c <= m.nelx; ++c)
    for (int r = 0; r <= m.nely; ++r) {
      const int n = m.node(r, c);
      const double x = c, y = m.nely - r;
      tx[2 * n] = 1;
      ty[2 * n + 1] = 1;
      rot[2 * n] = -y;
      rot[2 * n + 1] = x;
    }
  const double knorm = K.norm();
  for (const auto* u : {&tx, &ty, &rot}) EXPECT_LE((K * *u).norm(), 1e-10 * knorm * u->norm());
}

TEST(Compliance, ElementSumMatchesWorkForm) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const MeshSpec m{7, 5};
    const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
    const auto x = random_density(m, rng);
    const auto lc = random_loads(m, bc, rng, 3);
    const auto U = assemble_and_solve(m, bc, lc, x, 3.0);
    const double c = compliance(m, U, x, 3.0);
    const double work = U.dot(lc.force_vector(m));
    const auto K = assemble_global(m, {}, x, 3.0);
    const double quad = U.dot(K * U);
    EXPECT_GE(c, 0.0);
    EXPECT_NEAR(c, work, 1e-10 * work);
    EXPECT_NEAR(c, quad, 1e-10 * quad);
  }
}

TEST(Compliance, ZeroDisplacementAndQuadraticScaling) {
  const MeshSpec m{6, 3};
  const auto x = uniform_density(m, 0.6);
  EXPECT_EQ(compliance(m, Eigen::VectorXd::Zero(m.num_dofs()), x, 3.0), 0.0);
  const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
  LoadCase lc{{{m.node(m.nely, m.nelx), Direction::YMinus, 1.0}, {m.node(0, 3), Direction::XPlus, 0.7}}};
  const double c1 = compliance(m, assemble_and_solve(m, bc, lc, x, 3.0), x, 3.0);
  for (auto& l : lc.loads) l.magnitude *= 2;
  const double c2 = compliance(m, assemble_and_solve(m, bc, lc, x, 3.0), x, 3.0);
  EXPECT_NEAR(c2, 4 * c1, 1e-10 * c2);
}

TEST(Solve, InvariantUnderLoadPermutation) {
  std::mt19937_64 rng(9);
  const MeshSpec m{10, 6};
  const auto bc = BoundaryCondition::make(SupportKind::SimplySupported, m);
  const auto x = random_density(m, rng);
  auto lc = random_loads(m, bc, rng, 8);
  const auto U0 = assemble_and_solve(m, bc, lc, x, 3.0);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(lc.loads.begin(), lc.loads.end(), rng);
    const auto U = assemble_and_solve(m, bc, lc, x, 3.0);
    EXPECT_LE((U - U0).norm(), 1e-10 * U0.norm());
  }
}

TEST(Compliance, MonotoneInEachDensity) {
  std::mt19937_64 rng(21);
  const MeshSpec m{4, 4};
  const auto bc = BoundaryCondition::make(SupportKind::Cantilever, m);
  std::uniform_int_distribution<int> pick(0, m.num_elements() - 1), nloads(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_density(m, rng, 0.05);
    const auto lc = random_loads(m, bc, rng, nloads(rng));
    const double c0 = compliance(m, assemble_and_solve(m, bc, lc, x, 3.0), x, 3.0);
    const auto e = static_cast<std::size_t>(pick(rng));
    x.values()[e] = std::min(1.0, x.values()[e] + std::uniform_real_distribution<double>(0.01, 0.5)(rng));
    const double c1 = compliance(m, assemble_and_solve(m, bc, lc, x, 3.0), x, 3.0);
    EXPECT_LE(c1, c0 * (1 + 1e-12)) << "trial " << trial;
  }
}

TEST(NodalFields, UniformStretch) {
  const MeshSpec m{5, 3};
  Eigen::VectorXd U = Eigen::VectorXd::Zero(m.num_dofs());
  for (int c = 0; c <= m.nelx; ++c)
    for (int r = 0; r <= m.nely; ++r) U[2 * m.node(r, c)] = c;
  const auto nf = nodal_fields(m, U);
  for (std::size_t i = 0; i < nf.eps_x.size(); ++i) {
    EXPECT_NEAR(nf.eps_x.values()[i], 1.0, 1e-14);
    EXPECT_NEAR(nf.eps_y.values()[i], 0.0, 1e-14);
    EXPECT_NEAR(nf.gamma_xy.values()[i], 0.0, 1e-14);
  }
  EXPECT_EQ(nf.ux(1, 3), 3.0);
  EXPECT_EQ(nf.ux.rows(), 4u);
  EXPECT_EQ(nf.ux.cols(), 6u);
}

TEST(NodalFields, RigidRotationIsStrainFree) {
  const MeshSpec m{4, 4};
  const double theta = 1e-3;
  Eigen::VectorXd U(m.num_dofs());
  for (int c = 0; c <= m.nelx; ++c)
    for (int r = 0; r <= m.nely; ++r) {
      const int n = m.node(r, c);
      const double x = c, y = m.nely - r;
      U[2 * n] = -theta * y;
      U[2 * n + 1] = theta * x;
    }
  const auto nf = nodal_fields(m, U);
  for (std::size_t i = 0; i < nf.eps_x.size(); ++i) {
    EXPECT_NEAR(nf.eps_x.values()[i], 0.0, 1e-15);
    EXPECT_NEAR(nf.eps_y.values()[i], 0.0, 1e-15);
    EXPECT_NEAR(nf.gamma_xy.values()[i], 0.0, 1e-15);
  }
}

TEST(NodalFields, MatchesEdgeDifferenceOracle) {
  // At a corner of a bilinear element, du/dx is the difference along the
  // horizontal edge through that corner, du/dy along the vertical one.
  const MeshSpec m{2, 2};
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  Eigen::VectorXd U(m.num_dofs());
  for (auto& v : U) v = g(rng);
  auto ux = [&](int r, int c) { return U[2 * (c * 3 + r)]; };
  auto uy = [&](int r, int c) { return U[2 * (c * 3 + r) + 1]; };
  const auto nf = nodal_fields(m, U);
  for (int r = 0; r <= 2; ++r)
    for (int c = 0; c <= 2; ++c) {
      double ex = 0, ey = 0, gm = 0;
      int count = 0;
      for (int er : {r - 1, r})
        for (int ec : {c - 1, c}) {
          if (er < 0 || er > 1 || ec < 0 || ec > 1) continue;
          const int cn = ec == c ? c + 1 : c - 1;  // horizontal partner inside the element
          const int rn = er == r ? r + 1 : r - 1;  // vertical partner
          const double sx = cn > c ? 1.0 : -1.0;
          const double sy = rn < r ? 1.0 : -1.0;  // rows grow downward, y upward
          const double duxdx = sx * (ux(r, cn) - ux(r, c));
          const double duydx = sx * (uy(r, cn) - uy(r, c));
          const double duxdy = sy * (ux(rn, c) - ux(r, c));
          const double duydy = sy * (uy(rn, c) - uy(r, c));
          ex += duxdx;
          ey += duydy;
          gm += duxdy + duydx;
          ++count;
        }
      EXPECT_NEAR(nf.eps_x(r, c), ex / count, 1e-14);
      EXPECT_NEAR(nf.eps_y(r, c), ey / count, 1e-14);
      EXPECT_NEAR(nf.gamma_xy(r, c), gm / count, 1e-14);
      EXPECT_EQ(nf.uy(r, c), uy(r, c));
    }
}
