#pragma once

// Plane-stress Q4 finite elements on unit-square grids, SIMP interpolation and constrained solves.
//
// Mesh convention: node (i, j), 0 <= i <= nel.x, 0 <= j <= nel.y, has id j * (nel.x + 1) + i and
// DOFs 2*id (x) and 2*id + 1 (y). Element (ex, ey) has id ey * nel.x + ex and its nodes run
// counter-clockwise from the lower-left corner.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "metanet/common.hpp"
#include "metanet/raster.hpp"

namespace metanet {

using ConstitutiveTensor = Eigen::Matrix3d;
using ElementMatrix = Eigen::Matrix<double, 8, 8>;
using ElementVector = Eigen::Matrix<double, 8, 1>;
using DisplacementField = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

struct Material {
  double youngs_modulus = 1.0;
  double poisson_ratio = 0.3;

  void validate() const {
    require(youngs_modulus > 0.0, "Young's modulus must be positive");
    require(poisson_ratio > -1.0 && poisson_ratio < 0.5, "Poisson ratio must lie in (-1, 0.5)");
  }
  friend bool operator==(const Material&, const Material&) = default;
};

/// Plane-stress constitutive matrix in Voigt order (11, 22, 12) with engineering shear.
inline ConstitutiveTensor plane_stress_tensor(const Material& m) {
  m.validate();
  const double e = m.youngs_modulus, nu = m.poisson_ratio;
  const double f = e / (1.0 - nu * nu);
  ConstitutiveTensor d;
  d << f, f * nu, 0.0, f * nu, f, 0.0, 0.0, 0.0, f * (1.0 - nu) / 2.0;
  return d;
}

using StrainMatrix = Eigen::Matrix<double, 3, 8>;

/// 2x2 Gauss rule on the unit square; exact for the bilinear element.
struct Q4Rule {
  std::array<StrainMatrix, 4> b;
  double weight = 0.25;
};

inline const Q4Rule& q4_rule() {
  static const Q4Rule rule = [] {
    Q4Rule r;
    const double g = 0.5 / std::sqrt(3.0);
    const std::array<double, 2> pts{0.5 - g, 0.5 + g};
    int q = 0;
    for (double eta : pts) {
      for (double xi : pts) {
        const std::array<double, 4> dx{-(1 - eta), 1 - eta, eta, -eta};
        const std::array<double, 4> dy{-(1 - xi), -xi, xi, 1 - xi};
        StrainMatrix b = StrainMatrix::Zero();
        for (int a = 0; a < 4; ++a) {
          b(0, 2 * a) = dx[static_cast<std::size_t>(a)];
          b(1, 2 * a + 1) = dy[static_cast<std::size_t>(a)];
          b(2, 2 * a) = dy[static_cast<std::size_t>(a)];
          b(2, 2 * a + 1) = dx[static_cast<std::size_t>(a)];
        }
        r.b[static_cast<std::size_t>(q++)] = b;
      }
    }
    return r;
  }();
  return rule;
}

/// Unit-square element stiffness for an arbitrary constitutive matrix.
inline ElementMatrix element_stiffness(const ConstitutiveTensor& d) {
  const auto& rule = q4_rule();
  ElementMatrix k = ElementMatrix::Zero();
  for (const auto& b : rule.b) k.noalias() += rule.weight * b.transpose() * d * b;
  return k;
}

inline ElementMatrix element_stiffness(const Material& m) { return element_stiffness(plane_stress_tensor(m)); }

/// G_ij = integral of eps_i(v) eps_j(u) over the element, so that d(v^T k(D) u)/dD_ij = G_ij.
inline Eigen::Matrix3d strain_product(const ElementVector& v, const ElementVector& u) {
  const auto& rule = q4_rule();
  Eigen::Matrix3d g = Eigen::Matrix3d::Zero();
  for (const auto& b : rule.b) g.noalias() += rule.weight * (b * v) * (b * u).transpose();
  return g;
}

/// Nodal displacements of a unit-square element under a uniform Voigt strain.
inline ElementVector uniform_strain_displacement(const Eigen::Vector3d& strain) {
  static constexpr std::array<std::array<double, 2>, 4> xy{{{0, 0}, {1, 0}, {1, 1}, {0, 1}}};
  ElementVector u;
  for (int a = 0; a < 4; ++a) {
    const double x = xy[static_cast<std::size_t>(a)][0], y = xy[static_cast<std::size_t>(a)][1];
    u(2 * a) = strain(0) * x + 0.5 * strain(2) * y;
    u(2 * a + 1) = 0.5 * strain(2) * x + strain(1) * y;
  }
  return u;
}

/// SIMP stiffness scale c0 + rho^p (1 - c0) per element.
inline Eigen::VectorXd simp_interpolate(const Eigen::Ref<const Eigen::VectorXd>& rho, double p, double c0) {
  require(p >= 1.0, "penalization exponent must be >= 1");
  Eigen::VectorXd s(rho.size());
  for (Eigen::Index e = 0; e < rho.size(); ++e) {
    require(rho(e) >= 0.0 && rho(e) <= 1.0, "density outside [0, 1]");
    s(e) = c0 + std::pow(rho(e), p) * (1.0 - c0);
  }
  return s;
}

inline double simp_derivative(double rho, double p, double c0) {
  return rho == 0.0 && p > 1.0 ? 0.0 : p * std::pow(rho, p - 1.0) * (1.0 - c0);
}

// ---------------------------------------------------------------------------------------------
// Mesh indexing

inline int node_id(Dims nel, int i, int j) { return j * (nel.x + 1) + i; }
inline int dof_count(Dims nel) { return 2 * (nel.x + 1) * (nel.y + 1); }

inline std::array<int, 8> element_dofs(Dims nel, int ex, int ey) {
  const std::array<int, 4> n{node_id(nel, ex, ey), node_id(nel, ex + 1, ey), node_id(nel, ex + 1, ey + 1),
                             node_id(nel, ex, ey + 1)};
  std::array<int, 8> d{};
  for (int a = 0; a < 4; ++a) {
    d[static_cast<std::size_t>(2 * a)] = 2 * n[static_cast<std::size_t>(a)];
    d[static_cast<std::size_t>(2 * a + 1)] = 2 * n[static_cast<std::size_t>(a)] + 1;
  }
  return d;
}

inline ElementVector gather(const Eigen::VectorXd& u, const std::array<int, 8>& dofs) {
  ElementVector ue;
  for (int a = 0; a < 8; ++a) ue(a) = u(dofs[static_cast<std::size_t>(a)]);
  return ue;
}

struct NodalValue {
  int dof = 0;
  double value = 0.0;
  friend bool operator==(const NodalValue&, const NodalValue&) = default;
};

/// Boundary-value problem on a unit-square element grid.
struct FeProblem {
  Dims nel;
  std::vector<int> fixed_dofs;                   // homogeneous Dirichlet
  std::vector<NodalValue> loads;                 // nodal forces
  std::vector<NodalValue> prescribed;            // non-homogeneous Dirichlet
  std::vector<std::uint8_t> passive_void;        // per element, optional
  std::vector<std::uint8_t> passive_solid;       // per element, optional

  [[nodiscard]] int ndof() const { return dof_count(nel); }

  [[nodiscard]] Eigen::VectorXd load_vector() const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(ndof());
    for (const auto& l : loads) f(l.dof) += l.value;
    return f;
  }

  void validate() const {
    require(nel.x >= 1 && nel.y >= 1, "element dims must be >= 1");
    const int n = ndof();
    for (int d : fixed_dofs) require(d >= 0 && d < n, "fixed DOF out of range");
    for (const auto& l : loads) require(l.dof >= 0 && l.dof < n, "loaded DOF out of range");
    for (const auto& p : prescribed) require(p.dof >= 0 && p.dof < n, "prescribed DOF out of range");
    const auto ne = static_cast<std::size_t>(nel.count());
    require(passive_void.empty() || passive_void.size() == ne, "passive_void mask size mismatch");
    require(passive_solid.empty() || passive_solid.size() == ne, "passive_solid mask size mismatch");
    if (!passive_void.empty() && !passive_solid.empty())
      for (std::size_t e = 0; e < ne; ++e) require(!(passive_void[e] && passive_solid[e]), "passive masks overlap");
  }

  friend bool operator==(const FeProblem&, const FeProblem&) = default;
};

inline double compliance(const DisplacementField& u, std::span<const NodalValue> loads) {
  double c = 0.0;
  for (const auto& l : loads) c += l.value * u(l.dof);
  return c;
}

// ---------------------------------------------------------------------------------------------
// Solver

inline constexpr double kResidualTolerance = 1e-8;

/// Sparse SPD solve: LDL^T factorization with residual-driven refinement and a CG fallback.
class SpdSolver {
 public:
  void factorize(const SparseMatrix& a) {
    a_ = &a;
    ldlt_.compute(a);
    if (ldlt_.info() != Eigen::Success) throw NumericalError("stiffness factorization failed (singular system)");
    const Eigen::VectorXd d = ldlt_.vectorD();
    if (d.size() > 0) {
      const double dmax = d.cwiseAbs().maxCoeff();
      if (!(d.minCoeff() > 1e-14 * dmax))
        throw NumericalError("stiffness matrix is singular or indefinite after constraints (unsupported rigid mode "
                             "or zero-stiffness region)");
    }
  }

  /// Solves A x = b to the residual contract, or throws.
  [[nodiscard]] Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    const double bn = b.norm();
    if (bn == 0.0) return Eigen::VectorXd::Zero(b.size());
    Eigen::VectorXd x = ldlt_.solve(b);
    double rel = ((*a_) * x - b).norm() / bn;
    for (int it = 0; it < 3 && rel > kResidualTolerance && std::isfinite(rel); ++it) {
      x += ldlt_.solve(b - (*a_) * x);
      rel = ((*a_) * x - b).norm() / bn;
    }
    if (!(rel <= kResidualTolerance)) {
      Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg;
      cg.setTolerance(kResidualTolerance * 0.5);
      cg.setMaxIterations(std::max<Eigen::Index>(1000, 4 * b.size()));
      cg.compute(*a_);
      x = cg.solveWithGuess(b, std::isfinite(rel) ? x : Eigen::VectorXd::Zero(b.size()));
      rel = ((*a_) * x - b).norm() / bn;
    }
    if (!(rel <= kResidualTolerance))
      throw NumericalError("linear solve missed the residual contract (relative residual " + std::to_string(rel) + ")");
    return x;
  }

 private:
  const SparseMatrix* a_ = nullptr;
  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt_;
};

/// Assembled system with fixed and prescribed DOFs eliminated. Keeps the factorization so adjoint
/// solves reuse it.
class ElasticSystem {
 public:
  /// `element_matrix(e)` returns the 8x8 stiffness of element e.
  template <class ElementFn>
  ElasticSystem(const FeProblem& problem, ElementFn&& element_matrix) : problem_(&problem) {
    problem.validate();
    const int n = problem.ndof();
    constrained_value_.assign(static_cast<std::size_t>(n), 0.0);
    std::vector<std::uint8_t> constrained(static_cast<std::size_t>(n), 0);
    for (int d : problem.fixed_dofs) constrained[static_cast<std::size_t>(d)] = 1;
    for (const auto& p : problem.prescribed) {
      constrained[static_cast<std::size_t>(p.dof)] = 1;
      constrained_value_[static_cast<std::size_t>(p.dof)] = p.value;
    }
    free_index_.assign(static_cast<std::size_t>(n), -1);
    for (int d = 0; d < n; ++d)
      if (!constrained[static_cast<std::size_t>(d)]) {
        free_index_[static_cast<std::size_t>(d)] = static_cast<int>(free_dofs_.size());
        free_dofs_.push_back(d);
      }
    const auto nf = static_cast<Eigen::Index>(free_dofs_.size());
    if (nf == 0) throw NumericalError("every DOF is constrained");

    rhs_ = Eigen::VectorXd::Zero(nf);
    for (const auto& l : problem.loads) {
      const int fi = free_index_[static_cast<std::size_t>(l.dof)];
      if (fi >= 0) rhs_(fi) += l.value;
    }
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(problem.nel.count()) * 36);
    for (int ey = 0; ey < problem.nel.y; ++ey) {
      for (int ex = 0; ex < problem.nel.x; ++ex) {
        const int e = ey * problem.nel.x + ex;
        const ElementMatrix ke = element_matrix(e);
        const auto dofs = element_dofs(problem.nel, ex, ey);
        for (int a = 0; a < 8; ++a) {
          const int fa = free_index_[static_cast<std::size_t>(dofs[static_cast<std::size_t>(a)])];
          if (fa < 0) continue;
          for (int b = 0; b < 8; ++b) {
            const int db = dofs[static_cast<std::size_t>(b)];
            const int fb = free_index_[static_cast<std::size_t>(db)];
            if (fb < 0) {
              rhs_(fa) -= ke(a, b) * constrained_value_[static_cast<std::size_t>(db)];
            } else if (fb <= fa) {
              trips.emplace_back(fa, fb, ke(a, b));
            }
          }
        }
      }
    }
    kff_.resize(nf, nf);
    kff_.setFromTriplets(trips.begin(), trips.end());
    // Mirror the lower triangle so residual checks and CG see the full matrix.
    SparseMatrix upper = kff_.transpose();
    upper.diagonal().setZero();
    kff_ += upper;
    kff_.prune(0.0);
    solver_.factorize(kff_);
  }

  ElasticSystem(const ElasticSystem&) = delete;
  ElasticSystem& operator=(const ElasticSystem&) = delete;

  /// Displacements satisfying the loads and all Dirichlet data.
  [[nodiscard]] DisplacementField solve() const {
    const Eigen::VectorXd uf = solver_.solve(rhs_);
    DisplacementField u(problem_->ndof());
    for (int d = 0; d < problem_->ndof(); ++d) {
      const int fi = free_index_[static_cast<std::size_t>(d)];
      u(d) = fi >= 0 ? uf(fi) : constrained_value_[static_cast<std::size_t>(d)];
    }
    return u;
  }

  /// Solves K_ff x_f = r_f for a full-length right-hand side; constrained entries of x are zero.
  [[nodiscard]] Eigen::VectorXd solve_adjoint(const Eigen::VectorXd& rhs_full) const {
    Eigen::VectorXd rf(static_cast<Eigen::Index>(free_dofs_.size()));
    for (std::size_t i = 0; i < free_dofs_.size(); ++i) rf(static_cast<Eigen::Index>(i)) = rhs_full(free_dofs_[i]);
    const Eigen::VectorXd xf = solver_.solve(rf);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(rhs_full.size());
    for (std::size_t i = 0; i < free_dofs_.size(); ++i) x(free_dofs_[i]) = xf(static_cast<Eigen::Index>(i));
    return x;
  }

  /// Relative residual of the reduced system for a full displacement vector.
  [[nodiscard]] double relative_residual(const DisplacementField& u) const {
    Eigen::VectorXd uf(static_cast<Eigen::Index>(free_dofs_.size()));
    for (std::size_t i = 0; i < free_dofs_.size(); ++i) uf(static_cast<Eigen::Index>(i)) = u(free_dofs_[i]);
    const double bn = rhs_.norm();
    return bn == 0.0 ? (kff_ * uf).norm() : (kff_ * uf - rhs_).norm() / bn;
  }

  [[nodiscard]] const std::vector<int>& free_dofs() const { return free_dofs_; }
  [[nodiscard]] bool is_free(int dof) const { return free_index_[static_cast<std::size_t>(dof)] >= 0; }

 private:
  const FeProblem* problem_;
  std::vector<int> free_dofs_;
  std::vector<int> free_index_;
  std::vector<double> constrained_value_;
  Eigen::VectorXd rhs_;
  SparseMatrix kff_;
  SpdSolver solver_;
};

/// Solve with one constitutive tensor per element (macro scale: homogenized cell tensors).
inline DisplacementField assemble_and_solve(const FeProblem& problem, std::span<const ConstitutiveTensor> tensors) {
  require(static_cast<long long>(tensors.size()) == problem.nel.count(), "need one tensor per element");
  ElasticSystem sys(problem, [&](int e) { return element_stiffness(tensors[static_cast<std::size_t>(e)]); });
  return sys.solve();
}

/// Solve with a scaled copy of one base element matrix per element (SIMP rasters).
inline DisplacementField assemble_and_solve(const FeProblem& problem, const Eigen::Ref<const Eigen::VectorXd>& scales,
                                            const ElementMatrix& base) {
  require(scales.size() == problem.nel.count(), "need one scale per element");
  ElasticSystem sys(problem, [&](int e) -> ElementMatrix { return scales(e) * base; });
  return sys.solve();
}

/// u^T K u summed element by element, the energy form of compliance.
template <class ElementFn>
double energy_norm(Dims nel, const DisplacementField& u, ElementFn&& element_matrix) {
  double s = 0.0;
  for (int ey = 0; ey < nel.y; ++ey)
    for (int ex = 0; ex < nel.x; ++ex) {
      const ElementVector ue = gather(u, element_dofs(nel, ex, ey));
      s += ue.dot(element_matrix(ey * nel.x + ex) * ue);
    }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Full-scale verification

/// Maps a macro problem onto a pixel mesh with `pitch` pixels per macro element and pixel-sized
/// unit elements. Lengths, displacements and forces all scale by the pitch, so pixel-mesh
/// displacements are in pixel units. Dirichlet data on macro edges is interpolated linearly onto
/// the intermediate pixel nodes; boundary point loads are spread with tent weights along the edge.
inline FeProblem scale_problem(const FeProblem& macro, int pitch) {
  require(pitch >= 1, "pitch must be >= 1");
  macro.validate();
  const Dims mn = macro.nel;
  FeProblem fine;
  fine.nel = {mn.x * pitch, mn.y * pitch};
  const double m = pitch;
  const int n = macro.ndof();

  std::vector<int> kind(static_cast<std::size_t>(n), 0);  // 0 free, 1 fixed, 2 prescribed
  std::vector<double> val(static_cast<std::size_t>(n), 0.0);
  for (int d : macro.fixed_dofs) kind[static_cast<std::size_t>(d)] = 1;
  for (const auto& p : macro.prescribed) {
    kind[static_cast<std::size_t>(p.dof)] = 2;
    val[static_cast<std::size_t>(p.dof)] = p.value;
  }
  std::vector<int> fine_kind(static_cast<std::size_t>(fine.ndof()), 0);
  std::vector<double> fine_val(static_cast<std::size_t>(fine.ndof()), 0.0);
  auto set = [&](int fi, int fj, int comp, int k, double v) {
    const auto d = static_cast<std::size_t>(2 * node_id(fine.nel, fi, fj) + comp);
    if (k > fine_kind[d]) fine_kind[d] = k;
    if (k == 2) fine_val[d] = v;
  };
  for (int j = 0; j <= mn.y; ++j)
    for (int i = 0; i <= mn.x; ++i)
      for (int c = 0; c < 2; ++c) {
        const auto d = static_cast<std::size_t>(2 * node_id(mn, i, j) + c);
        if (kind[d]) set(i * pitch, j * pitch, c, kind[d], val[d] * m);
      }
  // Interpolate along macro element edges whose two end nodes share a constraint.
  auto edge = [&](int i0, int j0, int di, int dj) {
    for (int c = 0; c < 2; ++c) {
      const auto a = static_cast<std::size_t>(2 * node_id(mn, i0, j0) + c);
      const auto b = static_cast<std::size_t>(2 * node_id(mn, i0 + di, j0 + dj) + c);
      if (!kind[a] || !kind[b]) continue;
      const int k = std::max(kind[a], kind[b]);
      for (int t = 1; t < pitch; ++t) {
        const double s = static_cast<double>(t) / pitch;
        set(i0 * pitch + di * t, j0 * pitch + dj * t, c, k, ((1 - s) * val[a] + s * val[b]) * m);
      }
    }
  };
  for (int j = 0; j <= mn.y; ++j)
    for (int i = 0; i < mn.x; ++i) edge(i, j, 1, 0);
  for (int j = 0; j < mn.y; ++j)
    for (int i = 0; i <= mn.x; ++i) edge(i, j, 0, 1);
  for (int d = 0; d < fine.ndof(); ++d) {
    if (fine_kind[static_cast<std::size_t>(d)] == 1) fine.fixed_dofs.push_back(d);
    if (fine_kind[static_cast<std::size_t>(d)] == 2) fine.prescribed.push_back({d, fine_val[static_cast<std::size_t>(d)]});
  }

  for (const auto& l : macro.loads) {
    const int node = l.dof / 2, comp = l.dof % 2;
    const int i = node % (mn.x + 1), j = node / (mn.x + 1);
    const bool on_x_edge = (j == 0 || j == mn.y), on_y_edge = (i == 0 || i == mn.x);
    std::vector<std::pair<int, double>> spread;  // fine node id, weight
    if (on_x_edge || on_y_edge) {
      std::vector<std::pair<int, int>> pts;
      auto tent = [&](int fi, int fj, int dist) {
        if (fi < 0 || fj < 0 || fi > fine.nel.x || fj > fine.nel.y) return;
        spread.emplace_back(node_id(fine.nel, fi, fj), 1.0 - static_cast<double>(dist) / pitch);
      };
      tent(i * pitch, j * pitch, 0);
      for (int t = 1; t < pitch; ++t) {
        if (on_x_edge) {
          tent(i * pitch + t, j * pitch, t);
          tent(i * pitch - t, j * pitch, t);
        }
        if (on_y_edge) {
          tent(i * pitch, j * pitch + t, t);
          tent(i * pitch, j * pitch - t, t);
        }
      }
    } else {
      spread.emplace_back(node_id(fine.nel, i * pitch, j * pitch), 1.0);
    }
    double wsum = 0.0;
    for (const auto& s : spread) wsum += s.second;
    for (const auto& s : spread) fine.loads.push_back({2 * s.first + comp, l.value * m * s.second / wsum});
  }
  return fine;
}

/// Macro DOF -> pixel-mesh DOF for a given pitch.
inline int scale_dof(Dims macro_nel, int dof, int pitch) {
  const int node = dof / 2, comp = dof % 2;
  const int i = node % (macro_nel.x + 1), j = node / (macro_nel.x + 1);
  const Dims fine{macro_nel.x * pitch, macro_nel.y * pitch};
  return 2 * node_id(fine, i * pitch, j * pitch) + comp;
}

struct FullScaleReport {
  double rmse = 0.0;               // pixel units
  double rmse_macro_units = 0.0;   // divided by the pitch
  double mean_signed_error = 0.0;  // mean of sign(u_t) (u - u_t): negative = smaller than target
  double relative_residual = 0.0;
  DisplacementField u;             // pixel mesh, pixel units
};

/// One SIMP element per pixel of `design`, solved on `problem` (already at pixel resolution);
/// errors are taken over the DOFs where `mask` is nonzero. `pitch` converts pixel units back to
/// macro units for the secondary RMSE.
inline FullScaleReport full_scale_verify(const RenderedDesign& design, const FeProblem& problem,
                                         const DisplacementField& target, const Eigen::VectorXd& mask,
                                         const Material& material, double p, double c0, double pitch = 1.0) {
  require(design.size == problem.nel, "design raster dims must match the problem's element dims");
  require(target.size() == problem.ndof() && mask.size() == problem.ndof(), "target/mask length mismatch");
  const Eigen::Map<const Eigen::VectorXd> rho(design.raster.data(), static_cast<Eigen::Index>(design.raster.size()));
  const Eigen::VectorXd scales = simp_interpolate(rho, p, c0);
  const ElementMatrix base = element_stiffness(material);
  FullScaleReport rep;
  try {
    ElasticSystem sys(problem, [&](int e) -> ElementMatrix { return scales(e) * base; });
    rep.u = sys.solve();
    rep.relative_residual = sys.relative_residual(rep.u);
  } catch (const NumericalError& err) {
    throw DisconnectedStructure(std::string("full-scale system is singular; the structure is likely disconnected: ") +
                                err.what());
  }
  double sq = 0.0, signed_sum = 0.0, tmax = 0.0;
  int count = 0;
  for (Eigen::Index d = 0; d < mask.size(); ++d)
    if (mask(d) != 0.0) tmax = std::max(tmax, std::abs(target(d)));
  // Round-off targets (e.g. 1e-17 where the exact value is 0) carry no direction.
  const double zero = 1e-9 * tmax;
  for (Eigen::Index d = 0; d < mask.size(); ++d) {
    if (mask(d) == 0.0) continue;
    const double diff = rep.u(d) - target(d);
    sq += diff * diff;
    signed_sum += (target(d) > zero ? 1.0 : target(d) < -zero ? -1.0 : 0.0) * diff;
    ++count;
  }
  require(count > 0, "mask selects no DOFs");
  rep.rmse = std::sqrt(sq / count);
  rep.mean_signed_error = signed_sum / count;
  rep.rmse_macro_units = rep.rmse / pitch;
  return rep;
}

}  // namespace metanet
