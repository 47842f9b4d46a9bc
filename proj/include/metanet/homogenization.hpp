#pragma once

// Energy-based homogenization of periodic unit cells.
//
// For each unit test strain eps0_i (Voigt 11, 22, 12) the periodic fluctuation chi_i solves
//   K chi_i = sum_e k_e chi0_i,
// where chi0_i is the element displacement of the uniform strain. With corrected element fields
// d_i = chi0_i - chi_i the effective tensor is
//   E^H_ij = 1/|Y| sum_e s(rho_e) d_i^T k0 d_j,
// and, because the form is self-adjoint, dE^H_ij/drho_e = 1/|Y| s'(rho_e) d_i^T k0 d_j.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "metanet/common.hpp"
#include "metanet/fea.hpp"

namespace metanet {

/// Micro-scale design of one cell: n.x-by-n.y element densities, row-major with y up.
struct UnitCell {
  Dims n;
  Eigen::VectorXd rho;
  Material material;
  double penal = 3.0;
  double c0 = 1e-9;

  void validate() const {
    require(n.x >= 2 && n.y >= 2, "unit cell needs at least 2x2 elements");
    require(rho.size() == n.count(), "density raster size does not match cell dims");
    for (Eigen::Index e = 0; e < rho.size(); ++e) require(rho(e) >= 0.0 && rho(e) <= 1.0, "cell density outside [0, 1]");
    material.validate();
    require(penal >= 1.0, "penalization exponent must be >= 1");
  }
};

struct HomogenizationResult {
  ConstitutiveTensor tensor = ConstitutiveTensor::Zero();
  /// Periodic fluctuation fields chi_i over the 2 * n.x * n.y periodic DOFs.
  std::array<Eigen::VectorXd, 3> test_displacements;
  /// Per element: d_i^T k0 d_j with the base material (unscaled by SIMP).
  std::vector<Eigen::Matrix3d> mutual_energy;
};

/// Reusable homogenization workspace for one cell resolution and material. Not thread-safe;
/// use one instance per worker.
class CellHomogenizer {
 public:
  CellHomogenizer(Dims n, const Material& material) : n_(n), ke0_(element_stiffness(material)) {
    require(n.x >= 2 && n.y >= 2, "unit cell needs at least 2x2 elements");
    const int nodes = n.x * n.y;
    ndof_ = 2 * nodes - 2;  // node 0 is pinned
    const auto ne = static_cast<std::size_t>(n.count());
    dofs_.resize(ne);
    for (int ey = 0; ey < n.y; ++ey)
      for (int ex = 0; ex < n.x; ++ex) {
        const std::array<int, 4> nd{periodic_node(ex, ey), periodic_node(ex + 1, ey), periodic_node(ex + 1, ey + 1),
                                    periodic_node(ex, ey + 1)};
        auto& d = dofs_[static_cast<std::size_t>(ey * n.x + ex)];
        for (int a = 0; a < 4; ++a)
          for (int c = 0; c < 2; ++c) {
            const int full = 2 * nd[static_cast<std::size_t>(a)] + c;
            d[static_cast<std::size_t>(2 * a + c)] = full < 2 ? -1 : full - 2;
          }
      }
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(ne * 36);
    for (const auto& d : dofs_)
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) {
          const int ra = d[static_cast<std::size_t>(a)], rb = d[static_cast<std::size_t>(b)];
          if (ra >= 0 && rb >= 0 && ra >= rb) trips.emplace_back(ra, rb, 1.0);
        }
    k_.resize(ndof_, ndof_);
    k_.setFromTriplets(trips.begin(), trips.end());
    k_.makeCompressed();
    slots_.resize(ne);
    for (std::size_t e = 0; e < ne; ++e) {
      const auto& d = dofs_[e];
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) {
          const int ra = d[static_cast<std::size_t>(a)], rb = d[static_cast<std::size_t>(b)];
          slots_[e][static_cast<std::size_t>(a * 8 + b)] = (ra >= 0 && rb >= 0 && ra >= rb) ? slot(ra, rb) : -1;
        }
    }
    ldlt_.analyzePattern(k_);
    for (int i = 0; i < 3; ++i) {
      chi0_[static_cast<std::size_t>(i)] = uniform_strain_displacement(Eigen::Vector3d::Unit(i));
      f0_[static_cast<std::size_t>(i)] = ke0_ * chi0_[static_cast<std::size_t>(i)];
    }
  }

  [[nodiscard]] Dims dims() const { return n_; }

  /// `label` names the cell in error messages.
  HomogenizationResult homogenize(const UnitCell& cell, const std::string& label = "cell") {
    cell.validate();
    require(cell.n == n_, "cell dims do not match the homogenizer");
    require(element_stiffness(cell.material) == ke0_, "cell material does not match the homogenizer");
    const auto ne = static_cast<std::size_t>(n_.count());
    const Eigen::VectorXd s = simp_interpolate(cell.rho, cell.penal, cell.c0);

    double* val = k_.valuePtr();
    std::fill(val, val + k_.nonZeros(), 0.0);
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(ndof_, 3);
    for (std::size_t e = 0; e < ne; ++e) {
      const double se = s(static_cast<Eigen::Index>(e));
      const auto& sl = slots_[e];
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) {
          const int idx = sl[static_cast<std::size_t>(a * 8 + b)];
          if (idx >= 0) val[idx] += se * ke0_(a, b);
        }
      const auto& d = dofs_[e];
      for (int a = 0; a < 8; ++a) {
        const int r = d[static_cast<std::size_t>(a)];
        if (r < 0) continue;
        for (int i = 0; i < 3; ++i) f(r, i) += se * f0_[static_cast<std::size_t>(i)](a);
      }
    }
    ldlt_.factorize(k_);
    bool ok = ldlt_.info() == Eigen::Success;
    if (ok) {
      const Eigen::VectorXd dd = ldlt_.vectorD();
      ok = dd.minCoeff() > 1e-14 * dd.cwiseAbs().maxCoeff();
    }
    if (!ok) throw NumericalError("periodic cell system is singular for " + label + " (entirely void cell?)");
    Eigen::MatrixXd chi = ldlt_.solve(f);
    refine(f, chi, label);

    HomogenizationResult res;
    for (int i = 0; i < 3; ++i) {
      auto& t = res.test_displacements[static_cast<std::size_t>(i)];
      t = Eigen::VectorXd::Zero(ndof_ + 2);
      t.tail(ndof_) = chi.col(i);
    }
    res.mutual_energy.resize(ne);
    const double area = static_cast<double>(n_.count());
    for (std::size_t e = 0; e < ne; ++e) {
      const auto& d = dofs_[e];
      Eigen::Matrix<double, 8, 3> corr;
      for (int i = 0; i < 3; ++i) {
        for (int a = 0; a < 8; ++a) {
          const int r = d[static_cast<std::size_t>(a)];
          corr(a, i) = chi0_[static_cast<std::size_t>(i)](a) - (r >= 0 ? chi(r, i) : 0.0);
        }
      }
      const Eigen::Matrix3d q = corr.transpose() * ke0_ * corr;
      res.mutual_energy[e] = q;
      res.tensor += s(static_cast<Eigen::Index>(e)) / area * q;
    }
    res.tensor = 0.5 * (res.tensor + res.tensor.transpose()).eval();
    return res;
  }

 private:
  [[nodiscard]] int periodic_node(int i, int j) const { return (j % n_.y) * n_.x + (i % n_.x); }

  [[nodiscard]] int slot(int row, int col) const {
    const int* inner = k_.innerIndexPtr();
    const int* outer = k_.outerIndexPtr();
    const int* pos = std::lower_bound(inner + outer[col], inner + outer[col + 1], row);
    return static_cast<int>(pos - inner);
  }

  void refine(const Eigen::MatrixXd& f, Eigen::MatrixXd& chi, const std::string& label) const {
    const auto kf = k_.selfadjointView<Eigen::Lower>();
    for (int i = 0; i < 3; ++i) {
      const double fn = f.col(i).norm();
      if (fn == 0.0) {
        chi.col(i).setZero();
        continue;
      }
      Eigen::VectorXd r = f.col(i) - kf * chi.col(i);
      for (int it = 0; it < 3 && r.norm() > kResidualTolerance * fn; ++it) {
        chi.col(i) += ldlt_.solve(r);
        r = f.col(i) - kf * chi.col(i);
      }
      if (!(r.norm() <= kResidualTolerance * fn))
        throw NumericalError("periodic cell solve missed the residual contract for " + label);
    }
  }

  Dims n_;
  ElementMatrix ke0_;
  int ndof_ = 0;
  std::vector<std::array<int, 8>> dofs_;
  std::vector<std::array<int, 64>> slots_;
  SparseMatrix k_;
  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt_;
  std::array<ElementVector, 3> chi0_;
  std::array<ElementVector, 3> f0_;
};

inline HomogenizationResult homogenize(const UnitCell& cell) {
  CellHomogenizer h(cell.n, cell.material);
  return h.homogenize(cell);
}

/// dE^H/drho_e for every element (each a symmetric 3x3).
inline std::vector<Eigen::Matrix3d> sensitivity(const UnitCell& cell, const HomogenizationResult& result) {
  require(result.mutual_energy.size() == static_cast<std::size_t>(cell.n.count()) && cell.rho.size() == cell.n.count(),
          "sensitivity: result does not belong to this cell");
  const double area = static_cast<double>(cell.n.count());
  std::vector<Eigen::Matrix3d> out(result.mutual_energy.size());
  for (std::size_t e = 0; e < out.size(); ++e)
    out[e] = simp_derivative(cell.rho(static_cast<Eigen::Index>(e)), cell.penal, cell.c0) / area * result.mutual_energy[e];
  return out;
}

/// Two-phase (solid/void) Hashin-Shtrikman upper bound on the 2D bulk modulus.
inline double hs_upper_bound(double volume_fraction, const Material& m) {
  require(volume_fraction > 0.0 && volume_fraction <= 1.0, "volume fraction must lie in (0, 1]");
  m.validate();
  const double k0 = m.youngs_modulus / (2.0 * (1.0 - m.poisson_ratio));
  const double g0 = m.youngs_modulus / (2.0 * (1.0 + m.poisson_ratio));
  return volume_fraction * k0 * g0 / ((1.0 - volume_fraction) * k0 + g0);
}

/// Plane bulk modulus (E11 + E12 + E21 + E22) / 4.
inline double bulk_modulus(const ConstitutiveTensor& t) { return (t(0, 0) + t(0, 1) + t(1, 0) + t(1, 1)) / 4.0; }

}  // namespace metanet
