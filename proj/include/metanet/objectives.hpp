#pragma once

// Loss terms and their gradients with respect to micro densities (and, for the boundary term, the
// densities of extra strip samples).

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metanet/common.hpp"
#include "metanet/fea.hpp"
#include "metanet/homogenization.hpp"
#include "metanet/neural_field.hpp"

namespace metanet {

struct CellParams {
  Material material;
  double penal = 3.0;
  double c0 = 1e-9;
};

/// One micro raster per macro cell plus everything homogenization derives from it.
struct CellGrid {
  Dims macro;
  Dims micro;
  std::vector<Eigen::VectorXd> rho;                   // per macro cell, micro-raster order
  std::vector<std::uint8_t> passive;                  // per macro cell; passive cells are void
  std::vector<ConstitutiveTensor> tensors;            // homogenized, per macro cell
  std::vector<std::vector<Eigen::Matrix3d>> dtensor;  // dE^H/drho_e, per macro cell

  [[nodiscard]] std::size_t size() const { return rho.size(); }
  [[nodiscard]] bool is_passive(std::size_t c) const { return !passive.empty() && passive[c] != 0; }
};

/// Per-cell gradient with respect to micro densities.
using CellGradient = std::vector<Eigen::VectorXd>;

inline CellGradient zero_gradient(const CellGrid& cells) {
  CellGradient g(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) g[c] = Eigen::VectorXd::Zero(cells.rho[c].size());
  return g;
}

inline void axpy(CellGradient& acc, double a, const CellGradient& g) {
  if (a == 0.0) return;
  for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += a * g[c];
}

/// Splits a cell-major density vector into a grid.
inline CellGrid make_cell_grid(Dims macro, Dims micro, const Eigen::VectorXd& rho,
                               std::vector<std::uint8_t> passive = {}) {
  const auto n = static_cast<Eigen::Index>(micro.count());
  require(rho.size() == n * macro.count(), "density vector does not match macro x micro dims");
  CellGrid g;
  g.macro = macro;
  g.micro = micro;
  g.passive = std::move(passive);
  require(g.passive.empty() || static_cast<long long>(g.passive.size()) == macro.count(), "passive mask size mismatch");
  for (Eigen::Index c = 0; c < macro.count(); ++c) g.rho.emplace_back(rho.segment(c * n, n));
  return g;
}

/// Homogenizes every active cell (concurrently when workers are available). Passive cells get the
/// ersatz tensor c0 * E0 and zero sensitivity.
inline void homogenize_grid(CellGrid& cells, const CellParams& params, unsigned workers = worker_count()) {
  const std::size_t n = cells.size();
  cells.tensors.assign(n, ConstitutiveTensor::Zero());
  cells.dtensor.assign(n, {});
  const ConstitutiveTensor d0 = plane_stress_tensor(params.material);
  parallel_ranges(
      n,
      [&](unsigned, std::size_t b, std::size_t e) {
        CellHomogenizer h(cells.micro, params.material);
        for (std::size_t c = b; c < e; ++c) {
          if (cells.is_passive(c)) {
            cells.tensors[c] = params.c0 * d0;
            cells.dtensor[c].assign(static_cast<std::size_t>(cells.micro.count()), Eigen::Matrix3d::Zero());
            continue;
          }
          const UnitCell cell{cells.micro, cells.rho[c], params.material, params.penal, params.c0};
          const auto res = h.homogenize(cell, "cell " + std::to_string(c));
          cells.tensors[c] = res.tensor;
          cells.dtensor[c] = sensitivity(cell, res);
        }
      },
      workers);
}

/// Chains dL/dE^H (one 3x3 per macro cell) to micro densities.
inline CellGradient chain_tensor_gradient(const CellGrid& cells, std::span<const Eigen::Matrix3d> dl_dtensor) {
  CellGradient g = zero_gradient(cells);
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& dt = cells.dtensor[c];
    for (std::size_t e = 0; e < dt.size(); ++e) g[c](static_cast<Eigen::Index>(e)) = (dl_dtensor[c].array() * dt[e].array()).sum();
  }
  return g;
}

// ---------------------------------------------------------------------------------------------
// Structural terms

struct StructuralTerm {
  double value = 0.0;
  CellGradient gradient;
  DisplacementField u;
};

/// Compliance of the macro structure built from all-solid cells; the normalizer for compliance_loss.
inline double compliance_baseline(const FeProblem& problem, const CellParams& params,
                                  std::span<const std::uint8_t> passive = {}) {
  const ConstitutiveTensor d0 = plane_stress_tensor(params.material);
  std::vector<ConstitutiveTensor> t(static_cast<std::size_t>(problem.nel.count()), d0);
  for (std::size_t c = 0; c < passive.size(); ++c)
    if (passive[c]) t[c] = params.c0 * d0;
  const auto u = assemble_and_solve(problem, t);
  return compliance(u, problem.loads);
}

/// c / c_0 with gradient -u_e^T (dk_e/dE^H) u_e chained through the homogenization sensitivity.
inline StructuralTerm compliance_loss(const CellGrid& cells, const FeProblem& problem, std::optional<double> baseline) {
  if (!baseline) throw InvalidArgument("compliance_loss needs the c_0 baseline");
  require(*baseline > 0.0, "compliance baseline must be positive");
  require(problem.nel == cells.macro, "macro problem dims must match the cell grid");
  StructuralTerm out;
  ElasticSystem sys(problem, [&](int e) { return element_stiffness(cells.tensors[static_cast<std::size_t>(e)]); });
  out.u = sys.solve();
  out.value = compliance(out.u, problem.loads) / *baseline;
  std::vector<Eigen::Matrix3d> dl(cells.size());
  for (int ey = 0; ey < problem.nel.y; ++ey)
    for (int ex = 0; ex < problem.nel.x; ++ex) {
      const ElementVector ue = gather(out.u, element_dofs(problem.nel, ex, ey));
      dl[static_cast<std::size_t>(ey * problem.nel.x + ex)] = -strain_product(ue, ue) / *baseline;
    }
  out.gradient = chain_tensor_gradient(cells, dl);
  return out;
}

/// ||mask o (u - u_t)||^2 with one adjoint solve lambda = K^-1 (mask^2 o (u - u_t)) and
/// dF/dE^H_e = -2 lambda_e^T (dk_e/dE^H) u_e.
inline StructuralTerm displacement_match_loss(const CellGrid& cells, const FeProblem& problem,
                                              const DisplacementField& target, const Eigen::VectorXd& mask) {
  require(problem.nel == cells.macro, "macro problem dims must match the cell grid");
  require(target.size() == problem.ndof() && mask.size() == problem.ndof(), "target/mask must span the macro DOFs");
  if (mask.cwiseAbs().maxCoeff() == 0.0) throw InvalidArgument("displacement mask is all zero");
  StructuralTerm out;
  ElasticSystem sys(problem, [&](int e) { return element_stiffness(cells.tensors[static_cast<std::size_t>(e)]); });
  out.u = sys.solve();
  const Eigen::VectorXd r = mask.cwiseProduct(out.u - target);
  out.value = r.squaredNorm();
  const Eigen::VectorXd lambda = sys.solve_adjoint(mask.cwiseProduct(r));
  std::vector<Eigen::Matrix3d> dl(cells.size());
  for (int ey = 0; ey < problem.nel.y; ++ey)
    for (int ex = 0; ex < problem.nel.x; ++ex) {
      const auto dofs = element_dofs(problem.nel, ex, ey);
      dl[static_cast<std::size_t>(ey * problem.nel.x + ex)] = -2.0 * strain_product(gather(lambda, dofs), gather(out.u, dofs));
    }
  out.gradient = chain_tensor_gradient(cells, dl);
  return out;
}

/// Root mean square of (u - u_t) over DOFs with a nonzero mask.
inline double rmse(const Eigen::VectorXd& u, const Eigen::VectorXd& target, const Eigen::VectorXd& mask) {
  require(u.size() == target.size() && u.size() == mask.size(), "rmse: length mismatch");
  double s = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < u.size(); ++i)
    if (mask(i) != 0.0) {
      s += (u(i) - target(i)) * (u(i) - target(i));
      ++n;
    }
  if (n == 0) throw InvalidArgument("rmse: mask selects nothing");
  return std::sqrt(s / n);
}

// ---------------------------------------------------------------------------------------------
// Per-cell terms

struct BulkObjective {
  double value = 0.0;       // c_i = -(E11 + E12 + E21 + E22)
  double normalized = 0.0;  // c_i / c_{0,i}; 1 for the solid cell
  Eigen::VectorXd d_normalized;  // d(c_i / c_{0,i}) / drho_e
};

/// c_{0,i}: the bulk objective of the fully solid cell.
inline double solid_bulk_objective(const Material& m) {
  const auto d = plane_stress_tensor(m);
  return -(d(0, 0) + d(0, 1) + d(1, 0) + d(1, 1));
}

inline BulkObjective bulk_objective(const ConstitutiveTensor& tensor, std::span<const Eigen::Matrix3d> dtensor,
                                    const Material& m) {
  BulkObjective out;
  out.value = -(tensor(0, 0) + tensor(0, 1) + tensor(1, 0) + tensor(1, 1));
  const double c0i = solid_bulk_objective(m);
  out.normalized = out.value / c0i;
  out.d_normalized.resize(static_cast<Eigen::Index>(dtensor.size()));
  for (std::size_t e = 0; e < dtensor.size(); ++e) {
    const auto& d = dtensor[e];
    out.d_normalized(static_cast<Eigen::Index>(e)) = -(d(0, 0) + d(0, 1) + d(1, 0) + d(1, 1)) / c0i;
  }
  return out;
}

struct GridTerm {
  double value = 0.0;
  CellGradient gradient;
};

/// Bulk term minimized during training: mean over active cells of -(c_i / c_{0,i}).
inline GridTerm bulk_term(const CellGrid& cells, const Material& m) {
  GridTerm out{0.0, zero_gradient(cells)};
  std::size_t active = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) active += cells.is_passive(c) ? 0 : 1;
  if (active == 0) return out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (cells.is_passive(c)) continue;
    const auto b = bulk_objective(cells.tensors[c], cells.dtensor[c], m);
    out.value -= b.normalized / static_cast<double>(active);
    out.gradient[c] = -b.d_normalized / static_cast<double>(active);
  }
  return out;
}

struct VolumeTerm {
  double value = 0.0;
  CellGradient gradient;
  std::vector<double> per_cell_volume;
};

/// Mean over active cells of (V_i / V*_i - 1)^2, V_i the mean micro density.
inline VolumeTerm volume_penalty(const CellGrid& cells, std::span<const double> targets) {
  require(targets.size() == cells.size(), "need one volume target per cell");
  VolumeTerm out{0.0, zero_gradient(cells), std::vector<double>(cells.size(), 0.0)};
  std::size_t active = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out.per_cell_volume[c] = cells.rho[c].mean();
    if (!cells.is_passive(c)) {
      require(targets[c] > 0.0 && targets[c] <= 1.0, "volume target must lie in (0, 1]");
      ++active;
    }
  }
  if (active == 0) return out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (cells.is_passive(c)) continue;
    const double ratio = out.per_cell_volume[c] / targets[c] - 1.0;
    out.value += ratio * ratio / static_cast<double>(active);
    const double g = 2.0 * ratio / (targets[c] * static_cast<double>(cells.rho[c].size()) * static_cast<double>(active));
    out.gradient[c].setConstant(g);
  }
  return out;
}

/// Mean absolute deviation from `base` over the micro rasters of band cells.
inline GridTerm base_cell_l1(const CellGrid& cells, const Eigen::VectorXd& base, std::span<const std::uint8_t> band) {
  require(base.size() == cells.micro.count(), "base cell raster does not match micro dims");
  require(band.size() == cells.size(), "band mask needs one entry per cell");
  GridTerm out{0.0, zero_gradient(cells)};
  std::size_t nb = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) nb += band[c] ? 1 : 0;
  if (nb == 0) return out;
  const double scale = 1.0 / (static_cast<double>(nb) * static_cast<double>(base.size()));
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (!band[c]) continue;
    const Eigen::ArrayXd diff = cells.rho[c].array() - base.array();
    out.value += diff.abs().sum() * scale;
    out.gradient[c] = (diff.sign() * scale).matrix();
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Boundary compatibility

/// Extra network samples for the compatibility loss: for every evaluated (sub)cell A with a right
/// (top) lattice neighbor B, B's left column (bottom row) of elements is evaluated at B's own
/// global coordinate and compared with A's right column (top row).
struct BoundaryPlan {
  CoordinateBatch right;           // centers = right neighbors, local = left-column points
  CoordinateBatch top;             // centers = top neighbors, local = bottom-row points
  std::vector<std::size_t> right_src;  // evaluated center owning each right edge
  std::vector<std::size_t> top_src;

  [[nodiscard]] std::size_t edge_count() const { return right_src.size() + top_src.size(); }
};

inline BoundaryPlan plan_boundary(const CoordinateBatch& main, Dims macro, Dims micro, int upsample,
                                  std::span<const std::uint8_t> passive = {}) {
  BoundaryPlan plan;
  for (int ey = 0; ey < micro.y; ++ey) plan.right.local.push_back({0.5 / micro.x - 0.5, (ey + 0.5) / micro.y - 0.5});
  for (int ex = 0; ex < micro.x; ++ex) plan.top.local.push_back({(ex + 0.5) / micro.x - 0.5, 0.5 / micro.y - 0.5});
  const int lx = macro.x * upsample, ly = macro.y * upsample;
  auto is_passive = [&](int gx, int gy) {
    if (passive.empty()) return false;
    return passive[static_cast<std::size_t>((gy / upsample) * macro.x + gx / upsample)] != 0;
  };
  for (std::size_t c = 0; c < main.centers.size(); ++c) {
    const auto pos = main.lattice[c];
    if (is_passive(pos.x, pos.y)) continue;
    auto add = [&](CoordinateBatch& b, std::vector<std::size_t>& src, int gx, int gy) {
      if (gx >= lx || gy >= ly || is_passive(gx, gy)) return;
      b.centers.push_back(global_center(macro, upsample, gx, gy));
      b.cell_index.push_back((gy / upsample) * macro.x + gx / upsample);
      b.subcell.push_back({gx % upsample, gy % upsample});
      b.lattice.push_back({gx, gy});
      src.push_back(c);
    };
    add(plan.right, plan.right_src, pos.x + 1, pos.y);
    add(plan.top, plan.top_src, pos.x, pos.y + 1);
  }
  return plan;
}

struct BoundaryTerm {
  double value = 0.0;
  Eigen::VectorXd d_main;   // per main batch row
  Eigen::VectorXd d_right;  // per plan.right row
  Eigen::VectorXd d_top;    // per plan.top row
};

/// Mean over edges of the mean squared density difference across the edge.
inline BoundaryTerm boundary_loss(const BoundaryPlan& plan, Dims micro, const Eigen::VectorXd& main_rho,
                                  const Eigen::VectorXd& right_rho, const Eigen::VectorXd& top_rho) {
  BoundaryTerm out;
  out.d_main = Eigen::VectorXd::Zero(main_rho.size());
  out.d_right = Eigen::VectorXd::Zero(right_rho.size());
  out.d_top = Eigen::VectorXd::Zero(top_rho.size());
  const std::size_t edges = plan.edge_count();
  if (edges == 0) return out;
  const auto nl = static_cast<Eigen::Index>(micro.count());
  const double inv_edges = 1.0 / static_cast<double>(edges);
  for (std::size_t k = 0; k < plan.right_src.size(); ++k) {
    const auto src = static_cast<Eigen::Index>(plan.right_src[k]);
    for (int ey = 0; ey < micro.y; ++ey) {
      const Eigen::Index ia = src * nl + ey * micro.x + (micro.x - 1);
      const Eigen::Index ib = static_cast<Eigen::Index>(k) * micro.y + ey;
      const double diff = main_rho(ia) - right_rho(ib);
      out.value += diff * diff * inv_edges / micro.y;
      out.d_main(ia) += 2.0 * diff * inv_edges / micro.y;
      out.d_right(ib) -= 2.0 * diff * inv_edges / micro.y;
    }
  }
  for (std::size_t k = 0; k < plan.top_src.size(); ++k) {
    const auto src = static_cast<Eigen::Index>(plan.top_src[k]);
    for (int ex = 0; ex < micro.x; ++ex) {
      const Eigen::Index ia = src * nl + (micro.y - 1) * micro.x + ex;
      const Eigen::Index ib = static_cast<Eigen::Index>(k) * micro.x + ex;
      const double diff = main_rho(ia) - top_rho(ib);
      out.value += diff * diff * inv_edges / micro.x;
      out.d_main(ia) += 2.0 * diff * inv_edges / micro.x;
      out.d_top(ib) -= 2.0 * diff * inv_edges / micro.x;
    }
  }
  return out;
}

struct NetworkBoundaryTerm {
  double value = 0.0;
  Eigen::VectorXd d_main;       // dL/drho for the main batch rows
  NetworkGradients strip_grads; // contribution of the neighbor strip samples
};

/// Compatibility loss for a network: evaluates the neighbor strips and returns the gradient with
/// respect to the main batch densities plus the strip contribution already pushed through the net.
inline NetworkBoundaryTerm boundary_loss(const TopologyNetwork& net, const CoordinateBatch& main,
                                         const Eigen::VectorXd& main_rho, Dims macro, Dims micro, int upsample,
                                         std::span<const std::uint8_t> passive = {}) {
  const auto plan = plan_boundary(main, macro, micro, upsample, passive);
  const Eigen::VectorXd rr = forward(net, plan.right);
  const Eigen::VectorXd tr = forward(net, plan.top);
  const auto term = boundary_loss(plan, micro, main_rho, rr, tr);
  NetworkBoundaryTerm out{term.value, term.d_main, NetworkGradients::zeros_like(net)};
  if (plan.right.rows() > 0) out.strip_grads += backward(net, plan.right, term.d_right);
  if (plan.top.rows() > 0) out.strip_grads += backward(net, plan.top, term.d_top);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Combination

enum class ObjectiveMode { Compliance, Displacement, BulkOnly };

inline std::string to_string(ObjectiveMode m) {
  switch (m) {
    case ObjectiveMode::Compliance: return "compliance";
    case ObjectiveMode::Displacement: return "displacement";
    case ObjectiveMode::BulkOnly: return "bulk_only";
  }
  return "?";
}

struct LossWeights {
  double alpha = 1.0;
  double alpha_max = 50.0;
  double bc_scale = 0.1;
  double l2_weight = 1e-5;
  double l1_base_weight = 0.0;
  double bulk_multiplier = 1.0;

  void validate() const {
    require(alpha >= 0 && alpha_max >= 0 && bc_scale >= 0 && l2_weight >= 0 && l1_base_weight >= 0 &&
                bulk_multiplier >= 0,
            "loss weights must be non-negative");
    require(alpha <= alpha_max, "alpha must not exceed alpha_max");
  }
};

/// Raw (unweighted) loss terms of one evaluation.
struct LossParts {
  std::optional<double> compliance;  // c / c_0
  std::optional<double> mismatch;    // ||mask o (u - u_t)||^2
  std::optional<double> bulk;        // mean of -(c_i / c_{0,i})
  double volume = 0.0;
  double boundary = 0.0;
  double base_l1 = 0.0;
  double weight_sq = 0.0;            // sum of W^2
  std::optional<double> rmse;
  std::vector<double> per_cell_volume;
};

/// Multipliers applied to each raw part; the same numbers scale the gradients.
struct LossCoefficients {
  double compliance = 0.0;
  double mismatch = 0.0;
  double bulk = 0.0;
  double volume = 0.0;
  double boundary = 0.0;
  double base_l1 = 0.0;
  double weight_sq = 0.0;
};

inline LossCoefficients loss_coefficients(const LossWeights& w, ObjectiveMode mode) {
  LossCoefficients k;
  k.volume = w.alpha;
  k.boundary = w.bc_scale * w.alpha;
  k.weight_sq = w.l2_weight;
  switch (mode) {
    case ObjectiveMode::Compliance: k.compliance = 1.0; break;
    case ObjectiveMode::Displacement:
      k.bulk = w.bulk_multiplier;
      k.mismatch = w.alpha;
      k.base_l1 = w.l1_base_weight;
      break;
    case ObjectiveMode::BulkOnly: k.bulk = w.bulk_multiplier; break;
  }
  return k;
}

struct LossReport {
  double total = 0.0;
  double structural = 0.0;      // weighted objective terms (compliance, or bulk + mismatch + base L1)
  double volume = 0.0;          // alpha * volume penalty
  double boundary = 0.0;        // bc_scale * alpha * boundary loss
  double regularization = 0.0;  // l2_weight * sum W^2
  double alpha = 0.0;
  std::vector<double> per_cell_volume;
  std::optional<double> rmse;
  LossParts parts;
};

inline LossReport combine(const LossParts& parts, const LossWeights& weights, ObjectiveMode mode) {
  weights.validate();
  const auto k = loss_coefficients(weights, mode);
  auto need = [](const std::optional<double>& v, const char* what) {
    if (!v) throw InvalidArgument(std::string("combine: mode needs the ") + what + " term");
    return *v;
  };
  LossReport r;
  switch (mode) {
    case ObjectiveMode::Compliance: r.structural = k.compliance * need(parts.compliance, "compliance"); break;
    case ObjectiveMode::Displacement:
      r.structural = k.bulk * need(parts.bulk, "bulk") + k.mismatch * need(parts.mismatch, "mismatch") +
                     k.base_l1 * parts.base_l1;
      break;
    case ObjectiveMode::BulkOnly: r.structural = k.bulk * need(parts.bulk, "bulk"); break;
  }
  r.volume = k.volume * parts.volume;
  r.boundary = k.boundary * parts.boundary;
  r.regularization = k.weight_sq * parts.weight_sq;
  r.total = r.structural + r.volume + r.boundary + r.regularization;
  r.alpha = weights.alpha;
  r.per_cell_volume = parts.per_cell_volume;
  r.rmse = parts.rmse;
  r.parts = parts;
  return r;
}

/// Linear continuation from 1 to alpha_max over the first `ramp_fraction` of the epochs.
inline double alpha_schedule(int epoch, int epochs, double alpha_max, double ramp_fraction = 0.5) {
  const double ramp = ramp_fraction * epochs;
  if (ramp <= 0.0) return alpha_max;
  const double t = std::min(1.0, epoch / ramp);
  return 1.0 + (alpha_max - 1.0) * t;
}

}  // namespace metanet
