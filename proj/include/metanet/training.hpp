#pragma once

// Optimization driver: per epoch, coordinates -> densities -> homogenization -> macro solve ->
// losses -> backprop -> Adam.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metanet/common.hpp"
#include "metanet/fea.hpp"
#include "metanet/homogenization.hpp"
#include "metanet/neural_field.hpp"
#include "metanet/objectives.hpp"

namespace metanet {

/// What the network is optimized against.
struct TrainProblem {
  Dims macro;
  Dims micro;
  CellParams params;
  FeProblem problem;                   // macro scale; unused in bulk_only mode
  DisplacementField target;            // displacement mode
  Eigen::VectorXd mask;                // displacement mode
  std::vector<double> volume_targets;  // per macro cell
  std::vector<std::uint8_t> passive;   // per macro cell, optional
  Eigen::VectorXd base_cell;           // optional L1 reference raster
  std::vector<std::uint8_t> band;      // cells tied to base_cell
  std::optional<double> compliance_baseline;
};

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 1e-3;
  int upsample = 1;
  std::uint64_t seed = 0;
  LossWeights weights;
  ObjectiveMode mode = ObjectiveMode::Displacement;
  double ramp_fraction = 0.5;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
    if (upsample < 1) throw InvalidArgument("upsample must be >= 1");
    if (ramp_fraction < 0.0 || ramp_fraction > 1.0) throw InvalidArgument("ramp_fraction must lie in [0, 1]");
    weights.validate();
  }
};

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  KernelMatrix m_kernels, v_kernels;
  Eigen::VectorXd m_weights, v_weights;
  std::int64_t step = 0;

  static AdamState for_network(const TopologyNetwork& net) {
    AdamState s;
    s.m_kernels = s.v_kernels = KernelMatrix::Zero(net.size(), 4);
    s.m_weights = s.v_weights = Eigen::VectorXd::Zero(net.size());
    return s;
  }
};

/// Subcell sampled in every macro cell at `epoch`: a row-major cycle over the upsample lattice.
inline std::vector<SubcellIndex> select_subcells(int epoch, Dims macro, int upsample) {
  require(upsample >= 1, "upsample must be >= 1");
  require(epoch >= 0, "epoch must be >= 0");
  const int k = epoch % (upsample * upsample);
  return std::vector<SubcellIndex>(static_cast<std::size_t>(macro.count()), SubcellIndex{k % upsample, k / upsample});
}

inline void adam_step(TopologyNetwork& net, AdamState& s, const NetworkGradients& g, double learning_rate) {
  if (s.m_kernels.rows() != net.size() || s.m_weights.size() != net.size() || g.d_kernels.rows() != net.size() ||
      g.d_weights.size() != net.size())
    throw InvalidArgument("adam_step: state/gradient shapes do not match the network");
  ++s.step;
  const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(s.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = AdamState::beta1 * m + (1.0 - AdamState::beta1) * grad;
    v = AdamState::beta2 * v + (1.0 - AdamState::beta2) * grad.cwiseProduct(grad);
    param.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::eps);
  };
  update(net.kernels, s.m_kernels, s.v_kernels, g.d_kernels);
  update(net.weights, s.m_weights, s.v_weights, g.d_weights);
}

struct EpochEvaluation {
  LossReport report;
  NetworkGradients gradients;
  CellGrid cells;
  DisplacementField u;  // macro displacement (empty in bulk_only mode)
};

/// Forward pass and full gradient of the combined loss at one epoch, without updating anything.
inline EpochEvaluation evaluate_epoch(const TopologyNetwork& net, const TrainProblem& tp, const TrainConfig& cfg,
                                      int epoch, double alpha) {
  const auto selector = select_subcells(epoch, tp.macro, cfg.upsample);
  const auto coords = build_coordinates(tp.macro, tp.micro, cfg.upsample, selector);
  const Eigen::VectorXd rho = forward(net, coords);

  EpochEvaluation ev;
  ev.cells = make_cell_grid(tp.macro, tp.micro, rho, tp.passive);
  homogenize_grid(ev.cells, tp.params);

  LossWeights w = cfg.weights;
  w.alpha = alpha;
  const auto k = loss_coefficients(w, cfg.mode);
  LossParts parts;
  CellGradient g = zero_gradient(ev.cells);

  switch (cfg.mode) {
    case ObjectiveMode::Compliance: {
      auto t = compliance_loss(ev.cells, tp.problem, tp.compliance_baseline);
      parts.compliance = t.value;
      axpy(g, k.compliance, t.gradient);
      ev.u = std::move(t.u);
      break;
    }
    case ObjectiveMode::Displacement: {
      auto t = displacement_match_loss(ev.cells, tp.problem, tp.target, tp.mask);
      parts.mismatch = t.value;
      parts.rmse = rmse(t.u, tp.target, tp.mask);
      axpy(g, k.mismatch, t.gradient);
      ev.u = std::move(t.u);
      const auto b = bulk_term(ev.cells, tp.params.material);
      parts.bulk = b.value;
      axpy(g, k.bulk, b.gradient);
      if (tp.base_cell.size() > 0 && !tp.band.empty()) {
        const auto l1 = base_cell_l1(ev.cells, tp.base_cell, tp.band);
        parts.base_l1 = l1.value;
        axpy(g, k.base_l1, l1.gradient);
      }
      break;
    }
    case ObjectiveMode::BulkOnly: {
      const auto b = bulk_term(ev.cells, tp.params.material);
      parts.bulk = b.value;
      axpy(g, k.bulk, b.gradient);
      break;
    }
  }

  const auto vol = volume_penalty(ev.cells, tp.volume_targets);
  parts.volume = vol.value;
  parts.per_cell_volume = vol.per_cell_volume;
  axpy(g, k.volume, vol.gradient);

  const auto bc = boundary_loss(net, coords, rho, tp.macro, tp.micro, cfg.upsample, tp.passive);
  parts.boundary = bc.value;
  parts.weight_sq = net.weights.squaredNorm();

  ev.report = combine(parts, w, cfg.mode);

  const auto nl = static_cast<Eigen::Index>(tp.micro.count());
  Eigen::VectorXd d_rho = k.boundary * bc.d_main;
  for (std::size_t c = 0; c < g.size(); ++c) d_rho.segment(static_cast<Eigen::Index>(c) * nl, nl) += g[c];
  ev.gradients = backward(net, coords, d_rho);
  if (k.boundary != 0.0) {
    ev.gradients.d_kernels += k.boundary * bc.strip_grads.d_kernels;
    ev.gradients.d_weights += k.boundary * bc.strip_grads.d_weights;
  }
  ev.gradients.d_weights += 2.0 * k.weight_sq * net.weights;
  return ev;
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  LossReport report;
};

struct TrainState {
  AdamState adam;
  int epoch = 0;  // epochs completed
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs epochs [state.epoch, cfg.epochs). Each record holds the loss evaluated before that epoch's
/// update. Numerical failures are rethrown with the epoch index prepended.
inline std::vector<EpochRecord> train(TopologyNetwork& net, TrainState& state, const TrainProblem& tp,
                                      const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (state.adam.m_weights.size() != net.size()) state.adam = AdamState::for_network(net);
  std::vector<EpochRecord> log;
  for (int e = state.epoch; e < cfg.epochs; ++e) {
    const double alpha = alpha_schedule(e, cfg.epochs, cfg.weights.alpha_max, cfg.ramp_fraction);
    EpochEvaluation ev;
    try {
      ev = evaluate_epoch(net, tp, cfg, e, alpha);
    } catch (const DisconnectedStructure& err) {
      throw DisconnectedStructure("epoch " + std::to_string(e + 1) + ": " + err.what());
    } catch (const NumericalError& err) {
      throw NumericalError("epoch " + std::to_string(e + 1) + ": " + err.what());
    }
    adam_step(net, state.adam, ev.gradients, cfg.learning_rate);
    state.epoch = e + 1;
    log.push_back({e + 1, std::move(ev.report)});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

inline TrainProblem with_baseline(TrainProblem tp, ObjectiveMode mode) {
  if (mode == ObjectiveMode::Compliance && !tp.compliance_baseline)
    tp.compliance_baseline = compliance_baseline(tp.problem, tp.params, tp.passive);
  return tp;
}

// ---------------------------------------------------------------------------------------------
// Logs and checkpoints

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_log_header(std::ostream& os) { os << "epoch,total,structural,volume,boundary,regularization,rmse,alpha\n"; }

inline void write_log_row(std::ostream& os, const EpochRecord& r) {
  const auto& p = r.report;
  os << r.epoch << ',' << format_real(p.total) << ',' << format_real(p.structural) << ',' << format_real(p.volume) << ','
     << format_real(p.boundary) << ',' << format_real(p.regularization) << ','
     << (p.rmse ? format_real(*p.rmse) : std::string()) << ',' << format_real(p.alpha) << '\n';
}

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'N', 'E', 'T', 'C', 'K', 'P', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("checkpoint is truncated");
  return v;
}
template <class M>
void put_block(std::ostream& os, const M& m) {
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}
template <class M>
void take_block(std::istream& is, M& m) {
  is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!is) throw ConfigError("checkpoint is truncated");
}

}  // namespace detail

struct Checkpoint {
  TopologyNetwork net;
  TrainState state;
  std::string provenance;
};

/// Raw little-endian doubles, so a save/load round trip is bit-exact.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path);
  using detail::put;
  os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  const auto& net = ck.net;
  put<std::int64_t>(os, net.size());
  detail::put_block(os, net.kernels);
  detail::put_block(os, net.weights);
  for (double s : net.input_scale) put(os, s);
  const auto& in = net.init;
  put<std::int32_t>(os, in.local_kernels_per_dim);
  put<std::int32_t>(os, in.global_kernels_per_dim);
  put(os, in.local_range);
  put(os, in.global_range);
  put(os, in.weight_init);
  const auto& a = ck.state.adam;
  require(a.m_weights.size() == net.size(), "checkpoint: Adam state does not match the network");
  detail::put_block(os, a.m_kernels);
  detail::put_block(os, a.v_kernels);
  detail::put_block(os, a.m_weights);
  detail::put_block(os, a.v_weights);
  put<std::int64_t>(os, a.step);
  put<std::int32_t>(os, ck.state.epoch);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.provenance.size()));
  os.write(ck.provenance.data(), static_cast<std::streamsize>(ck.provenance.size()));
  if (!os) throw ConfigError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path);
  using detail::take;
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, detail::kCheckpointMagic)) throw ConfigError(path + " is not a checkpoint");
  Checkpoint ck;
  const auto n = take<std::int64_t>(is);
  if (n <= 0 || n > (1 << 26)) throw ConfigError("checkpoint has an implausible kernel count");
  auto& net = ck.net;
  net.kernels.resize(n, 4);
  net.weights.resize(n);
  detail::take_block(is, net.kernels);
  detail::take_block(is, net.weights);
  for (double& s : net.input_scale) s = take<double>(is);
  net.init.local_kernels_per_dim = take<std::int32_t>(is);
  net.init.global_kernels_per_dim = take<std::int32_t>(is);
  net.init.local_range = take<std::array<double, 2>>(is);
  net.init.global_range = take<std::array<double, 2>>(is);
  net.init.weight_init = take<double>(is);
  auto& a = ck.state.adam;
  a = AdamState::for_network(net);
  detail::take_block(is, a.m_kernels);
  detail::take_block(is, a.v_kernels);
  detail::take_block(is, a.m_weights);
  detail::take_block(is, a.v_weights);
  a.step = take<std::int64_t>(is);
  ck.state.epoch = take<std::int32_t>(is);
  const auto len = take<std::uint32_t>(is);
  if (len > 4096) throw ConfigError("checkpoint provenance is too long");
  ck.provenance.resize(len);
  is.read(ck.provenance.data(), len);
  if (!is) throw ConfigError("checkpoint is truncated");
  return ck;
}

}  // namespace metanet
