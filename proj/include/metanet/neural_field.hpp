#pragma once

// Coordinate-based topology network: rho(X) = sigmoid( sum_k W_k sin(K_k . (s*X) + 1) )
// with X = (x, y, u, w): global cell coordinates followed by local element coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "metanet/common.hpp"

namespace metanet {

using KernelMatrix = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;
using Point4 = std::array<double, 4>;

/// Which subcell of a cell is sampled, in units of the upsampling lattice.
struct SubcellIndex {
  int x = 0;
  int y = 0;
  friend constexpr bool operator==(const SubcellIndex&, const SubcellIndex&) = default;
};

/// Tensor-product batch of network inputs: every center is paired with every local point.
/// Row r = c * local.size() + l carries (centers[c].x, centers[c].y, local[l].x, local[l].y).
struct CoordinateBatch {
  std::vector<Vec2> local;             // (u, w), one per micro element, row-major with y up
  std::vector<Vec2> centers;           // (x, y), one per emitted (sub)cell
  std::vector<int> cell_index;         // macro cell owning each center
  std::vector<SubcellIndex> subcell;   // position of the center inside its macro cell
  std::vector<Dims> lattice;           // global (sub)cell lattice position of each center

  [[nodiscard]] std::size_t rows() const { return local.size() * centers.size(); }
  [[nodiscard]] Point4 row(std::size_t r) const {
    const auto& c = centers[r / local.size()];
    const auto& l = local[r % local.size()];
    return {c.x, c.y, l.x, l.y};
  }
  [[nodiscard]] std::vector<Point4> materialize() const {
    std::vector<Point4> out(rows());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = row(r);
    return out;
  }
};

/// Element-center local coordinates of an nx-by-ny micro grid.
inline std::vector<Vec2> local_grid(Dims micro) {
  require(micro.x >= 1 && micro.y >= 1, "micro dims must be >= 1");
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(micro.count()));
  for (int ey = 0; ey < micro.y; ++ey)
    for (int ex = 0; ex < micro.x; ++ex)
      pts.push_back({(ex + 0.5) / micro.x - 0.5, (ey + 0.5) / micro.y - 0.5});
  return pts;
}

/// Global center of lattice position (gx, gy) when every macro cell is split upsample-by-upsample.
/// The longest macro axis spans [-0.5, 0.5]; the other is scaled by the aspect ratio.
inline Vec2 global_center(Dims macro, int upsample, int gx, int gy) {
  const double span = macro.longest();
  return {((gx + 0.5) / upsample - 0.5 * macro.x) / span, ((gy + 0.5) / upsample - 0.5 * macro.y) / span};
}

/// Element-center coordinates for a macro lattice. With `selector`, each macro cell emits the micro
/// grid of exactly one subcell; without it, every subcell is emitted (rendering mode).
inline CoordinateBatch build_coordinates(Dims macro, Dims micro, int upsample,
                                         const std::optional<std::vector<SubcellIndex>>& selector = std::nullopt) {
  require(macro.x >= 1 && macro.y >= 1, "macro dims must be >= 1");
  require(micro.x >= 1 && micro.y >= 1, "micro dims must be >= 1");
  require(upsample >= 1, "upsample must be >= 1");
  CoordinateBatch batch;
  batch.local = local_grid(micro);
  const auto ncell = static_cast<std::size_t>(macro.count());
  if (selector) {
    require(selector->size() == ncell, "subcell selector needs one entry per macro cell");
    for (const auto& s : *selector)
      require(s.x >= 0 && s.y >= 0 && s.x < upsample && s.y < upsample, "subcell selector out of range");
  }
  for (int cy = 0; cy < macro.y; ++cy) {
    for (int cx = 0; cx < macro.x; ++cx) {
      const int c = cy * macro.x + cx;
      auto emit = [&](SubcellIndex s) {
        const int gx = cx * upsample + s.x;
        const int gy = cy * upsample + s.y;
        batch.centers.push_back(global_center(macro, upsample, gx, gy));
        batch.cell_index.push_back(c);
        batch.subcell.push_back(s);
        batch.lattice.push_back({gx, gy});
      };
      if (selector) {
        emit((*selector)[static_cast<std::size_t>(c)]);
      } else {
        for (int sy = 0; sy < upsample; ++sy)
          for (int sx = 0; sx < upsample; ++sx) emit({sx, sy});
      }
    }
  }
  return batch;
}

/// Initialization recipe, kept with the network so checkpoints are self-describing.
struct NetworkInit {
  int local_kernels_per_dim = 10;
  int global_kernels_per_dim = 6;
  std::array<double, 2> local_range{-0.4, 0.4};
  std::array<double, 2> global_range{-0.6, 0.6};
  double weight_init = 0.1;
  friend bool operator==(const NetworkInit&, const NetworkInit&) = default;
};

struct TopologyNetwork {
  KernelMatrix kernels;     // n_k x 4, columns (x, y, u, w)
  Eigen::VectorXd weights;  // n_k
  std::array<double, 4> input_scale{1.0, 1.0, 1.0, 1.0};
  NetworkInit init;

  [[nodiscard]] Eigen::Index size() const { return weights.size(); }
};

struct NetworkGradients {
  KernelMatrix d_kernels;
  Eigen::VectorXd d_weights;

  static NetworkGradients zeros_like(const TopologyNetwork& net) {
    return {KernelMatrix::Zero(net.size(), 4), Eigen::VectorXd::Zero(net.size())};
  }
  NetworkGradients& operator+=(const NetworkGradients& o) {
    d_kernels += o.d_kernels;
    d_weights += o.d_weights;
    return *this;
  }
};

namespace detail {
inline std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
  return v;
}
inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }
}  // namespace detail

/// Tensor-product frequency grid. Ordering: local-u fastest, then local-w, global-x, global-y.
inline TopologyNetwork init_network(int local_kernels_per_dim, int global_kernels_per_dim,
                                    std::array<double, 2> local_range, std::array<double, 2> global_range,
                                    double weight_init) {
  require(local_kernels_per_dim >= 1 && global_kernels_per_dim >= 1, "kernel counts must be >= 1");
  const auto lf = detail::linspace(local_range[0], local_range[1], local_kernels_per_dim);
  const auto gf = detail::linspace(global_range[0], global_range[1], global_kernels_per_dim);
  const Eigen::Index n = static_cast<Eigen::Index>(lf.size() * lf.size() * gf.size() * gf.size());
  TopologyNetwork net;
  net.kernels.resize(n, 4);
  net.weights = Eigen::VectorXd::Constant(n, weight_init);
  Eigen::Index k = 0;
  for (double gy : gf)
    for (double gx : gf)
      for (double lw : lf)
        for (double lu : lf) net.kernels.row(k++) << gx, gy, lu, lw;
  net.init = {local_kernels_per_dim, global_kernels_per_dim, local_range, global_range, weight_init};
  return net;
}

inline TopologyNetwork init_network(const NetworkInit& cfg) {
  return init_network(cfg.local_kernels_per_dim, cfg.global_kernels_per_dim, cfg.local_range, cfg.global_range,
                      cfg.weight_init);
}

/// Scale that expresses local coordinates in elements and global coordinates in macro cells.
inline std::array<double, 4> element_unit_scale(Dims macro, Dims micro) {
  const double g = macro.longest();
  return {g, g, static_cast<double>(micro.x), static_cast<double>(micro.y)};
}

namespace detail {

inline void check_finite(const CoordinateBatch& coords) {
  for (const auto& p : coords.local) require(std::isfinite(p.x) && std::isfinite(p.y), "non-finite local coordinate");
  for (const auto& p : coords.centers)
    require(std::isfinite(p.x) && std::isfinite(p.y), "non-finite global coordinate");
}

// cos/sin of the local phase K_u s_u u + K_w s_w w, one row per local point.
struct LocalPhase {
  Eigen::MatrixXd cosb;  // n_local x n_k
  Eigen::MatrixXd sinb;
};

inline LocalPhase local_phase(const TopologyNetwork& net, std::span<const Vec2> local) {
  const auto nl = static_cast<Eigen::Index>(local.size());
  LocalPhase ph{Eigen::MatrixXd(nl, net.size()), Eigen::MatrixXd(nl, net.size())};
  // Points usually sit on a few distinct u and w values, so the trig is taken per axis value
  // and combined with the angle-addition formulas.
  std::vector<double> us, ws;
  for (const auto& p : local) {
    us.push_back(p.x);
    ws.push_back(p.y);
  }
  for (auto* v : {&us, &ws}) {
    std::sort(v->begin(), v->end());
    v->erase(std::unique(v->begin(), v->end()), v->end());
  }
  std::vector<std::size_t> iu(local.size()), iw(local.size());
  for (std::size_t l = 0; l < local.size(); ++l) {
    iu[l] = static_cast<std::size_t>(std::lower_bound(us.begin(), us.end(), local[l].x) - us.begin());
    iw[l] = static_cast<std::size_t>(std::lower_bound(ws.begin(), ws.end(), local[l].y) - ws.begin());
  }
  std::vector<double> cu(us.size()), su_(us.size()), cw(ws.size()), sw_(ws.size());
  const double su = net.input_scale[2], sw = net.input_scale[3];
  for (Eigen::Index k = 0; k < net.size(); ++k) {
    const double ku = net.kernels(k, 2) * su, kw = net.kernels(k, 3) * sw;
    for (std::size_t i = 0; i < us.size(); ++i) {
      cu[i] = std::cos(ku * us[i]);
      su_[i] = std::sin(ku * us[i]);
    }
    for (std::size_t i = 0; i < ws.size(); ++i) {
      cw[i] = std::cos(kw * ws[i]);
      sw_[i] = std::sin(kw * ws[i]);
    }
    double* cb = ph.cosb.col(k).data();
    double* sb = ph.sinb.col(k).data();
    for (std::size_t l = 0; l < local.size(); ++l) {
      const double c1 = cu[iu[l]], s1 = su_[iu[l]], c2 = cw[iw[l]], s2 = sw_[iw[l]];
      cb[l] = c1 * c2 - s1 * s2;
      sb[l] = s1 * c2 + c1 * s2;
    }
  }
  return ph;
}

// sin/cos of the global phase K_x s_x x + K_y s_y y + 1 for centers [begin, end).
inline void global_phase(const TopologyNetwork& net, std::span<const Vec2> centers, Eigen::MatrixXd& sina,
                         Eigen::MatrixXd& cosa) {
  const auto nc = static_cast<Eigen::Index>(centers.size());
  sina.resize(net.size(), nc);
  cosa.resize(net.size(), nc);
  const double sx = net.input_scale[0], sy = net.input_scale[1];
  for (Eigen::Index c = 0; c < nc; ++c) {
    const auto& p = centers[static_cast<std::size_t>(c)];
    for (Eigen::Index k = 0; k < net.size(); ++k) {
      const double a = net.kernels(k, 0) * sx * p.x + net.kernels(k, 1) * sy * p.y + 1.0;
      sina(k, c) = std::sin(a);
      cosa(k, c) = std::cos(a);
    }
  }
}

constexpr std::size_t kCenterBlock = 256;

}  // namespace detail

namespace detail {

inline Eigen::VectorXd pre_activation(const TopologyNetwork& net, const CoordinateBatch& coords, const LocalPhase& ph) {
  const auto nl = static_cast<Eigen::Index>(coords.local.size());
  Eigen::VectorXd z(static_cast<Eigen::Index>(coords.rows()));
  Eigen::MatrixXd sina, cosa;
  for (std::size_t c0 = 0; c0 < coords.centers.size(); c0 += kCenterBlock) {
    const std::size_t nc = std::min(kCenterBlock, coords.centers.size() - c0);
    global_phase(net, std::span(coords.centers).subspan(c0, nc), sina, cosa);
    // sin(a + b) = sin a cos b + cos a sin b
    Eigen::Map<Eigen::MatrixXd> zblock(z.data() + static_cast<Eigen::Index>(c0) * nl, nl,
                                       static_cast<Eigen::Index>(nc));
    zblock.noalias() = ph.cosb * (net.weights.asDiagonal() * sina);
    zblock.noalias() += ph.sinb * (net.weights.asDiagonal() * cosa);
  }
  return z;
}

}  // namespace detail

/// Pre-sigmoid sums z for every row of the batch (cell-major order).
inline Eigen::VectorXd pre_activation(const TopologyNetwork& net, const CoordinateBatch& coords) {
  detail::check_finite(coords);
  if (coords.rows() == 0) return {};
  return detail::pre_activation(net, coords, detail::local_phase(net, coords.local));
}

/// Densities rho_i in (0, 1), one per batch row.
inline Eigen::VectorXd forward(const TopologyNetwork& net, const CoordinateBatch& coords) {
  return pre_activation(net, coords).unaryExpr([](double v) { return detail::sigmoid(v); });
}

/// Chain rule through the network for an upstream gradient dL/drho (one entry per row).
inline NetworkGradients backward(const TopologyNetwork& net, const CoordinateBatch& coords,
                                 const Eigen::Ref<const Eigen::VectorXd>& upstream) {
  require(static_cast<std::size_t>(upstream.size()) == coords.rows(), "upstream gradient length must match batch rows");
  auto grads = NetworkGradients::zeros_like(net);
  if (upstream.size() == 0) return grads;
  detail::check_finite(coords);
  const auto ph = detail::local_phase(net, coords.local);
  const Eigen::VectorXd z = detail::pre_activation(net, coords, ph);
  const auto nl = static_cast<Eigen::Index>(coords.local.size());
  Eigen::VectorXd ul(nl), wl(nl);
  for (Eigen::Index l = 0; l < nl; ++l) {
    ul(l) = coords.local[static_cast<std::size_t>(l)].x;
    wl(l) = coords.local[static_cast<std::size_t>(l)].y;
  }
  Eigen::MatrixXd sina, cosa;
  Eigen::VectorXd acc_x = Eigen::VectorXd::Zero(net.size()), acc_y = acc_x, acc_u = acc_x, acc_w = acc_x;
  for (std::size_t c0 = 0; c0 < coords.centers.size(); c0 += detail::kCenterBlock) {
    const std::size_t nc = std::min(detail::kCenterBlock, coords.centers.size() - c0);
    const auto ncx = static_cast<Eigen::Index>(nc);
    detail::global_phase(net, std::span(coords.centers).subspan(c0, nc), sina, cosa);
    // g = upstream * sigma'(z), stacked as [g | u*g | w*g] per local point.
    Eigen::MatrixXd g(nl, 3 * ncx);
    for (Eigen::Index c = 0; c < ncx; ++c) {
      for (Eigen::Index l = 0; l < nl; ++l) {
        const Eigen::Index r = (static_cast<Eigen::Index>(c0) + c) * nl + l;
        const double s = detail::sigmoid(z(r));
        const double gi = upstream(r) * s * (1.0 - s);
        g(l, c) = gi;
        g(l, ncx + c) = gi * ul(l);
        g(l, 2 * ncx + c) = gi * wl(l);
      }
    }
    const Eigen::MatrixXd p = ph.cosb.transpose() * g;  // sum_l g cos b
    const Eigen::MatrixXd q = ph.sinb.transpose() * g;  // sum_l g sin b
    for (Eigen::Index c = 0; c < ncx; ++c) {
      const auto& ctr = coords.centers[c0 + static_cast<std::size_t>(c)];
      for (Eigen::Index k = 0; k < net.size(); ++k) {
        const double sa = sina(k, c), ca = cosa(k, c);
        grads.d_weights(k) += sa * p(k, c) + ca * q(k, c);
        const double cos_sum = ca * p(k, c) - sa * q(k, c);
        acc_x(k) += ctr.x * cos_sum;
        acc_y(k) += ctr.y * cos_sum;
        acc_u(k) += ca * p(k, ncx + c) - sa * q(k, ncx + c);
        acc_w(k) += ca * p(k, 2 * ncx + c) - sa * q(k, 2 * ncx + c);
      }
    }
  }
  for (Eigen::Index k = 0; k < net.size(); ++k) {
    const double wk = net.weights(k);
    grads.d_kernels(k, 0) = wk * net.input_scale[0] * acc_x(k);
    grads.d_kernels(k, 1) = wk * net.input_scale[1] * acc_y(k);
    grads.d_kernels(k, 2) = wk * net.input_scale[2] * acc_u(k);
    grads.d_kernels(k, 3) = wk * net.input_scale[3] * acc_w(k);
  }
  return grads;
}

/// Row-by-row evaluation straight from the defining formula, with extended-precision sums.
/// Used for arbitrary point sets and as the reference path for the batched kernels.
inline Eigen::VectorXd forward_points(const TopologyNetwork& net, std::span<const Point4> points) {
  Eigen::VectorXd rho(static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    for (double v : p) require(std::isfinite(v), "non-finite coordinate");
    long double z = 0.0L;
    for (Eigen::Index k = 0; k < net.size(); ++k) {
      double arg = 1.0;
      for (int d = 0; d < 4; ++d) arg += net.kernels(k, d) * net.input_scale[static_cast<std::size_t>(d)] * p[static_cast<std::size_t>(d)];
      z += static_cast<long double>(net.weights(k)) * std::sin(arg);
    }
    rho(static_cast<Eigen::Index>(i)) = detail::sigmoid(static_cast<double>(z));
  }
  return rho;
}

}  // namespace metanet
