#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "metanet/metanet.hpp"

namespace metanet::testing {

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Eigen::VectorXd random_densities(std::mt19937_64& rng, Eigen::Index n, double lo = 0.05, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

/// Small randomized network whose outputs stay away from saturation.
inline TopologyNetwork random_network(std::mt19937_64& rng, int local = 2, int global = 2) {
  auto net = init_network(local, global, {-0.4, 0.4}, {-0.6, 0.6}, 0.1);
  std::normal_distribution<double> n(0.0, 0.4);
  for (Eigen::Index k = 0; k < net.size(); ++k) {
    net.weights(k) = n(rng);
    for (int j = 0; j < 4; ++j) net.kernels(k, j) += n(rng);
  }
  return net;
}

/// Cantilever-like macro problem: left edge clamped, downward load at the bottom-right node.
inline FeProblem cantilever(Dims nel, double load = -1.0) {
  FeProblem p;
  p.nel = nel;
  for (int j = 0; j <= nel.y; ++j) {
    p.fixed_dofs.push_back(2 * node_id(nel, 0, j));
    p.fixed_dofs.push_back(2 * node_id(nel, 0, j) + 1);
  }
  p.loads.push_back({2 * node_id(nel, nel.x, 0) + 1, load});
  return p;
}

/// Q4 plane-stress element stiffness in the closed form of the classic compact topology
/// optimization listings (unit square, node order counter-clockwise from lower left).
inline Eigen::Matrix<double, 8, 8> closed_form_ke(double E, double nu) {
  const double k[8] = {0.5 - nu / 6,  0.125 + nu / 8, -0.25 - nu / 12, -0.125 + 3 * nu / 8,
                       -0.25 + nu / 12, -0.125 - nu / 8, nu / 6,          0.125 - 3 * nu / 8};
  const int idx[8][8] = {{0, 1, 2, 3, 4, 5, 6, 7}, {1, 0, 7, 6, 5, 4, 3, 2}, {2, 7, 0, 5, 6, 3, 4, 1},
                         {3, 6, 5, 0, 7, 2, 1, 4}, {4, 5, 6, 7, 0, 1, 2, 3}, {5, 4, 3, 2, 1, 0, 7, 6},
                         {6, 3, 4, 1, 2, 7, 0, 5}, {7, 2, 1, 4, 3, 6, 5, 0}};
  Eigen::Matrix<double, 8, 8> ke;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) ke(i, j) = E / (1 - nu * nu) * k[idx[i][j]];
  return ke;
}

inline RenderedDesign blank(int w, int h, double v = 0.0) {
  return make_design({w, h}, std::vector<double>(static_cast<std::size_t>(w) * h, v), {w, h});
}

inline void fill(RenderedDesign& d, int x0, int y0, int w, int h, double v) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) d.raster[static_cast<std::size_t>(y) * d.size.x + x] = v;
}

inline long long count(const PixelMask& m) { return std::count(m.begin(), m.end(), std::uint8_t{1}); }

/// 80x60 raster with a 10-pixel blob and a 500-pixel blob.
inline RenderedDesign island_fixture() {
  auto d = blank(80, 60);
  fill(d, 2, 2, 5, 2, 1.0);
  fill(d, 40, 20, 20, 25, 0.8);
  return d;
}

/// Solid 40x40 block with a 3-pixel strut: one neck column whose density decays 0.45 -> 0.35,
/// then a 24-pixel tip at 0.9 that separates from the block once the cutoff rises to 0.5.
inline RenderedDesign dangling_fixture() {
  auto d = blank(80, 60);
  fill(d, 5, 5, 40, 40, 1.0);
  const double neck[3] = {0.45, 0.40, 0.35};
  for (int k = 0; k < 3; ++k) fill(d, 45, 20 + k, 1, 1, neck[k]);
  fill(d, 46, 20, 24, 3, 0.9);
  return d;
}

}  // namespace metanet::testing
