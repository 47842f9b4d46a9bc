#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "support.hpp"

using namespace metanet;
using metanet::testing::rel_err;

TEST(Coordinates, LocalGridIsElementCenters) {
  const auto b = build_coordinates({2, 1}, {4, 4}, 1);
  EXPECT_EQ(b.rows(), 32u);
  std::vector<double> us;
  for (int ex = 0; ex < 4; ++ex) us.push_back(b.local[static_cast<std::size_t>(ex)].x);
  EXPECT_EQ(us, (std::vector<double>{-0.375, -0.125, 0.125, 0.375}));
  for (const auto& p : b.local) {
    EXPECT_LE(std::abs(p.x), 0.5);
    EXPECT_LE(std::abs(p.y), 0.5);
  }
}

TEST(Coordinates, GlobalCentersSpanLongestAxis) {
  const auto b = build_coordinates({2, 1}, {2, 2}, 1);
  ASSERT_EQ(b.centers.size(), 2u);
  EXPECT_DOUBLE_EQ(b.centers[0].x, -0.25);
  EXPECT_DOUBLE_EQ(b.centers[1].x, 0.25);
  EXPECT_DOUBLE_EQ(b.centers[0].y, 0.0);

  const auto wide = build_coordinates({12, 4}, {2, 2}, 3);
  double xmin = 1, xmax = -1, ymin = 1, ymax = -1;
  for (const auto& c : wide.centers) {
    xmin = std::min(xmin, c.x);
    xmax = std::max(xmax, c.x);
    ymin = std::min(ymin, c.y);
    ymax = std::max(ymax, c.y);
  }
  EXPECT_GE(xmin, -0.5);
  EXPECT_LE(xmax, 0.5);
  EXPECT_NEAR(xmax - xmin, 1.0 - 1.0 / 36, 1e-12);
  EXPECT_NEAR(ymax - ymin, (4.0 - 1.0 / 3) / 12, 1e-12);
}

TEST(Coordinates, SubcellSelectionTilesTheCell) {
  // A 2x split of a unit domain puts the lower-left subcell center at a quarter of the span.
  const std::vector<SubcellIndex> sel{{0, 0}};
  const auto b = build_coordinates({1, 1}, {2, 2}, 2, sel);
  ASSERT_EQ(b.rows(), 4u);
  for (std::size_t r = 0; r < b.rows(); ++r) {
    const auto p = b.row(r);
    EXPECT_DOUBLE_EQ(p[0], -0.25);
    EXPECT_DOUBLE_EQ(p[1], -0.25);
  }
  const auto all = build_coordinates({1, 1}, {2, 2}, 2);
  ASSERT_EQ(all.centers.size(), 4u);
  EXPECT_EQ(all.centers[0], b.centers[0]);
  for (int s = 0; s < 4; ++s) {
    const auto one = build_coordinates({1, 1}, {2, 2}, 2, std::vector<SubcellIndex>{{s % 2, s / 2}});
    EXPECT_EQ(one.centers[0], all.centers[static_cast<std::size_t>(s)]);
  }
}

TEST(Coordinates, RowsOfOneCellShareTheirCenter) {
  const auto b = build_coordinates({3, 2}, {3, 3}, 1);
  for (std::size_t r = 0; r < b.rows(); ++r) {
    const auto p = b.row(r);
    const auto& c = b.centers[r / b.local.size()];
    EXPECT_EQ(p[0], c.x);
    EXPECT_EQ(p[1], c.y);
  }
}

TEST(Coordinates, RejectsBadInput) {
  EXPECT_THROW(build_coordinates({0, 1}, {2, 2}, 1), InvalidArgument);
  EXPECT_THROW(build_coordinates({1, 1}, {2, 2}, 0), InvalidArgument);
  EXPECT_THROW(build_coordinates({2, 1}, {2, 2}, 2, std::vector<SubcellIndex>{{0, 0}}), InvalidArgument);
  EXPECT_THROW(build_coordinates({1, 1}, {2, 2}, 2, std::vector<SubcellIndex>{{2, 0}}), InvalidArgument);
}

TEST(Init, DefaultGridHas3600Kernels) {
  const auto net = init_network(NetworkInit{});
  EXPECT_EQ(net.size(), 3600);
  EXPECT_EQ(net.kernels.rows(), 3600);
  EXPECT_TRUE((net.weights.array() == 0.1).all());
}

TEST(Init, CornerGridOrdering) {
  const auto net = init_network(2, 2, {-0.4, 0.4}, {-0.6, 0.6}, 0.1);
  ASSERT_EQ(net.size(), 16);
  for (Eigen::Index k = 0; k < 16; ++k) {
    EXPECT_DOUBLE_EQ(std::abs(net.kernels(k, 0)), 0.6);
    EXPECT_DOUBLE_EQ(std::abs(net.kernels(k, 1)), 0.6);
    EXPECT_DOUBLE_EQ(std::abs(net.kernels(k, 2)), 0.4);
    EXPECT_DOUBLE_EQ(std::abs(net.kernels(k, 3)), 0.4);
  }
  // local-u fastest, then local-w, global-x, global-y
  EXPECT_DOUBLE_EQ(net.kernels(0, 2), -0.4);
  EXPECT_DOUBLE_EQ(net.kernels(1, 2), 0.4);
  EXPECT_DOUBLE_EQ(net.kernels(1, 3), -0.4);
  EXPECT_DOUBLE_EQ(net.kernels(2, 3), 0.4);
  EXPECT_DOUBLE_EQ(net.kernels(3, 0), -0.6);
  EXPECT_DOUBLE_EQ(net.kernels(4, 0), 0.6);
  EXPECT_DOUBLE_EQ(net.kernels(7, 1), -0.6);
  EXPECT_DOUBLE_EQ(net.kernels(8, 1), 0.6);
}

TEST(Init, SingleZeroKernelGivesConstantField) {
  const auto net = init_network(1, 1, {0, 0}, {0, 0}, 0.1);
  ASSERT_EQ(net.size(), 1);
  const auto rho = forward(net, build_coordinates({3, 2}, {4, 4}, 2));
  EXPECT_TRUE((rho.array() == rho(0)).all());
}

TEST(Forward, ZeroWeightsGiveHalf) {
  auto net = init_network(NetworkInit{});
  net.weights.setZero();
  const auto rho = forward(net, build_coordinates({2, 2}, {5, 5}, 1));
  EXPECT_TRUE((rho.array() == 0.5).all());
}

TEST(Forward, ZeroFrequenciesGiveConstant) {
  std::mt19937_64 rng(5);
  auto net = metanet::testing::random_network(rng);
  net.kernels.setZero();
  const double expect = 1.0 / (1.0 + std::exp(-std::sin(1.0) * net.weights.sum()));
  const auto rho = forward(net, build_coordinates({3, 1}, {4, 3}, 1));
  for (Eigen::Index i = 0; i < rho.size(); ++i) EXPECT_NEAR(rho(i), expect, 1e-14);
}

TEST(Forward, SingleKernelScalar) {
  TopologyNetwork net;
  net.kernels = KernelMatrix::Zero(1, 4);
  net.kernels(0, 0) = 1.0;
  net.weights = Eigen::VectorXd::Ones(1);
  const std::array<Point4, 1> pts{Point4{0.5, 0, 0, 0}};
  const double rho = forward_points(net, pts)(0);
  EXPECT_NEAR(rho, 0.730566, 1e-6);
  EXPECT_NEAR(rho, 1.0 / (1.0 + std::exp(-std::sin(1.5))), 1e-15);
}

TEST(Forward, BatchedMatchesPointwise) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(static_cast<unsigned>(seed));
    auto net = metanet::testing::random_network(rng, 3, 2);
    net.input_scale = element_unit_scale({3, 2}, {4, 5});
    const auto b = build_coordinates({3, 2}, {4, 5}, 2);
    const auto rho = forward(net, b);
    const auto pts = b.materialize();
    const auto ref = forward_points(net, pts);
    EXPECT_LT((rho - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, StrictlyInsideUnitInterval) {
  std::mt19937_64 rng(11);
  auto net = metanet::testing::random_network(rng);
  net.weights *= 3.0;
  const auto rho = forward(net, build_coordinates({4, 4}, {6, 6}, 1));
  EXPECT_GT(rho.minCoeff(), 0.0);
  EXPECT_LT(rho.maxCoeff(), 1.0);
}

TEST(Forward, PermutationEquivariantAndPure) {
  std::mt19937_64 rng(2);
  const auto net = metanet::testing::random_network(rng);
  const auto b = build_coordinates({2, 2}, {3, 3}, 1);
  auto pts = b.materialize();
  const auto a1 = forward_points(net, pts);
  const auto a2 = forward_points(net, pts);
  EXPECT_EQ(a1, a2);
  const auto f1 = forward(net, b);
  EXPECT_EQ(f1, forward(net, b));
  std::vector<std::size_t> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Point4> shuffled(pts.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = pts[perm[i]];
  const auto s = forward_points(net, shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(s(static_cast<Eigen::Index>(i)), a1(static_cast<Eigen::Index>(perm[i])));
}

TEST(Forward, OddUpsampleMiddleSubcellIsTheCell) {
  std::mt19937_64 rng(4);
  const auto net = metanet::testing::random_network(rng);
  const Dims macro{3, 2}, micro{4, 4};
  const auto one = forward(net, build_coordinates(macro, micro, 1));
  const std::vector<SubcellIndex> mid(6, SubcellIndex{1, 1});
  const auto three = forward(net, build_coordinates(macro, micro, 3, mid));
  EXPECT_LT((one - three).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Backward, ZeroUpstreamGivesZero) {
  std::mt19937_64 rng(1);
  const auto net = metanet::testing::random_network(rng);
  const auto b = build_coordinates({2, 1}, {3, 3}, 1);
  const auto g = backward(net, b, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b.rows())));
  EXPECT_EQ(g.d_kernels.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.d_weights.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, ZeroWeightsKillKernelGradient) {
  std::mt19937_64 rng(1);
  auto net = metanet::testing::random_network(rng);
  net.weights.setZero();
  const auto b = build_coordinates({2, 1}, {3, 3}, 1);
  const auto g = backward(net, b, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(b.rows())));
  EXPECT_EQ(g.d_kernels.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.d_weights.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, RejectsWrongUpstreamLength) {
  std::mt19937_64 rng(1);
  const auto net = metanet::testing::random_network(rng);
  const auto b = build_coordinates({2, 1}, {3, 3}, 1);
  EXPECT_THROW(backward(net, b, Eigen::VectorXd::Zero(3)), InvalidArgument);
}

/// Central differences of L = sum upstream * rho, evaluated through the pointwise reference path.
class BackwardFd : public ::testing::TestWithParam<int> {};

TEST_P(BackwardFd, MatchesCentralDifferences) {
  std::mt19937_64 rng(static_cast<unsigned>(GetParam()));
  auto net = metanet::testing::random_network(rng);
  net.input_scale = {2.0, 2.0, 3.0, 3.0};
  const auto b = build_coordinates({2, 2}, {3, 3}, 2, select_subcells(GetParam(), {2, 2}, 2));
  const Eigen::VectorXd up = metanet::testing::random_densities(rng, static_cast<Eigen::Index>(b.rows()), -1.0, 1.0);
  const auto g = backward(net, b, up);
  const auto pts = b.materialize();
  auto loss = [&](const TopologyNetwork& n) { return up.dot(forward_points(n, pts)); };
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < net.size(); ++k) {
    for (int j = 0; j < 5; ++j) {
      auto p = net, m = net;
      if (j < 4) {
        p.kernels(k, j) += h;
        m.kernels(k, j) -= h;
      } else {
        p.weights(k) += h;
        m.weights(k) -= h;
      }
      const double fd = (loss(p) - loss(m)) / (2 * h);
      const double an = j < 4 ? g.d_kernels(k, j) : g.d_weights(k);
      worst = std::max(worst, rel_err(an, fd, 1e-6));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, BackwardFd, ::testing::Range(0, 20));

TEST(Scale, UnitScaleIsTheLiteralFormula) {
  std::mt19937_64 rng(9);
  const auto net = metanet::testing::random_network(rng);
  const Point4 x{0.1, -0.2, 0.3, -0.4};
  long double z = 0;
  for (Eigen::Index k = 0; k < net.size(); ++k)
    z += net.weights(k) * std::sin(net.kernels(k, 0) * x[0] + net.kernels(k, 1) * x[1] + net.kernels(k, 2) * x[2] +
                                   net.kernels(k, 3) * x[3] + 1.0);
  const std::array<Point4, 1> pts{x};
  EXPECT_NEAR(forward_points(net, pts)(0), 1.0 / (1.0 + std::exp(-static_cast<double>(z))), 1e-15);
}
