#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace metanet;
using metanet::testing::rel_err;

namespace {

TrainProblem small_problem(ObjectiveMode mode, Dims macro = {2, 2}, Dims micro = {6, 6}) {
  TrainProblem tp;
  tp.macro = macro;
  tp.micro = micro;
  tp.problem = metanet::testing::cantilever(macro);
  tp.volume_targets.assign(static_cast<std::size_t>(macro.count()), 0.5);
  tp.target = Eigen::VectorXd::Zero(tp.problem.ndof());
  tp.mask = Eigen::VectorXd::Zero(tp.problem.ndof());
  for (int i = 0; i <= macro.x; ++i) {
    const int d = 2 * node_id(macro, i, macro.y) + 1;
    tp.target(d) = -0.4 * i;
    tp.mask(d) = 1.0;
  }
  return with_baseline(tp, mode);
}

TopologyNetwork small_net(unsigned seed, Dims macro = {2, 2}, Dims micro = {6, 6}) {
  std::mt19937_64 rng(seed);
  auto net = metanet::testing::random_network(rng);
  net.input_scale = element_unit_scale(macro, micro);
  net.kernels *= 0.5;
  net.weights.array() += 0.3;
  return net;
}

TrainConfig config(ObjectiveMode mode, int upsample = 1) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.upsample = upsample;
  cfg.epochs = 4;
  cfg.learning_rate = 0.01;
  cfg.weights.l2_weight = 1e-3;
  cfg.weights.bc_scale = 0.5;
  return cfg;
}

/// Worst relative error of the epoch gradient against central differences of the epoch loss.
double epoch_fd_worst(const TopologyNetwork& net, const TrainProblem& tp, const TrainConfig& cfg, int epoch, double alpha) {
  const auto ev = evaluate_epoch(net, tp, cfg, epoch, alpha);
  auto loss = [&](const TopologyNetwork& n) { return evaluate_epoch(n, tp, cfg, epoch, alpha).report.total; };
  const double scale = std::max(ev.gradients.d_kernels.cwiseAbs().maxCoeff(), ev.gradients.d_weights.cwiseAbs().maxCoeff());
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < net.size(); k += 2) {
    for (int j = 0; j < 5; ++j) {
      auto p = net, m = net;
      if (j < 4) {
        p.kernels(k, j) += h;
        m.kernels(k, j) -= h;
      } else {
        p.weights(k) += h;
        m.weights(k) -= h;
      }
      const double an = j < 4 ? ev.gradients.d_kernels(k, j) : ev.gradients.d_weights(k);
      worst = std::max(worst, rel_err(an, (loss(p) - loss(m)) / (2 * h), 1e-3 * scale));
    }
  }
  return worst;
}

}  // namespace

TEST(Schedule, SubcellCycle) {
  for (int e = 0; e < 5; ++e)
    for (const auto& s : select_subcells(e, {3, 2}, 1)) EXPECT_EQ(s, (SubcellIndex{0, 0}));
  const std::vector<SubcellIndex> expect{{0, 0}, {1, 0}, {0, 1}, {1, 1}, {0, 0}};
  for (int e = 0; e < 5; ++e) {
    const auto sel = select_subcells(e, {3, 2}, 2);
    ASSERT_EQ(sel.size(), 6u);
    for (const auto& s : sel) EXPECT_EQ(s, expect[static_cast<std::size_t>(e)]);
  }
}

TEST(Schedule, FourConsecutiveEpochsCoverEverySubcell) {
  for (int start = 0; start < 6; ++start) {
    std::set<std::pair<int, int>> seen;
    for (int e = start; e < start + 4; ++e) {
      const auto s = select_subcells(e, {1, 1}, 2)[0];
      seen.insert({s.x, s.y});
    }
    EXPECT_EQ(seen.size(), 4u);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto net = small_net(1);
  const auto before = net;
  auto s = AdamState::for_network(net);
  adam_step(net, s, NetworkGradients::zeros_like(net), 1e-3);
  EXPECT_EQ(net.kernels, before.kernels);
  EXPECT_EQ(net.weights, before.weights);
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  auto net = small_net(1);
  const auto before = net;
  auto s = AdamState::for_network(net);
  auto g = NetworkGradients::zeros_like(net);
  g.d_weights.setConstant(3.0);
  g.d_kernels.setConstant(-2.0);
  adam_step(net, s, g, 0.0);
  EXPECT_EQ(net.kernels, before.kernels);
  EXPECT_EQ(net.weights, before.weights);
}

TEST(Adam, FirstStepIsLearningRateAndScaleFree) {
  for (double scale : {1e-3, 1.0, 250.0}) {
    auto net = small_net(2);
    const auto before = net;
    auto s = AdamState::for_network(net);
    auto g = NetworkGradients::zeros_like(net);
    g.d_weights.setConstant(scale);
    g.d_kernels.setConstant(-scale);
    adam_step(net, s, g, 1e-3);
    EXPECT_NEAR((before.weights - net.weights).maxCoeff(), 1e-3, 2e-11 / scale + 1e-15);
    EXPECT_NEAR((net.kernels - before.kernels).minCoeff(), 1e-3, 2e-11 / scale + 1e-15);
  }
}

TEST(Adam, MatchesScalarRecurrence) {
  auto net = small_net(3);
  auto s = AdamState::for_network(net);
  const double w0 = net.weights(0);
  double m = 0, v = 0, w = w0;
  const double lr = 0.05;
  for (int t = 1; t <= 5; ++t) {
    const double g = std::sin(t) + 0.3 * t;
    auto grads = NetworkGradients::zeros_like(net);
    grads.d_weights(0) = g;
    adam_step(net, s, grads, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(net.weights(0), w, 1e-14);
  }
  EXPECT_EQ(s.step, 5);
}

TEST(Adam, ShapeMismatchIsAnError) {
  auto net = small_net(4);
  auto s = AdamState::for_network(init_network(1, 1, {0, 0}, {0, 0}, 0.1));
  EXPECT_THROW(adam_step(net, s, NetworkGradients::zeros_like(net), 1e-3), InvalidArgument);
}

class EpochGradient : public ::testing::TestWithParam<std::tuple<ObjectiveMode, int>> {};

TEST_P(EpochGradient, MatchesDifferences) {
  const auto [mode, up] = GetParam();
  const auto tp = small_problem(mode);
  const auto cfg = config(mode, up);
  const auto net = small_net(7);
  EXPECT_LT(epoch_fd_worst(net, tp, cfg, 1, 5.0), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Modes, EpochGradient,
                         ::testing::Combine(::testing::Values(ObjectiveMode::Compliance, ObjectiveMode::Displacement,
                                                              ObjectiveMode::BulkOnly),
                                            ::testing::Values(1, 2)));

TEST(EpochGradient, TermsAddUp) {
  // Bulk and L2 gradients are fixed; mismatch, volume and boundary scale with alpha.
  const auto tp = small_problem(ObjectiveMode::Displacement);
  const auto net = small_net(8);
  auto cfg = config(ObjectiveMode::Displacement);
  auto grad = [&](double alpha, double bulk, double l2) {
    auto c = cfg;
    c.weights.bulk_multiplier = bulk;
    c.weights.l2_weight = l2;
    return evaluate_epoch(net, tp, c, 0, alpha).gradients;
  };
  const auto full = grad(3.0, 1.0, 1e-3);
  const auto bulk = grad(0.0, 1.0, 0.0);
  const auto reg = grad(0.0, 0.0, 1e-3);
  const auto per_alpha = grad(1.0, 0.0, 0.0);
  const KernelMatrix dk = full.d_kernels - bulk.d_kernels - reg.d_kernels - 3.0 * per_alpha.d_kernels;
  const Eigen::VectorXd dw = full.d_weights - bulk.d_weights - reg.d_weights - 3.0 * per_alpha.d_weights;
  const double scale = full.d_weights.cwiseAbs().maxCoeff();
  EXPECT_LT(dk.cwiseAbs().maxCoeff(), 1e-10 * scale);
  EXPECT_LT(dw.cwiseAbs().maxCoeff(), 1e-10 * scale);
  EXPECT_LT((reg.d_weights - 2e-3 * net.weights).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EpochGradient, ReportResums) {
  const auto tp = small_problem(ObjectiveMode::Displacement);
  const auto ev = evaluate_epoch(small_net(9), tp, config(ObjectiveMode::Displacement), 0, 2.0);
  const auto& r = ev.report;
  EXPECT_NEAR(r.total, r.structural + r.volume + r.boundary + r.regularization, 1e-10);
  ASSERT_TRUE(r.rmse.has_value());
  EXPECT_EQ(r.per_cell_volume.size(), 4u);
  EXPECT_EQ(r.alpha, 2.0);
}

TEST(Train, RecordsAreOneBasedAndPreUpdate) {
  const auto tp = small_problem(ObjectiveMode::Compliance);
  const auto cfg = config(ObjectiveMode::Compliance);
  auto net = small_net(10);
  const auto first = evaluate_epoch(net, tp, cfg, 0, alpha_schedule(0, cfg.epochs, cfg.weights.alpha_max));
  TrainState st;
  int calls = 0;
  const auto log = train(net, st, tp, cfg, [&](const EpochRecord&) { ++calls; });
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(calls, 4);
  EXPECT_EQ(log.front().epoch, 1);
  EXPECT_EQ(log.back().epoch, 4);
  EXPECT_EQ(log.front().report.total, first.report.total);
  EXPECT_EQ(st.epoch, 4);
  EXPECT_EQ(st.adam.step, 4);
}

TEST(Train, LossDecreasesOnSmallProblems) {
  for (auto mode : {ObjectiveMode::Compliance, ObjectiveMode::Displacement, ObjectiveMode::BulkOnly}) {
    const auto tp = small_problem(mode);
    auto cfg = config(mode);
    cfg.epochs = 30;
    cfg.weights.alpha_max = 1.0;
    auto net = small_net(11);
    TrainState st;
    const auto log = train(net, st, tp, cfg);
    EXPECT_LT(log.back().report.total, log.front().report.total) << to_string(mode);
  }
}

TEST(Train, Deterministic) {
  const auto tp = small_problem(ObjectiveMode::Displacement);
  const auto cfg = config(ObjectiveMode::Displacement, 2);
  auto a = small_net(12), b = small_net(12);
  TrainState sa, sb;
  std::ostringstream la, lb;
  for (const auto& r : train(a, sa, tp, cfg)) write_log_row(la, r);
  for (const auto& r : train(b, sb, tp, cfg)) write_log_row(lb, r);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(a.kernels, b.kernels);
  EXPECT_EQ(a.weights, b.weights);
}

TEST(Train, NumericalFailureNamesTheEpoch) {
  auto tp = small_problem(ObjectiveMode::Compliance);
  tp.params.c0 = 0.0;
  auto net = small_net(13);
  net.kernels.setZero();
  net.weights.setConstant(-1000.0);
  TrainState st;
  try {
    train(net, st, tp, config(ObjectiveMode::Compliance));
    FAIL() << "expected a numerical failure";
  } catch (const NumericalError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("epoch 1: ", 0), 0u) << e.what();
  }
}

TEST(Train, RejectsBadConfig) {
  auto cfg = config(ObjectiveMode::Compliance);
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = config(ObjectiveMode::Compliance);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = config(ObjectiveMode::Compliance);
  cfg.upsample = 0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Log, CsvFormat) {
  std::ostringstream os;
  write_log_header(os);
  EpochRecord r;
  r.epoch = 3;
  r.report.total = 0.1;
  r.report.alpha = 2.5;
  write_log_row(os, r);
  r.report.rmse = 1.0 / 3.0;
  write_log_row(os, r);
  EXPECT_EQ(os.str(),
            "epoch,total,structural,volume,boundary,regularization,rmse,alpha\n"
            "3,0.10000000000000001,0,0,0,0,,2.5\n"
            "3,0.10000000000000001,0,0,0,0,0.33333333333333331,2.5\n");
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "metanet_ckpt_test";
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  const auto tp = small_problem(ObjectiveMode::Displacement);
  auto cfg = config(ObjectiveMode::Displacement);
  cfg.epochs = 2;
  auto net = small_net(14);
  TrainState st;
  train(net, st, tp, cfg);
  const auto path = (dir / "a.bin").string();
  save_checkpoint(path, {net, st, "abc123"});
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.net.kernels, net.kernels);
  EXPECT_EQ(ck.net.weights, net.weights);
  EXPECT_EQ(ck.net.input_scale, net.input_scale);
  EXPECT_EQ(ck.net.init, net.init);
  EXPECT_EQ(ck.state.adam.m_kernels, st.adam.m_kernels);
  EXPECT_EQ(ck.state.adam.v_weights, st.adam.v_weights);
  EXPECT_EQ(ck.state.adam.step, st.adam.step);
  EXPECT_EQ(ck.state.epoch, 2);
  EXPECT_EQ(ck.provenance, "abc123");
}

TEST_F(CheckpointTest, ResumeEqualsUninterrupted) {
  const auto tp = small_problem(ObjectiveMode::Compliance);
  auto cfg = config(ObjectiveMode::Compliance, 2);
  auto straight = small_net(15);
  TrainState s1;
  const auto full = train(straight, s1, tp, cfg);

  auto part = small_net(15);
  TrainState s2;
  auto half = cfg;
  half.epochs = 2;
  half.ramp_fraction = 1.0;  // same alpha ramp length as the 4-epoch run
  train(part, s2, tp, half);
  const auto path = (dir / "b.bin").string();
  save_checkpoint(path, {part, s2, ""});
  auto ck = load_checkpoint(path);
  const auto rest = train(ck.net, ck.state, tp, cfg);
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_EQ(rest.front().epoch, 3);
  EXPECT_EQ(rest.back().report.total, full.back().report.total);
  EXPECT_EQ(ck.net.kernels, straight.kernels);
  EXPECT_EQ(ck.net.weights, straight.weights);
}

TEST_F(CheckpointTest, RejectsForeignAndTruncatedFiles) {
  const auto junk = (dir / "junk.bin").string();
  std::ofstream(junk) << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(junk), ConfigError);
  EXPECT_THROW(load_checkpoint((dir / "missing.bin").string()), ConfigError);

  auto net = small_net(16);
  const auto good = (dir / "good.bin").string();
  save_checkpoint(good, {net, TrainState{AdamState::for_network(net), 0}, "p"});
  std::ifstream is(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  const auto cut = (dir / "cut.bin").string();
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(cut), ConfigError);
}
