#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "lineest/evaluation.hpp"
#include "lineest/feeder_io.hpp"
#include "lineest/measurement_io.hpp"
#include "lineest/pipeline.hpp"
#include "lineest/stage2.hpp"
#include "support/oracles.hpp"

using namespace lineest;
namespace fs = std::filesystem;

namespace {

const fs::path kData = LINEEST_DATA_DIR;

struct Scenario {
  NetworkModel net;
  NodeMap nodes;
  ParameterIndex index;
  BusAdmittance ybus;
  MeasurementSeries series;
  Eigen::VectorXd truth;

  Scenario(const char* file, const char* dynamics, std::size_t samples, std::uint64_t seed) {
    net = load_network(kData / file);
    nodes = NodeMap(net);
    index = ParameterIndex(net);
    ybus = assemble_bus_admittance(net, nodes);
    const auto dyn = load_dynamics(net, kData / dynamics);
    const auto eq = equilibrium(ybus, nodes, dyn);
    series = simulate(ybus, nodes, dyn, eq, 0.05, samples, seed, {10, 200});
    truth = true_parameters(net, index);
  }
};

Eigen::VectorXd perturbed(const Eigen::VectorXd& theta, double fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-fraction, fraction);
  Eigen::VectorXd out = theta;
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) *= 1.0 + u(rng);
  return out;
}

}  // namespace

TEST(Snapshots, IndicesSpreadEvenlyAndIncludeEnds) {
  EXPECT_EQ(snapshot_indices(10, 3), (std::vector<std::size_t>{0, 5, 9}));
  EXPECT_EQ(snapshot_indices(4, 10), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(snapshot_indices(9, 1), (std::vector<std::size_t>{4}));
  EXPECT_TRUE(snapshot_indices(0, 3).empty());
}

TEST(Snapshots, MeanAggregationGivesOneAveragedSnapshot) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 200, 1);
  const auto snaps = make_snapshots(sc.series, Aggregation::mean, 50);
  ASSERT_EQ(snaps.size(), 1u);
  EXPECT_NEAR(snaps[0].v(4), sc.series.v.col(4).mean(), 1e-15);
  EXPECT_EQ(make_snapshots(sc.series, Aggregation::snapshots, 50).size(), 50u);
}

TEST(Mismatch, VanishesAtTrueParametersOnNoiselessData) {
  const Scenario sc("feeder13.json", "feeder13_dynamics.json", 300, 2);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 30));
  const auto r = problem.mismatch(sc.truth, Eigen::VectorXd::Zero(problem.num_angles()));
  EXPECT_EQ(r.size(), problem.num_residuals());
  EXPECT_LT(r.lpNorm<Eigen::Infinity>(), 1e-11);
  EXPECT_THROW(problem.mismatch(sc.truth.head(3), Eigen::VectorXd::Zero(problem.num_angles())), DimensionMismatch);
}

TEST(Mismatch, SignIsMeasuredMinusModel) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 50, 3);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::mean, 1));
  // Scaling every admittance by 1.1 scales the model injections by 1.1.
  const auto r = problem.mismatch(1.1 * sc.truth, Eigen::VectorXd::Zero(problem.num_angles()));
  const auto& s = problem.snapshots()[0];
  const auto k = static_cast<Eigen::Index>(problem.rows()[4]);
  const auto inj = injections(assemble_bus_admittance(sc.net), s.v, s.delta);
  EXPECT_NEAR(r(4), s.p(k) - 1.1 * inj.p(k), 1e-12);
}

TEST(Mismatch, ScaledBranchConductanceIsLocalizedAtItsEndpoints) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 20, 17);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 1));
  const std::size_t branch = 1;
  const auto& br = sc.net.branches[branch];
  Eigen::VectorXd theta = sc.truth;
  const auto [lo, hi] = sc.index.branch_range(branch);
  for (auto i = lo; i < hi; ++i) theta(static_cast<Eigen::Index>(i)) *= 2.0;
  const auto r = problem.mismatch(theta, Eigen::VectorXd::Zero(problem.num_angles()));
  const auto nr = static_cast<Eigen::Index>(problem.rows().size());
  double at_ends = 0.0;
  for (Eigen::Index i = 0; i < nr; ++i) {
    const auto bus = sc.nodes.node(problem.rows()[static_cast<std::size_t>(i)]).bus;
    const double worst = std::max(std::abs(r(i)), std::abs(r(nr + i)));
    if (bus == br.from || bus == br.to)
      at_ends = std::max(at_ends, worst);
    else
      EXPECT_LT(worst, 1e-11) << "row " << i;
  }
  EXPECT_GT(at_ends, 1e-4);
}

TEST(Mismatch, NetworkWithoutBranchesHasNoResiduals) {
  NetworkModel net;
  net.buses = {{"s", PhaseSet::parse("abc"), true}};
  Snapshot snap{Eigen::VectorXd::Ones(3), Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)};
  const RefinementProblem problem(net, {snap});
  EXPECT_EQ(problem.num_residuals(), 0);
  EXPECT_EQ(problem.mismatch(Eigen::VectorXd(0), Eigen::VectorXd(0)).size(), 0);
}

TEST(RefinementJacobian, MatchesCentralDifferences) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 100, 4);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 3));
  const auto np2 = problem.num_parameters();
  Eigen::VectorXd z(problem.num_unknowns());
  z.head(np2) = perturbed(sc.truth, 0.1, 5);
  z.tail(problem.num_angles()).setConstant(0.01);
  auto model = [&](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(-problem.mismatch(x.head(np2), x.tail(problem.num_angles())));
  };
  const Eigen::MatrixXd fd = oracle::central_jacobian(model, z);
  const Eigen::MatrixXd an = problem.jacobian(z.head(np2), z.tail(problem.num_angles()));
  EXPECT_LT(oracle::max_relative_error(an, fd, 1e-2), 1e-6);
}

TEST(PseudoInverse, FullRankTallMatchesNormalEquations) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd a(60, 12);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
  const Eigen::MatrixXd ref = (a.transpose() * a).ldlt().solve(a.transpose());
  EXPECT_LT((pseudo_inverse(a) - ref).norm() / ref.norm(), 1e-10);
}

TEST(PseudoInverse, RankDeficientSatisfiesPenroseConditions) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (const auto& [rows, cols] : {std::pair{40, 8}, std::pair{5, 9}}) {
    Eigen::MatrixXd a(rows, cols);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    a.col(3) = a.col(1);  // duplicated column
    a.col(cols - 1).setZero();
    const Eigen::MatrixXd x = pseudo_inverse(a);
    ASSERT_EQ(x.rows(), cols);
    EXPECT_LT((a * x * a - a).norm(), 1e-10 * a.norm());
    EXPECT_LT((x * a * x - x).norm(), 1e-10 * x.norm());
    EXPECT_LT(((a * x).transpose() - a * x).norm(), 1e-10);
    EXPECT_LT(((x * a).transpose() - x * a).norm(), 1e-10);
  }
}

TEST(Broyden, StartingAtTheSolutionIsANoOp) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 300, 8);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 30));
  const auto res = broyden_refine(problem, sc.truth);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.status, RefinementStatus::converged);
  EXPECT_EQ(res.iterations, 0);
  EXPECT_EQ(res.theta, sc.truth);
  EXPECT_TRUE(res.d_delta.isZero(0.0));
}

TEST(Broyden, ConvergesSuperlinearlyFromTenPercentError) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 600, 9);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 100));
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto res = broyden_refine(problem, perturbed(sc.truth, 0.1, seed));
    ASSERT_TRUE(res.converged) << to_string(res.status);
    EXPECT_LE(res.iterations, 50);
    const auto& h = res.history;
    ASSERT_GE(h.size(), 2u);
    for (std::size_t k = 1; k < h.size(); ++k)
      std::cout << "  seed " << seed << " iteration " << k << " residual ratio " << h[k] / h[k - 1] << '\n';
    EXPECT_LT(h.back() / h[h.size() - 2], 1e-2);
    EXPECT_LT((res.theta - sc.truth).norm() / sc.truth.norm(), 1e-8);
  }
}

TEST(Broyden, ConvergedFlagMatchesFinalNorm) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 300, 10);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 30));
  RefinementOptions opt;
  opt.max_iterations = 1;
  opt.step_cap = 1e-3;
  const auto res = broyden_refine(problem, perturbed(sc.truth, 0.1, 4), opt);
  EXPECT_FALSE(res.converged);
  EXPECT_EQ(res.status, RefinementStatus::max_iterations);
  EXPECT_EQ(res.converged, res.mismatch_norm < opt.tolerance);
  EXPECT_EQ(res.mismatch_norm, *std::min_element(res.history.begin(), res.history.end()));
  EXPECT_THROW(broyden_refine(problem, sc.truth.head(4)), DimensionMismatch);
}

TEST(Broyden, DuplicatedRowsStillGiveFiniteSteps) {
  Scenario sc("feeder4.json", "feeder4_dynamics.json", 50, 18);
  for (Eigen::Index k = 1; k < static_cast<Eigen::Index>(sc.series.samples()); ++k) {
    sc.series.v.row(k) = sc.series.v.row(0);
    sc.series.delta.row(k) = sc.series.delta.row(0);
    sc.series.p.row(k) = sc.series.p.row(0);
    sc.series.q.row(k) = sc.series.q.row(0);
  }
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 10));
  const auto res = broyden_refine(problem, perturbed(sc.truth, 0.1, 3));
  EXPECT_TRUE(res.theta.allFinite());
  EXPECT_TRUE(res.d_delta.allFinite());
  EXPECT_EQ(res.converged, res.mismatch_norm < RefinementOptions{}.tolerance);
}

TEST(Broyden, RecoversACommonAngleOffset) {
  Scenario sc("feeder4.json", "feeder4_dynamics.json", 300, 11);
  const NodeMap& nodes = sc.nodes;
  for (std::size_t s = 0; s < nodes.num_states(); ++s)
    sc.series.delta.col(static_cast<Eigen::Index>(nodes.state_node(s))).array() += 1e-3 * static_cast<double>(s + 1);
  const RefinementProblem problem(sc.net, make_snapshots(sc.series, Aggregation::snapshots, 60));
  const auto res = broyden_refine(problem, perturbed(sc.truth, 0.05, 2));
  ASSERT_TRUE(res.converged) << to_string(res.status);
  for (std::size_t s = 0; s < nodes.num_states(); ++s)
    EXPECT_NEAR(res.d_delta(static_cast<Eigen::Index>(s)), -1e-3 * static_cast<double>(s + 1), 1e-9);
}

TEST(Pipeline, NoiselessRefinementImprovesOnInitialEstimate) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 3600, 12);
  const auto est = run_pipeline(sc.net, sc.series);
  for (auto q : {Quantity::conductance, Quantity::susceptance}) {
    const double init = parameter_mape(sc.index, sc.truth, est.theta_init, q).value;
    const double refined = parameter_mape(sc.index, sc.truth, est.theta_refined, q).value;
    EXPECT_LE(refined, init);
    EXPECT_LT(refined, 1e-6);
  }
}

TEST(Pipeline, SmallMeasurementNoiseGivesFiniteEstimates) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 3600, 13);
  const auto noisy =
      add_measurement_noise(sc.series, NoiseSpec::from_level(1e-6, PowerChannel::independent), 14, &sc.ybus);
  const auto est = run_pipeline(sc.net, noisy);
  const auto entries = est.entries();
  EXPECT_EQ(entries.size(), sc.index.size());
  for (const auto& e : entries) {
    EXPECT_TRUE(std::isfinite(e.g_refined) && std::isfinite(e.b_refined));
    EXPECT_TRUE(std::isfinite(e.g_init) && std::isfinite(e.b_init));
  }
}

TEST(Pipeline, DisconnectedBranchHasNoEstimates) {
  const auto open = load_network(kData / "feeder4_open.json");
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 1200, 15);
  const auto est = run_pipeline(open, sc.series);
  const ParameterIndex index(open);
  EXPECT_EQ(est.entries().size(), index.size() - 1);
  EXPECT_EQ(est.branch_status.back(), BranchStatus::disconnected);
  const auto [lo, hi] = index.branch_range(index.num_branches() - 1);
  const auto np = static_cast<Eigen::Index>(index.size());
  for (auto i = lo; i < hi; ++i) {
    EXPECT_EQ(est.theta_refined(static_cast<Eigen::Index>(i)), 0.0);
    EXPECT_EQ(est.theta_refined(np + static_cast<Eigen::Index>(i)), 0.0);
  }
  EXPECT_TRUE(est.refinement.converged);
}

TEST(Pipeline, SeriesMustCoverTheNetwork) {
  const Scenario sc("feeder4.json", "feeder4_dynamics.json", 100, 16);
  const auto other = load_network(kData / "feeder13.json");
  EXPECT_THROW(run_pipeline(other, sc.series), DimensionMismatch);
}
