#pragma once

// Two-stage estimation end to end: OU regression for initial branch
// parameters, then mismatch refinement.

#include <Eigen/Dense>

#include <chrono>
#include <string>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/ousim.hpp"
#include "lineest/powerflow.hpp"
#include "lineest/stage1.hpp"
#include "lineest/stage2.hpp"

namespace lineest {

struct PipelineOptions {
  std::size_t lag = 1;
  LagNormalization lag_normalization = LagNormalization::samples_minus_one;
  StateMatrixOptions state_matrix;
  ExtractionOptions extraction;
  Aggregation aggregation = Aggregation::snapshots;
  std::size_t snapshots = 300;
  RefinementOptions refinement;
  double imag_warning = 1e-8;
};

/// One connected branch phase pair.
struct EntryResult {
  std::size_t branch = 0;
  Phase n = Phase::a;
  Phase p = Phase::a;
  double g_init = 0.0, b_init = 0.0;
  double g_refined = 0.0, b_refined = 0.0;
};

struct ParameterEstimate {
  ParameterIndex index;
  Eigen::VectorXd theta_init;     ///< zeros at disconnected or failed branches
  Eigen::VectorXd theta_refined;
  std::vector<BranchStatus> branch_status;
  TimeConstants tau;
  Eigen::MatrixXd state_matrix;
  RefinementResult refinement;
  std::vector<std::string> warnings;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;

  /// Entries of connected branches only, in ParameterIndex order.
  std::vector<EntryResult> entries() const {
    std::vector<EntryResult> out;
    const auto np = static_cast<Eigen::Index>(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
      const auto& e = index.entry(i);
      if (!index.connected(e.branch)) continue;
      const auto k = static_cast<Eigen::Index>(i);
      out.push_back({e.branch, e.n, e.p, theta_init(k), theta_init(np + k), theta_refined(k), theta_refined(np + k)});
    }
    return out;
  }
};

inline ParameterEstimate run_pipeline(const NetworkModel& net, const MeasurementSeries& series,
                                      const PipelineOptions& opt = {}) {
  using clock = std::chrono::steady_clock;
  const NodeMap nodes(net);
  if (series.num_nodes() != nodes.size())
    throw DimensionMismatch("series covers " + std::to_string(series.num_nodes()) + " nodes, network has " +
                            std::to_string(nodes.size()));
  ParameterEstimate est;
  est.index = ParameterIndex(net);

  const auto t0 = clock::now();
  const auto cov = covariances(series, nodes, opt.lag, opt.lag_normalization);
  const auto a = estimate_state_matrix(cov, opt.state_matrix);
  est.state_matrix = a.a;
  if (a.imag_residue > opt.imag_warning)
    est.warnings.push_back("matrix logarithm imaginary residue " + std::to_string(a.imag_residue) + " discarded");
  if (a.ridge > 0.0) est.warnings.push_back("zero-lag covariance regularized by " + std::to_string(a.ridge));
  est.tau = estimate_time_constants(series, nodes);
  for (const auto& f : est.tau.failures) est.warnings.push_back("time constant: " + f);
  const auto jac = jacobian_from_state_matrix(a.a, est.tau);
  const auto op = mean_operating_point(series);
  auto init = extract_initial_parameters(jac, est.tau, op, net, nodes, est.index, opt.extraction);
  est.theta_init = init.theta;
  est.branch_status = std::move(init.status);
  const auto t1 = clock::now();

  const RefinementProblem problem(net, make_snapshots(series, opt.aggregation, opt.snapshots));
  est.refinement = broyden_refine(problem, est.theta_init, opt.refinement);
  est.theta_refined = est.refinement.theta;
  if (!est.refinement.converged)
    est.warnings.push_back(std::string("refinement stopped: ") + to_string(est.refinement.status) +
                           ", mismatch " + std::to_string(est.refinement.mismatch_norm));
  const auto t2 = clock::now();
  est.stage1_seconds = std::chrono::duration<double>(t1 - t0).count();
  est.stage2_seconds = std::chrono::duration<double>(t2 - t1).count();
  return est;
}

}  // namespace lineest
