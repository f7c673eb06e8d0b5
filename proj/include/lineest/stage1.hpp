#pragma once

// Stage 1: OU regression. Lagged sample covariances of the state [angles;
// magnitudes] give the drift matrix through the principal matrix logarithm;
// per-node least-squares regressions give the load time constants; unscaling
// the drift matrix gives the state Jacobian, from which bus admittance entries
// and initial branch parameters follow by small weighted least-squares solves.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/ousim.hpp"
#include "lineest/powerflow.hpp"

namespace lineest {

/// State samples as columns: F = [x_1 ... x_S], x = [delta; V] over non-slack nodes.
inline Eigen::MatrixXd state_samples(const MeasurementSeries& series, const NodeMap& nodes) {
  if (series.num_nodes() != nodes.size())
    throw DimensionMismatch("series has " + std::to_string(series.num_nodes()) + " nodes, network has " +
                            std::to_string(nodes.size()));
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  const auto s = static_cast<Eigen::Index>(series.samples());
  Eigen::MatrixXd f(2 * m, s);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto k = static_cast<Eigen::Index>(nodes.state_node(static_cast<std::size_t>(i)));
    f.row(i) = series.delta.col(k).transpose();
    f.row(m + i) = series.v.col(k).transpose();
  }
  return f;
}

inline Eigen::VectorXd sample_mean(const Eigen::Ref<const Eigen::MatrixXd>& f) {
  if (f.cols() < 2) throw DataError("sample_mean: at least two samples required");
  return f.rowwise().mean();
}

inline Eigen::VectorXd sample_mean(const MeasurementSeries& series, const NodeMap& nodes) {
  return sample_mean(state_samples(series, nodes));
}

enum class LagNormalization {
  samples_minus_one,      ///< 1/(S-1) for both covariances
  lagged_minus_one,       ///< 1/(S-K-1) for the lagged covariance
};

struct CovariancePair {
  Eigen::MatrixXd c0;
  Eigen::MatrixXd lagged;
  std::size_t lag = 1;
  double lag_time = 0.0;  ///< K * dt
};

inline CovariancePair covariances(const Eigen::Ref<const Eigen::MatrixXd>& f, std::size_t lag, double dt,
                                  LagNormalization norm = LagNormalization::samples_minus_one) {
  const auto s = f.cols();
  const auto k = static_cast<Eigen::Index>(lag);
  if (lag < 1 || k >= s) throw DataError("covariances: lag must satisfy 1 <= K < S");
  const Eigen::VectorXd mu = sample_mean(f);
  const Eigen::MatrixXd x = f.colwise() - mu;
  CovariancePair out;
  out.lag = lag;
  out.lag_time = static_cast<double>(lag) * dt;
  out.c0 = x * x.transpose() / static_cast<double>(s - 1);
  const double lag_den = norm == LagNormalization::samples_minus_one ? static_cast<double>(s - 1)
                                                                      : static_cast<double>(s - k - 1);
  out.lagged = x.rightCols(s - k) * x.leftCols(s - k).transpose() / lag_den;
  const double tr = out.c0.trace();
  if (!(tr > 0.0) || !std::isfinite(tr)) throw DegenerateSamples("zero-lag covariance is zero or non-finite");
  return out;
}

inline CovariancePair covariances(const MeasurementSeries& series, const NodeMap& nodes, std::size_t lag,
                                  LagNormalization norm = LagNormalization::samples_minus_one) {
  return covariances(state_samples(series, nodes), lag, series.dt, norm);
}

enum class RidgeMode { automatic, always, never };

struct StateMatrixOptions {
  RidgeMode ridge = RidgeMode::automatic;
  double ridge_scale = 1e-12;  ///< eps = ridge_scale * trace(C0) / m
  /// Automatic mode regularizes when the reciprocal condition estimate of C0 is below this.
  double ridge_trigger = 1e-13;
};

struct StateMatrixEstimate {
  Eigen::MatrixXd a;
  /// Largest |Im| of the logarithm relative to max(1, largest |Re|), before discarding.
  double imag_residue = 0.0;
  double ridge = 0.0;
};

/// Principal logarithm of a real matrix with no eigenvalues on the closed
/// negative real axis. Returns the complex result; callers take the real part.
inline Eigen::MatrixXcd principal_log(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  const Eigen::VectorXcd eig = m.eigenvalues();
  const double scale = std::max(1.0, eig.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < eig.size(); ++i) {
    const auto z = eig(i);
    if (z.real() <= 0.0 && std::abs(z.imag()) <= 1e-12 * scale)
      throw LogBranchError("matrix has eigenvalue " + std::to_string(z.real()) + (z.imag() >= 0 ? "+" : "") +
                           std::to_string(z.imag()) + "i on the closed negative real axis; no principal logarithm");
  }
  const Eigen::MatrixXcd mc = m.cast<std::complex<double>>();
  return mc.log();
}

/// A = ln(C(lag) C(0)^{-1}) / (K dt).
inline StateMatrixEstimate estimate_state_matrix(const CovariancePair& cov, const StateMatrixOptions& opt = {}) {
  const auto n = cov.c0.rows();
  if (cov.c0.cols() != n || cov.lagged.rows() != n || cov.lagged.cols() != n)
    throw DimensionMismatch("estimate_state_matrix: covariance shapes differ");
  if (!(cov.lag_time > 0.0)) throw DataError("estimate_state_matrix: lag time must be positive");

  StateMatrixEstimate out;
  Eigen::MatrixXd c0 = cov.c0;
  const Eigen::MatrixXd sym = 0.5 * (c0 + c0.transpose());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sym);
  // rcond() alone misses exact zero pivots; the pivot spread catches them.
  auto conditioning = [](const Eigen::LDLT<Eigen::MatrixXd>& f) {
    const Eigen::VectorXd d = f.vectorD();
    const double spread = d.size() ? d.minCoeff() / d.cwiseAbs().maxCoeff() : 1.0;
    return std::min(f.rcond(), spread);
  };
  bool need_ridge = opt.ridge == RidgeMode::always;
  if (opt.ridge == RidgeMode::automatic)
    need_ridge = ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(conditioning(ldlt) >= opt.ridge_trigger);
  if (need_ridge) {
    out.ridge = opt.ridge_scale * sym.trace() / static_cast<double>(n);
    c0 = sym + out.ridge * Eigen::MatrixXd::Identity(n, n);
    ldlt.compute(c0);
  } else {
    c0 = sym;
  }
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      !(conditioning(ldlt) > std::numeric_limits<double>::epsilon()))
    throw SingularCovariance("zero-lag covariance is not invertible");

  // M = C(lag) C0^{-1} = (C0^{-1} C(lag)^T)^T since C0 is symmetric.
  const Eigen::MatrixXd m = ldlt.solve(cov.lagged.transpose()).transpose();
  const Eigen::MatrixXcd log_m = principal_log(m);
  const double re_max = std::max(1.0, log_m.real().cwiseAbs().maxCoeff());
  out.imag_residue = log_m.imag().cwiseAbs().maxCoeff() / re_max;
  out.a = log_m.real() / cov.lag_time;
  return out;
}

/// Regression of the per-sample state increment on (mean power - power):
///   (x_k - x_{k-1}) / dt = (mu_P - P_{k-1}) / tau.
/// Returns tau. `weights` (length S-1) defaults to ones.
inline double estimate_time_constant(std::span<const double> state, std::span<const double> power, double dt,
                                     std::span<const double> weights = {}) {
  const std::size_t s = state.size();
  if (s < 3 || power.size() != s) throw DataError("estimate_time_constant: need >= 3 aligned samples");
  if (!weights.empty() && weights.size() != s - 1) throw DimensionMismatch("weights must have S-1 entries");
  double mu = 0.0;
  for (double p : power) mu += p;
  mu /= static_cast<double>(s);
  double ltwl = 0.0, ltwu = 0.0;
  for (std::size_t k = 1; k < s; ++k) {
    const double w = weights.empty() ? 1.0 : weights[k - 1];
    const double u = (state[k] - state[k - 1]) / dt;
    const double l = mu - power[k - 1];
    ltwl += w * l * l;
    ltwu += w * l * u;
  }
  const double beta = ltwu / ltwl;
  // Power spread at rounding level of the mean counts as no excitation.
  const double floor = 1e-24 * static_cast<double>(s) * std::max(mu * mu, std::numeric_limits<double>::min());
  if (!(ltwl > floor) || !std::isfinite(beta) || !(beta > 0.0))
    throw NonPositiveTau("time-constant regression gave 1/tau = " + std::to_string(beta) +
                         " (insufficient excitation or static load)");
  return 1.0 / beta;
}

struct TimeConstants {
  Eigen::VectorXd tau_p;  ///< NaN where the regression failed
  Eigen::VectorXd tau_q;
  std::vector<std::string> failures;

  bool valid(std::size_t s) const {
    const auto i = static_cast<Eigen::Index>(s);
    return std::isfinite(tau_p(i)) && std::isfinite(tau_q(i));
  }
};

/// tau_p from angle increments against P, tau_q from magnitude increments against Q.
inline TimeConstants estimate_time_constants(const MeasurementSeries& series, const NodeMap& nodes) {
  if (series.num_nodes() != nodes.size()) throw DimensionMismatch("estimate_time_constants: node count");
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  const auto s = static_cast<std::size_t>(series.samples());
  TimeConstants out{Eigen::VectorXd::Constant(m, std::numeric_limits<double>::quiet_NaN()),
                    Eigen::VectorXd::Constant(m, std::numeric_limits<double>::quiet_NaN()),
                    {}};
  std::vector<double> x(s), pw(s);
  auto column = [&](const Eigen::MatrixXd& mat, Eigen::Index k, std::vector<double>& dst) {
    for (std::size_t r = 0; r < s; ++r) dst[r] = mat(static_cast<Eigen::Index>(r), k);
  };
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto k = static_cast<Eigen::Index>(nodes.state_node(static_cast<std::size_t>(i)));
    try {
      column(series.delta, k, x);
      column(series.p, k, pw);
      out.tau_p(i) = estimate_time_constant(x, pw, series.dt);
      column(series.v, k, x);
      column(series.q, k, pw);
      out.tau_q(i) = estimate_time_constant(x, pw, series.dt);
    } catch (const NonPositiveTau& e) {
      out.tau_p(i) = out.tau_q(i) = std::numeric_limits<double>::quiet_NaN();
      out.failures.push_back("state " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

/// J = -diag(tau_p, tau_q) A (inverse of A = -diag(1/tau) J).
inline StateJacobian jacobian_from_state_matrix(const Eigen::Ref<const Eigen::MatrixXd>& a,
                                                const TimeConstants& tau) {
  const auto m = tau.tau_p.size();
  if (a.rows() != 2 * m || a.cols() != 2 * m) throw DimensionMismatch("jacobian_from_state_matrix: shape");
  Eigen::VectorXd t(2 * m);
  t << tau.tau_p, tau.tau_q;
  return StateJacobian::from_full(-(t.asDiagonal() * a));
}

/// Solution of one 4x2 weighted least-squares system for a bus admittance entry.
struct EntryEstimate {
  double g = 0.0;
  double b = 0.0;
};

struct ExtractionOptions {
  /// 4x4 weight matrix; identity when empty.
  Eigen::Matrix4d weight = Eigen::Matrix4d::Identity();
  double condition_bound = 1e12;
};

/// beta = (L^T W L)^{-1} L^T W U.
inline EntryEstimate solve_entry(const Eigen::Matrix<double, 4, 2>& l, const Eigen::Vector4d& u,
                                 const ExtractionOptions& opt) {
  const Eigen::Matrix2d ltwl = l.transpose() * opt.weight * l;
  const Eigen::JacobiSVD<Eigen::Matrix2d> svd(ltwl);
  const double smin = svd.singularValues()(1), smax = svd.singularValues()(0);
  if (!(smin > 0.0) || smax / smin > opt.condition_bound)
    throw IllConditionedL("L^T W L is ill-conditioned (" + std::to_string(smax) + " / " + std::to_string(smin) + ")");
  const Eigen::Vector2d beta = ltwl.ldlt().solve(l.transpose() * opt.weight * u);
  return {beta(0), beta(1)};
}

/// Bus admittance entry (k, l) between two non-slack nodes from the four
/// Jacobian entries of row k. `op` supplies V, delta (and P, Q for k == l).
inline EntryEstimate estimate_bus_entry(const StateJacobian& jac, const NodeMap& nodes, const OperatingPoint& op,
                                        std::size_t k, std::size_t l, const ExtractionOptions& opt = {}) {
  const int sk = nodes.state_index(k), sl = nodes.state_index(l);
  if (sk < 0 || sl < 0) throw DataError("estimate_bus_entry: slack nodes carry no Jacobian rows");
  const auto ki = static_cast<Eigen::Index>(k), li = static_cast<Eigen::Index>(l);
  Eigen::Vector4d u(jac.p_delta(sk, sl), jac.p_v(sk, sl), jac.q_delta(sk, sl), jac.q_v(sk, sl));
  Eigen::Matrix<double, 4, 2> lm;
  const double vk = op.v(ki);
  if (k == l) {
    // dP/dd = -Q - B V^2, dP/dV = P/V + G V, dQ/dd = P - G V^2, dQ/dV = Q/V - B V
    u -= Eigen::Vector4d(-op.q(ki), op.p(ki) / vk, op.p(ki), op.q(ki) / vk);
    lm << 0.0, -vk * vk,  //
        vk, 0.0,          //
        -vk * vk, 0.0,    //
        0.0, -vk;
  } else {
    const double vl = op.v(li);
    const double d = op.delta(ki) - op.delta(li);
    const double c = std::cos(d), s = std::sin(d);
    lm << vk * vl * s, -vk * vl * c,  //
        vk * c, vk * s,               //
        -vk * vl * c, -vk * vl * s,   //
        vk * s, -vk * c;
  }
  return solve_entry(lm, u, opt);
}

enum class BranchStatus {
  ok,
  ill_conditioned,  ///< an L^T W L system exceeded the condition bound
  no_valid_rows,    ///< every usable Jacobian row lacked a time constant
  disconnected,
};

inline const char* to_string(BranchStatus s) {
  switch (s) {
    case BranchStatus::ok: return "ok";
    case BranchStatus::ill_conditioned: return "ill_conditioned";
    case BranchStatus::no_valid_rows: return "no_valid_rows";
    case BranchStatus::disconnected: return "disconnected";
  }
  return "?";
}

struct InitialParameters {
  Eigen::VectorXd theta;  ///< [vec(G*); vec(B*)] in ParameterIndex order
  std::vector<BranchStatus> status;
};

/// Initial (G*, B*) for every connected branch. Branch (i, j) entry (n, p)
/// equals minus the bus admittance entry (i^n, j^p), estimated from row i^n
/// (or row j^n when i^n has no valid time constant). Branches touching the
/// slack bus have no Jacobian entries toward it; they are recovered from the
/// self block at the other end minus that bus's remaining branches.
inline InitialParameters extract_initial_parameters(const StateJacobian& jac, const TimeConstants& tau,
                                                    const OperatingPoint& op, const NetworkModel& net,
                                                    const NodeMap& nodes, const ParameterIndex& index,
                                                    const ExtractionOptions& opt = {}) {
  const auto np = static_cast<Eigen::Index>(index.size());
  InitialParameters out{Eigen::VectorXd::Zero(2 * np), std::vector<BranchStatus>(index.num_branches(), BranchStatus::ok)};
  const std::size_t slack = net.slack_index();
  auto row_ok = [&](std::size_t node) {
    const int s = nodes.state_index(node);
    return s >= 0 && tau.valid(static_cast<std::size_t>(s));
  };

  // Y_branch(n, p) from the off-diagonal entry between `near` and `far`.
  auto direct = [&](std::size_t near, std::size_t far, Phase n, Phase p) -> std::optional<EntryEstimate> {
    const auto kn = nodes.at(near, n), lp = nodes.at(far, p);
    if (!row_ok(kn)) return std::nullopt;
    const auto e = estimate_bus_entry(jac, nodes, op, kn, lp, opt);
    return EntryEstimate{-e.g, -e.b};
  };

  for (std::size_t br = 0; br < index.num_branches(); ++br) {
    const auto [lo, hi] = index.branch_range(br);
    if (!index.connected(br)) {
      out.status[br] = BranchStatus::disconnected;
      continue;
    }
    const auto& branch = net.branches[br];
    try {
      for (auto i = lo; i < hi; ++i) {
        const auto& e = index.entry(i);
        std::optional<EntryEstimate> est;
        if (branch.from != slack && branch.to != slack) {
          est = direct(branch.from, branch.to, e.n, e.p);
          if (!est) est = direct(branch.to, branch.from, e.n, e.p);
        } else {
          const std::size_t bus = branch.from == slack ? branch.to : branch.from;
          const auto kn = nodes.at(bus, e.n), kp = nodes.at(bus, e.p);
          if (row_ok(kn)) {
            auto self = estimate_bus_entry(jac, nodes, op, kn, kp, opt);
            bool complete = true;
            for (std::size_t other = 0; other < net.branches.size() && complete; ++other) {
              const auto& ob = net.branches[other];
              if (other == br || !ob.connected || (ob.from != bus && ob.to != bus)) continue;
              if (!ob.phases.contains(e.n) || !ob.phases.contains(e.p)) continue;
              const std::size_t far = ob.from == bus ? ob.to : ob.from;
              const auto y = direct(bus, far, e.n, e.p);
              if (!y) {
                complete = false;
                break;
              }
              self.g -= y->g;
              self.b -= y->b;
            }
            if (complete) est = self;
          }
        }
        if (!est) {
          out.status[br] = BranchStatus::no_valid_rows;
          break;
        }
        out.theta(static_cast<Eigen::Index>(i)) = est->g;
        out.theta(np + static_cast<Eigen::Index>(i)) = est->b;
      }
    } catch (const IllConditionedL&) {
      out.status[br] = BranchStatus::ill_conditioned;
    }
    if (out.status[br] != BranchStatus::ok)
      for (auto i = lo; i < hi; ++i) {
        out.theta(static_cast<Eigen::Index>(i)) = 0.0;
        out.theta(np + static_cast<Eigen::Index>(i)) = 0.0;
      }
  }
  return out;
}

/// Per-node sample means of V, delta, P, Q.
inline OperatingPoint mean_operating_point(const MeasurementSeries& series) {
  return {series.v.colwise().mean().transpose(), series.delta.colwise().mean().transpose(),
          series.p.colwise().mean().transpose(), series.q.colwise().mean().transpose()};
}

}  // namespace lineest
