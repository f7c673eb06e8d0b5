#pragma once

// Stage 2: quasi-Newton refinement of the branch parameters on the power
// mismatch. Unknowns are z = [theta; d_delta], theta = [vec(G); vec(B)] in
// ParameterIndex order and d_delta one angle correction per non-slack node,
// shared by every snapshot. The first inverse Jacobian is the pseudo-inverse
// of the analytic one; later iterations use good-Broyden rank-one updates.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/ousim.hpp"
#include "lineest/powerflow.hpp"

namespace lineest {

/// One measured operating point: V, delta, P, Q over all nodes.
struct Snapshot {
  Eigen::VectorXd v, delta, p, q;
};

enum class Aggregation {
  mean,       ///< one snapshot of time-averaged channels
  snapshots,  ///< evenly spaced raw samples stacked as extra rows
};

/// Indices of `count` samples spread evenly over [0, samples).
inline std::vector<std::size_t> snapshot_indices(std::size_t samples, std::size_t count) {
  if (samples == 0 || count == 0) return {};
  count = std::min(count, samples);
  std::vector<std::size_t> idx(count);
  if (count == 1) return {samples / 2};
  for (std::size_t k = 0; k < count; ++k)
    idx[k] = static_cast<std::size_t>(std::llround(static_cast<double>(k) * static_cast<double>(samples - 1) /
                                                   static_cast<double>(count - 1)));
  return idx;
}

inline std::vector<Snapshot> make_snapshots(const MeasurementSeries& series, Aggregation mode, std::size_t count) {
  if (series.samples() == 0) throw DataError("make_snapshots: empty series");
  if (mode == Aggregation::mean)
    return {{series.v.colwise().mean().transpose(), series.delta.colwise().mean().transpose(),
             series.p.colwise().mean().transpose(), series.q.colwise().mean().transpose()}};
  std::vector<Snapshot> out;
  for (auto i : snapshot_indices(series.samples(), count)) {
    const auto r = static_cast<Eigen::Index>(i);
    out.push_back({series.v.row(r).transpose(), series.delta.row(r).transpose(), series.p.row(r).transpose(),
                   series.q.row(r).transpose()});
  }
  return out;
}

/// Mismatch system over a fixed set of snapshots. Residual rows per snapshot:
/// [P at `rows`; Q at `rows`].
class RefinementProblem {
 public:
  RefinementProblem(const NetworkModel& net, std::vector<Snapshot> snapshots)
      : net_(&net), nodes_(net), index_(net), rows_(measurement_nodes(net, nodes_)), snaps_(std::move(snapshots)) {
    const auto n = static_cast<Eigen::Index>(nodes_.size());
    for (const auto& s : snaps_)
      if (s.v.size() != n || s.delta.size() != n || s.p.size() != n || s.q.size() != n)
        throw DimensionMismatch("snapshot does not cover every node");
  }

  const NetworkModel& network() const { return *net_; }
  const NodeMap& nodes() const { return nodes_; }
  const ParameterIndex& index() const { return index_; }
  const std::vector<std::size_t>& rows() const { return rows_; }
  const std::vector<Snapshot>& snapshots() const { return snaps_; }

  Eigen::Index num_parameters() const { return 2 * static_cast<Eigen::Index>(index_.size()); }
  Eigen::Index num_angles() const { return static_cast<Eigen::Index>(nodes_.num_states()); }
  Eigen::Index num_unknowns() const { return num_parameters() + num_angles(); }
  Eigen::Index num_residuals() const {
    return 2 * static_cast<Eigen::Index>(rows_.size() * snaps_.size());
  }

  /// Measured minus modelled injections at theta with angles shifted by d_delta.
  Eigen::VectorXd mismatch(const Eigen::Ref<const Eigen::VectorXd>& theta,
                           const Eigen::Ref<const Eigen::VectorXd>& d_delta) const {
    check(theta, d_delta);
    Eigen::VectorXd r(num_residuals());
    if (rows_.empty()) return r;
    const auto ybus = assemble_from_parameters(*net_, nodes_, index_, theta);
    const auto nr = static_cast<Eigen::Index>(rows_.size());
    for (std::size_t s = 0; s < snaps_.size(); ++s) {
      const auto inj = injections(ybus, snaps_[s].v, shifted(snaps_[s].delta, d_delta));
      const auto base = 2 * nr * static_cast<Eigen::Index>(s);
      for (Eigen::Index i = 0; i < nr; ++i) {
        const auto k = static_cast<Eigen::Index>(rows_[static_cast<std::size_t>(i)]);
        r(base + i) = snaps_[s].p(k) - inj.p(k);
        r(base + nr + i) = snaps_[s].q(k) - inj.q(k);
      }
    }
    return r;
  }

  /// d(model)/dz, z = [theta; d_delta].
  Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& theta,
                           const Eigen::Ref<const Eigen::VectorXd>& d_delta) const {
    check(theta, d_delta);
    const auto np = static_cast<Eigen::Index>(index_.size());
    const auto m = num_angles();
    const auto nr = static_cast<Eigen::Index>(rows_.size());
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(num_residuals(), num_unknowns());
    if (rows_.empty()) return j;
    const auto ybus = assemble_from_parameters(*net_, nodes_, index_, theta);
    for (std::size_t s = 0; s < snaps_.size(); ++s) {
      const auto pj = parameter_jacobian(*net_, nodes_, index_, ybus, snaps_[s].v,
                                         shifted(snaps_[s].delta, d_delta), rows_);
      const auto base = 2 * nr * static_cast<Eigen::Index>(s);
      j.block(base, 0, nr, np) = pj.p_g;
      j.block(base, np, nr, np) = pj.p_b;
      j.block(base, 2 * np, nr, m) = pj.p_delta;
      j.block(base + nr, 0, nr, np) = pj.q_g;
      j.block(base + nr, np, nr, np) = pj.q_b;
      j.block(base + nr, 2 * np, nr, m) = pj.q_delta;
    }
    return j;
  }

 private:
  void check(const Eigen::Ref<const Eigen::VectorXd>& theta, const Eigen::Ref<const Eigen::VectorXd>& d_delta) const {
    if (theta.size() != num_parameters()) throw DimensionMismatch("parameter vector has wrong length");
    if (d_delta.size() != num_angles()) throw DimensionMismatch("angle correction has wrong length");
  }

  Eigen::VectorXd shifted(const Eigen::VectorXd& delta, const Eigen::Ref<const Eigen::VectorXd>& d_delta) const {
    Eigen::VectorXd out = delta;
    for (std::size_t s = 0; s < nodes_.num_states(); ++s)
      out(static_cast<Eigen::Index>(nodes_.state_node(s))) += d_delta(static_cast<Eigen::Index>(s));
    return out;
  }

  const NetworkModel* net_;
  NodeMap nodes_;
  ParameterIndex index_;
  std::vector<std::size_t> rows_;
  std::vector<Snapshot> snaps_;
};

/// Moore-Penrose pseudo-inverse. Tall inputs go through a thin QR so that
/// only the small triangular factor needs the SVD: pinv(QR) = pinv(R) Q^T.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  const auto rows = a.rows(), cols = a.cols();
  if (rows == 0 || cols == 0) return Eigen::MatrixXd::Zero(cols, rows);
  auto svd_pinv = [](const Eigen::MatrixXd& m) {
    const Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cut = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(m.rows(), m.cols())) *
                       (sv.size() > 0 ? sv(0) : 0.0);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv(i) > cut) inv(i) = 1.0 / sv(i);
    return Eigen::MatrixXd(svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose());
  };
  if (rows <= cols) return svd_pinv(a);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return svd_pinv(r) * q.transpose();
}

struct RefinementOptions {
  double tolerance = 1e-8;        ///< on the mismatch infinity norm
  int max_iterations = 50;
  double step_cap = 0.10;         ///< step norm <= step_cap * max(|theta|, 1)
  int divergence_window = 5;      ///< consecutive residual increases that abort
  int relinearize_every = 0;      ///< 0: strict Broyden after the first Jacobian
  bool solve_angles = true;       ///< include d_delta among the unknowns
  double stationary_step = 1e-13; ///< relative step below which iteration stops
};

enum class RefinementStatus { converged, max_iterations, diverging, stationary };

inline const char* to_string(RefinementStatus s) {
  switch (s) {
    case RefinementStatus::converged: return "converged";
    case RefinementStatus::max_iterations: return "max_iterations";
    case RefinementStatus::diverging: return "diverging";
    case RefinementStatus::stationary: return "stationary";
  }
  return "?";
}

struct RefinementResult {
  Eigen::VectorXd theta;
  Eigen::VectorXd d_delta;
  int iterations = 0;
  double mismatch_norm = 0.0;  ///< infinity norm at the returned iterate
  bool converged = false;      ///< mismatch_norm < tolerance
  RefinementStatus status = RefinementStatus::max_iterations;
  std::vector<double> history;  ///< mismatch infinity norm per iterate, starting at theta0
};

/// Best iterate is returned on every exit path. Non-convergence is reported
/// through the status, not thrown.
inline RefinementResult broyden_refine(const RefinementProblem& problem, const Eigen::Ref<const Eigen::VectorXd>& theta0,
                                       const RefinementOptions& opt = {}) {
  if (theta0.size() != problem.num_parameters()) throw DimensionMismatch("initial parameter vector has wrong length");
  if (!theta0.allFinite()) throw DataError("initial parameter vector is not finite");
  const auto np2 = problem.num_parameters();
  const auto m = problem.num_angles();
  const Eigen::Index nz = opt.solve_angles ? np2 + m : np2;

  Eigen::VectorXd z = Eigen::VectorXd::Zero(np2 + m);
  z.head(np2) = theta0;
  // Parameters of disconnected branches never move.
  Eigen::VectorXd free_mask = Eigen::VectorXd::Ones(nz);
  const auto& index = problem.index();
  for (std::size_t i = 0; i < index.size(); ++i)
    if (!index.connected(index.entry(i).branch)) {
      free_mask(static_cast<Eigen::Index>(i)) = 0.0;
      free_mask(np2 / 2 + static_cast<Eigen::Index>(i)) = 0.0;
    }
  auto residual = [&](const Eigen::VectorXd& x) {  // model - measured
    return Eigen::VectorXd(-problem.mismatch(x.head(np2), x.tail(m)));
  };
  auto inverse_jacobian = [&](const Eigen::VectorXd& x) {
    return pseudo_inverse(problem.jacobian(x.head(np2), x.tail(m)).leftCols(nz));
  };
  auto norm_inf = [](const Eigen::VectorXd& f) { return f.size() == 0 ? 0.0 : f.cwiseAbs().maxCoeff(); };

  // Progress (best iterate, divergence) is judged on the 2-norm, the quantity
  // the pseudo-inverse step minimizes; convergence on the infinity norm.
  RefinementResult out;
  Eigen::VectorXd f = residual(z);
  double cost = f.norm();
  out.history.push_back(norm_inf(f));
  Eigen::VectorXd best = z;
  double best_cost = cost, best_inf = out.history.back();

  auto finish = [&](RefinementStatus status) {
    out.theta = best.head(np2);
    out.d_delta = best.tail(m);
    out.mismatch_norm = best_inf;
    out.converged = best_inf < opt.tolerance;
    out.status = out.converged ? RefinementStatus::converged : status;
    return out;
  };
  if (best_inf < opt.tolerance) return finish(RefinementStatus::converged);

  Eigen::MatrixXd h = inverse_jacobian(z);
  int increases = 0;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    if (opt.relinearize_every > 0 && it > 1 && (it - 1) % opt.relinearize_every == 0) h = inverse_jacobian(z);
    Eigen::VectorXd step = -(h * f).cwiseProduct(free_mask);
    const double cap = opt.step_cap * std::max(z.head(np2).norm(), 1.0);
    const double len = step.norm();
    if (!std::isfinite(len)) return finish(RefinementStatus::diverging);
    if (len > cap) step *= cap / len;
    if (step.norm() <= opt.stationary_step * std::max(z.head(nz).norm(), 1.0)) {
      out.iterations = it - 1;
      return finish(RefinementStatus::stationary);
    }

    z.head(nz) += step;
    const Eigen::VectorXd f_new = residual(z);
    const double inf_new = norm_inf(f_new);
    const double cost_new = f_new.norm();
    out.iterations = it;
    out.history.push_back(inf_new);
    if (!std::isfinite(cost_new)) return finish(RefinementStatus::diverging);
    if (inf_new < opt.tolerance || cost_new < best_cost) {
      best = z;
      best_cost = cost_new;
      best_inf = inf_new;
    }
    if (inf_new < opt.tolerance) return finish(RefinementStatus::converged);
    increases = cost_new > cost ? increases + 1 : 0;
    if (increases >= opt.divergence_window) return finish(RefinementStatus::diverging);

    // Good Broyden on the inverse: H += (s - H y) s^T H / (s^T H y).
    const Eigen::VectorXd y = f_new - f;
    const Eigen::VectorXd hy = h * y;
    const double denom = step.dot(hy);
    if (std::abs(denom) > std::numeric_limits<double>::epsilon() * step.norm() * hy.norm())
      h += ((step - hy) / denom) * (step.transpose() * h);
    f = f_new;
    cost = cost_new;
  }
  return finish(RefinementStatus::max_iterations);
}

}  // namespace lineest
