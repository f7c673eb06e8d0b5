#pragma once

// Polar multiphase power injections, Newton-Raphson power flow, and the
// analytic Jacobians with respect to states (angles, magnitudes) and branch
// parameters (conductance, susceptance).

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"

namespace lineest {

/// Per-node voltage magnitude (pu), angle (rad) and injections (pu). Injections
/// follow the generator convention: loads are negative.
struct OperatingPoint {
  Eigen::VectorXd v;
  Eigen::VectorXd delta;
  Eigen::VectorXd p;
  Eigen::VectorXd q;
};

struct Injections {
  Eigen::VectorXd p;
  Eigen::VectorXd q;
};

/// P_k = V_k sum_l V_l (G_kl cos d_kl + B_kl sin d_kl),
/// Q_k = V_k sum_l V_l (G_kl sin d_kl - B_kl cos d_kl), d_kl = delta_k - delta_l.
inline Injections injections(const BusAdmittance& ybus, const Eigen::Ref<const Eigen::VectorXd>& v,
                             const Eigen::Ref<const Eigen::VectorXd>& delta) {
  const auto n = static_cast<Eigen::Index>(ybus.size());
  if (v.size() != n || delta.size() != n)
    throw DimensionMismatch("injections: expected " + std::to_string(n) + " node voltages, got " +
                            std::to_string(v.size()) + "/" + std::to_string(delta.size()));
  Injections out{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  for (const auto& [k, l] : ybus.pattern) {
    const double d = delta(k) - delta(l);
    const double c = std::cos(d), s = std::sin(d);
    const double g = ybus.g(k, l), b = ybus.b(k, l);
    out.p(k) += v(l) * (g * c + b * s);
    out.q(k) += v(l) * (g * s - b * c);
  }
  out.p.array() *= v.array();
  out.q.array() *= v.array();
  return out;
}

/// Four m x m blocks over non-slack nodes (state order of NodeMap).
struct StateJacobian {
  Eigen::MatrixXd p_delta;
  Eigen::MatrixXd p_v;
  Eigen::MatrixXd q_delta;
  Eigen::MatrixXd q_v;

  /// [[P_delta, P_v], [Q_delta, Q_v]].
  Eigen::MatrixXd full() const {
    const auto m = p_delta.rows();
    Eigen::MatrixXd j(2 * m, 2 * m);
    j << p_delta, p_v, q_delta, q_v;
    return j;
  }

  static StateJacobian from_full(const Eigen::Ref<const Eigen::MatrixXd>& j) {
    const auto m = j.rows() / 2;
    return {j.topLeftCorner(m, m), j.topRightCorner(m, m), j.bottomLeftCorner(m, m), j.bottomRightCorner(m, m)};
  }
};

/// Partial derivatives of (P_k, Q_k) with respect to (delta_l, V_l).
struct InjectionPartials {
  double p_delta, p_v, q_delta, q_v;
};

/// `pk`, `qk` are the injections at node k evaluated at (v, delta).
inline InjectionPartials injection_partials(const BusAdmittance& ybus, const Eigen::Ref<const Eigen::VectorXd>& v,
                                            const Eigen::Ref<const Eigen::VectorXd>& delta, Eigen::Index k,
                                            Eigen::Index l, double pk, double qk) {
  const double g = ybus.g(k, l), b = ybus.b(k, l);
  if (k == l) {
    const double vk = v(k);
    return {-qk - b * vk * vk, pk / vk + g * vk, pk - g * vk * vk, qk / vk - b * vk};
  }
  const double d = delta(k) - delta(l);
  const double c = std::cos(d), s = std::sin(d);
  const double vk = v(k), vl = v(l);
  return {vk * vl * (g * s - b * c), vk * (g * c + b * s), -vk * vl * (g * c + b * s), vk * (g * s - b * c)};
}

inline StateJacobian state_jacobian(const BusAdmittance& ybus, const NodeMap& nodes,
                                    const Eigen::Ref<const Eigen::VectorXd>& v,
                                    const Eigen::Ref<const Eigen::VectorXd>& delta) {
  const auto inj = injections(ybus, v, delta);
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  StateJacobian jac{Eigen::MatrixXd::Zero(m, m), Eigen::MatrixXd::Zero(m, m), Eigen::MatrixXd::Zero(m, m),
                    Eigen::MatrixXd::Zero(m, m)};
  for (const auto& [k, l] : ybus.pattern) {
    const int sk = nodes.state_index(k), sl = nodes.state_index(l);
    if (sk < 0 || sl < 0) continue;
    const auto d = injection_partials(ybus, v, delta, k, l, inj.p(k), inj.q(k));
    jac.p_delta(sk, sl) = d.p_delta;
    jac.p_v(sk, sl) = d.p_v;
    jac.q_delta(sk, sl) = d.q_delta;
    jac.q_v(sk, sl) = d.q_v;
  }
  return jac;
}

inline StateJacobian state_jacobian(const BusAdmittance& ybus, const NodeMap& nodes, const OperatingPoint& op) {
  return state_jacobian(ybus, nodes, op.v, op.delta);
}

/// Flat start: unit magnitudes and phase-native angles at every node.
inline OperatingPoint flat_start(const NodeMap& nodes) {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  OperatingPoint op{Eigen::VectorXd::Ones(n), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n),
                    Eigen::VectorXd::Zero(n)};
  for (Eigen::Index k = 0; k < n; ++k) op.delta(k) = nominal_angle(nodes.node(k).phase);
  return op;
}

struct PowerFlowOptions {
  double tolerance = 1e-8;
  int max_iterations = 50;
  int max_step_halvings = 4;
};

/// Newton-Raphson on the non-slack nodes. `p_set`/`q_set` are indexed by node;
/// slack entries are ignored. The slack is held at 1 pu and phase-native angles.
inline OperatingPoint solve_power_flow(const BusAdmittance& ybus, const NodeMap& nodes,
                                       const Eigen::Ref<const Eigen::VectorXd>& p_set,
                                       const Eigen::Ref<const Eigen::VectorXd>& q_set,
                                       const PowerFlowOptions& options = {}) {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  if (p_set.size() != n || q_set.size() != n) throw DimensionMismatch("solve_power_flow: setpoint size mismatch");
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  OperatingPoint op = flat_start(nodes);

  auto residual = [&](const OperatingPoint& x, Eigen::VectorXd& f) {
    const auto inj = injections(ybus, x.v, x.delta);
    f.resize(2 * m);
    for (Eigen::Index s = 0; s < m; ++s) {
      const auto k = static_cast<Eigen::Index>(nodes.state_node(s));
      f(s) = inj.p(k) - p_set(k);
      f(m + s) = inj.q(k) - q_set(k);
    }
    return f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
  };

  Eigen::VectorXd f;
  double norm = residual(op, f);
  for (int it = 0; it < options.max_iterations && norm >= options.tolerance; ++it) {
    const Eigen::VectorXd dx = state_jacobian(ybus, nodes, op).full().partialPivLu().solve(-f);
    double scale = 1.0;
    OperatingPoint trial = op;
    Eigen::VectorXd ftrial;
    double trial_norm = 0.0;
    for (int h = 0; h <= options.max_step_halvings; ++h, scale *= 0.5) {
      trial = op;
      for (Eigen::Index s = 0; s < m; ++s) {
        const auto k = static_cast<Eigen::Index>(nodes.state_node(s));
        trial.delta(k) += scale * dx(s);
        trial.v(k) += scale * dx(m + s);
      }
      trial_norm = residual(trial, ftrial);
      if (std::isfinite(trial_norm) && trial_norm < norm) break;
    }
    if (!std::isfinite(trial_norm) || (trial.v.array() <= 0.0).any())
      throw NonConvergence("power flow diverged at iteration " + std::to_string(it), norm);
    op = std::move(trial);
    f = std::move(ftrial);
    norm = trial_norm;
  }
  if (!(norm < options.tolerance))
    throw NonConvergence("power flow did not converge in " + std::to_string(options.max_iterations) +
                             " iterations (residual " + std::to_string(norm) + " pu)",
                         norm);
  const auto inj = injections(ybus, op.v, op.delta);
  op.p = inj.p;
  op.q = inj.q;
  return op;
}

/// One estimable quantity: entry (n, p) of the admittance block of a branch.
struct ParameterEntry {
  std::size_t branch = 0;
  Phase n = Phase::a;
  Phase p = Phase::a;
};

/// Parameter vectorization shared by both estimation stages: branches in file
/// order, active phase pairs row-major. theta = [vec(G); vec(B)].
class ParameterIndex {
 public:
  ParameterIndex() = default;

  explicit ParameterIndex(const NetworkModel& net) {
    for (std::size_t br = 0; br < net.branches.size(); ++br) {
      const auto phases = net.branches[br].phases.phases();
      first_.push_back(entries_.size());
      for (Phase n : phases)
        for (Phase p : phases) entries_.push_back({br, n, p});
      connected_.push_back(net.branches[br].connected);
    }
    first_.push_back(entries_.size());
  }

  /// Number of phase-pair entries (theta has twice this length).
  std::size_t size() const { return entries_.size(); }
  const ParameterEntry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<ParameterEntry>& entries() const { return entries_; }
  bool connected(std::size_t branch) const { return connected_[branch]; }
  std::size_t num_branches() const { return connected_.size(); }
  /// Entries [begin, end) belonging to one branch.
  std::pair<std::size_t, std::size_t> branch_range(std::size_t branch) const {
    return {first_[branch], first_[branch + 1]};
  }

 private:
  std::vector<ParameterEntry> entries_;
  std::vector<std::size_t> first_;
  std::vector<bool> connected_;
};

/// theta of the network's own impedances (disconnected branches included).
inline Eigen::VectorXd true_parameters(const NetworkModel& net, const ParameterIndex& index) {
  const auto np = static_cast<Eigen::Index>(index.size());
  Eigen::VectorXd theta(2 * np);
  std::vector<BranchAdmittance> y;
  y.reserve(net.branches.size());
  for (const auto& br : net.branches) y.push_back(invert_branch_impedance(br));
  for (Eigen::Index i = 0; i < np; ++i) {
    const auto& e = index.entry(static_cast<std::size_t>(i));
    theta(i) = y[e.branch].g(phase_index(e.n), phase_index(e.p));
    theta(np + i) = y[e.branch].b(phase_index(e.n), phase_index(e.p));
  }
  return theta;
}

/// Bus admittance for a candidate parameter vector; disconnected branches skipped.
inline BusAdmittance assemble_from_parameters(const NetworkModel& net, const NodeMap& nodes,
                                              const ParameterIndex& index,
                                              const Eigen::Ref<const Eigen::VectorXd>& theta) {
  const auto np = static_cast<Eigen::Index>(index.size());
  if (theta.size() != 2 * np) throw DimensionMismatch("parameter vector has wrong length");
  const auto n = static_cast<Eigen::Index>(nodes.size());
  BusAdmittance ybus{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n), {}};
  for (std::size_t br = 0; br < index.num_branches(); ++br) {
    if (!index.connected(br)) continue;
    Eigen::Matrix3d g = Eigen::Matrix3d::Zero(), b = Eigen::Matrix3d::Zero();
    const auto [lo, hi] = index.branch_range(br);
    for (auto i = lo; i < hi; ++i) {
      const auto& e = index.entry(i);
      g(phase_index(e.n), phase_index(e.p)) = theta(static_cast<Eigen::Index>(i));
      b(phase_index(e.n), phase_index(e.p)) = theta(np + static_cast<Eigen::Index>(i));
    }
    stamp_branch(ybus, nodes, net.branches[br].from, net.branches[br].to, net.branches[br].phases, g, b);
  }
  ybus.rebuild_pattern();
  return ybus;
}

/// Nodes whose injection depends on at least one connected branch parameter.
inline std::vector<std::size_t> measurement_nodes(const NetworkModel& net, const NodeMap& nodes) {
  std::vector<bool> used(nodes.size(), false);
  for (const auto& br : net.branches) {
    if (!br.connected) continue;
    for (Phase p : br.phases.phases()) {
      used[nodes.at(br.from, p)] = true;
      used[nodes.at(br.to, p)] = true;
    }
  }
  std::vector<std::size_t> rows;
  for (std::size_t k = 0; k < used.size(); ++k)
    if (used[k]) rows.push_back(k);
  return rows;
}

/// Sensitivities of injections at the `rows` nodes. Parameter columns follow
/// ParameterIndex; angle columns follow the non-slack state order.
struct ParameterJacobian {
  Eigen::MatrixXd p_g, p_b, q_g, q_b;
  Eigen::MatrixXd p_delta, q_delta;
};

/// `ybus` must be assembled from the candidate parameters; it only enters the
/// angle blocks. Columns of disconnected branches are zero (u_ij = 0).
inline ParameterJacobian parameter_jacobian(const NetworkModel& net, const NodeMap& nodes,
                                            const ParameterIndex& index, const BusAdmittance& ybus,
                                            const Eigen::Ref<const Eigen::VectorXd>& v,
                                            const Eigen::Ref<const Eigen::VectorXd>& delta,
                                            std::span<const std::size_t> rows) {
  const auto nr = static_cast<Eigen::Index>(rows.size());
  const auto np = static_cast<Eigen::Index>(index.size());
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  ParameterJacobian jac{Eigen::MatrixXd::Zero(nr, np), Eigen::MatrixXd::Zero(nr, np),
                        Eigen::MatrixXd::Zero(nr, np), Eigen::MatrixXd::Zero(nr, np),
                        Eigen::MatrixXd::Zero(nr, m),  Eigen::MatrixXd::Zero(nr, m)};
  std::vector<int> row_of(nodes.size(), -1);
  for (Eigen::Index r = 0; r < nr; ++r) row_of[rows[static_cast<std::size_t>(r)]] = static_cast<int>(r);

  // Injection at node `self` (phase n of one endpoint) through entry (n, p):
  // +y toward the same endpoint's phase p, -y toward the far endpoint's phase p.
  auto add = [&](Eigen::Index col, std::size_t self, std::size_t near_p, std::size_t far_p) {
    const int r = row_of[self];
    if (r < 0) return;
    const double vs = v(self);
    const double dn = delta(self) - delta(near_p), df = delta(self) - delta(far_p);
    const double cosd = v(near_p) * std::cos(dn) - v(far_p) * std::cos(df);
    const double sind = v(near_p) * std::sin(dn) - v(far_p) * std::sin(df);
    jac.p_g(r, col) += vs * cosd;
    jac.p_b(r, col) += vs * sind;
    jac.q_g(r, col) += vs * sind;
    jac.q_b(r, col) -= vs * cosd;
  };
  for (Eigen::Index i = 0; i < np; ++i) {
    const auto& e = index.entry(static_cast<std::size_t>(i));
    if (!index.connected(e.branch)) continue;
    const auto& br = net.branches[e.branch];
    const auto in = nodes.at(br.from, e.n), ip = nodes.at(br.from, e.p);
    const auto jn = nodes.at(br.to, e.n), jp = nodes.at(br.to, e.p);
    add(i, in, ip, jp);
    add(i, jn, jp, ip);
  }

  const auto inj = injections(ybus, v, delta);
  for (const auto& [k, l] : ybus.pattern) {
    const int r = row_of[k];
    const int sl = nodes.state_index(l);
    if (r < 0 || sl < 0) continue;
    const auto d = injection_partials(ybus, v, delta, k, l, inj.p(k), inj.q(k));
    jac.p_delta(r, sl) = d.p_delta;
    jac.q_delta(r, sl) = d.q_delta;
  }
  return jac;
}

}  // namespace lineest
