#pragma once

// Stochastic dynamic-load simulator. Each non-slack node carries a load
//   d(delta)/dt = (P^s (1 + sigma_p xi_p) - P) / tau_p
//   dV/dt       = (Q^s (1 + sigma_q xi_q) - Q) / tau_q
// coupled through the network injections, integrated by Euler-Maruyama.
//
// Linearizing around the power-flow equilibrium gives x' = A x + B xi with
//   A = -diag(1/tau_p, 1/tau_q) J,   B = diag(P^s sigma_p / tau_p, Q^s sigma_q / tau_q),
// where J is the state Jacobian of (P, Q) with respect to (delta, V). The minus
// sign comes from P entering the load equation with a negative sign; it makes
// A Hurwitz for a normally loaded feeder.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/powerflow.hpp"

namespace lineest {

struct LoadParameters {
  double tau_p = 1.0;  ///< s; 0 marks a static (constant-power) load
  double tau_q = 1.0;
  double sigma_p = 0.0;
  double sigma_q = 0.0;
  double p_set = 0.0;  ///< pu, injection convention (loads negative)
  double q_set = 0.0;

  bool is_static() const { return tau_p == 0.0 && tau_q == 0.0; }
};

/// Load parameters for every non-slack node, in NodeMap state order.
struct LoadDynamics {
  std::vector<LoadParameters> loads;

  std::size_t size() const { return loads.size(); }

  bool all_dynamic() const {
    for (const auto& l : loads)
      if (l.is_static()) return false;
    return true;
  }

  void validate(const NodeMap& nodes) const {
    if (loads.size() != nodes.num_states())
      throw DimensionMismatch("load dynamics cover " + std::to_string(loads.size()) + " nodes, network has " +
                              std::to_string(nodes.num_states()) + " non-slack nodes");
    for (std::size_t s = 0; s < loads.size(); ++s) {
      const auto& l = loads[s];
      const bool ok = std::isfinite(l.p_set) && std::isfinite(l.q_set) && l.sigma_p >= 0.0 && l.sigma_q >= 0.0 &&
                      (l.is_static() || (l.tau_p > 0.0 && l.tau_q > 0.0));
      if (!ok) throw DataError("invalid load parameters at state " + std::to_string(s));
    }
  }

  Eigen::VectorXd p_setpoints(const NodeMap& nodes) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nodes.size()));
    for (std::size_t s = 0; s < loads.size(); ++s) p(static_cast<Eigen::Index>(nodes.state_node(s))) = loads[s].p_set;
    return p;
  }

  Eigen::VectorXd q_setpoints(const NodeMap& nodes) const {
    Eigen::VectorXd q = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nodes.size()));
    for (std::size_t s = 0; s < loads.size(); ++s) q(static_cast<Eigen::Index>(nodes.state_node(s))) = loads[s].q_set;
    return q;
  }

  /// Uniform sigma on every load.
  LoadDynamics with_sigma(double sigma) const {
    LoadDynamics out = *this;
    for (auto& l : out.loads) l.sigma_p = l.sigma_q = sigma;
    return out;
  }
};

struct RandomLoadOptions {
  double tau_min = 1.0;
  double tau_max = 10.0;
  double p_min = 0.02;  ///< consumed active power range, pu
  double p_max = 0.10;
  double power_factor = 0.95;
  double sigma = 0.5;
};

/// Draws time constants uniformly in [tau_min, tau_max] and lagging loads.
inline LoadDynamics random_load_dynamics(const NodeMap& nodes, std::uint64_t seed, const RandomLoadOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> tau(opt.tau_min, opt.tau_max);
  std::uniform_real_distribution<double> load(opt.p_min, opt.p_max);
  const double q_ratio = std::tan(std::acos(opt.power_factor));
  LoadDynamics dyn;
  for (std::size_t s = 0; s < nodes.num_states(); ++s) {
    LoadParameters l;
    l.tau_p = tau(rng);
    l.tau_q = tau(rng);
    l.p_set = -load(rng);
    l.q_set = l.p_set * q_ratio;
    l.sigma_p = l.sigma_q = opt.sigma;
    dyn.loads.push_back(l);
  }
  return dyn;
}

/// Power-flow solution at the load setpoints.
inline OperatingPoint equilibrium(const BusAdmittance& ybus, const NodeMap& nodes, const LoadDynamics& dyn,
                                  const PowerFlowOptions& opt = {}) {
  dyn.validate(nodes);
  return solve_power_flow(ybus, nodes, dyn.p_setpoints(nodes), dyn.q_setpoints(nodes), opt);
}

/// Uniformly sampled micro-PMU channels. Rows are samples (t = k dt), columns nodes.
struct MeasurementSeries {
  double dt = 0.0;
  std::uint64_t seed = 0;
  Eigen::MatrixXd v;
  Eigen::MatrixXd delta;
  Eigen::MatrixXd p;
  Eigen::MatrixXd q;

  std::size_t samples() const { return static_cast<std::size_t>(v.rows()); }
  std::size_t num_nodes() const { return static_cast<std::size_t>(v.cols()); }

  void resize(std::size_t samples, std::size_t nodes) {
    const auto s = static_cast<Eigen::Index>(samples);
    const auto n = static_cast<Eigen::Index>(nodes);
    v.resize(s, n);
    delta.resize(s, n);
    p.resize(s, n);
    q.resize(s, n);
  }

  friend bool operator==(const MeasurementSeries& a, const MeasurementSeries& b) {
    return a.dt == b.dt && a.seed == b.seed && a.v == b.v && a.delta == b.delta && a.p == b.p && a.q == b.q;
  }
};

struct SimulationOptions {
  int substeps = 10;          ///< Euler-Maruyama steps per sample
  std::size_t warmup_samples = 0;  ///< samples integrated and discarded before t = 0
};

namespace detail {

inline void check_state(const NodeMap& nodes, const Eigen::VectorXd& v, const Eigen::VectorXd& delta, double t) {
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double dev = std::remainder(delta(i) - nominal_angle(nodes.node(k).phase), 2.0 * std::numbers::pi);
    if (!std::isfinite(v(i)) || !std::isfinite(delta(i)) || v(i) < 0.5 || v(i) > 1.5 ||
        std::abs(dev) > std::numbers::pi / 2)
      throw Divergence("simulation diverged at t = " + std::to_string(t) + " s (node " + std::to_string(k) +
                       ": V = " + std::to_string(v(i)) + " pu, angle deviation = " + std::to_string(dev) + " rad)");
  }
}

/// Restores P = P^s, Q = Q^s at static nodes with the dynamic states frozen.
inline void settle_static_loads(const BusAdmittance& ybus, const NodeMap& nodes, const LoadDynamics& dyn,
                                const std::vector<std::size_t>& statics, Eigen::VectorXd& v, Eigen::VectorXd& delta) {
  const auto ns = static_cast<Eigen::Index>(statics.size());
  for (int it = 0; it < 30; ++it) {
    const auto inj = injections(ybus, v, delta);
    Eigen::VectorXd f(2 * ns);
    for (Eigen::Index i = 0; i < ns; ++i) {
      const auto s = statics[static_cast<std::size_t>(i)];
      const auto k = static_cast<Eigen::Index>(nodes.state_node(s));
      f(i) = inj.p(k) - dyn.loads[s].p_set;
      f(ns + i) = inj.q(k) - dyn.loads[s].q_set;
    }
    if (f.lpNorm<Eigen::Infinity>() < 1e-12) return;
    const auto full = state_jacobian(ybus, nodes, v, delta).full();
    const auto m = static_cast<Eigen::Index>(nodes.num_states());
    Eigen::MatrixXd js(2 * ns, 2 * ns);
    for (Eigen::Index r = 0; r < 2 * ns; ++r)
      for (Eigen::Index c = 0; c < 2 * ns; ++c) {
        const auto sr = static_cast<Eigen::Index>(statics[static_cast<std::size_t>(r % ns)]) + (r >= ns ? m : 0);
        const auto sc = static_cast<Eigen::Index>(statics[static_cast<std::size_t>(c % ns)]) + (c >= ns ? m : 0);
        js(r, c) = full(sr, sc);
      }
    const Eigen::VectorXd dx = js.partialPivLu().solve(-f);
    for (Eigen::Index i = 0; i < ns; ++i) {
      const auto k = static_cast<Eigen::Index>(nodes.state_node(statics[static_cast<std::size_t>(i)]));
      delta(k) += dx(i);
      v(k) += dx(ns + i);
    }
  }
  throw Divergence("static load nodes could not be settled");
}

}  // namespace detail

/// Integrates the load dynamics from `initial` and records `samples` samples
/// spaced `dt` apart, the first being the (post-warmup) starting state.
/// Deterministic in `seed`.
inline MeasurementSeries simulate(const BusAdmittance& ybus, const NodeMap& nodes, const LoadDynamics& dyn,
                                  const OperatingPoint& initial, double dt, std::size_t samples, std::uint64_t seed,
                                  const SimulationOptions& opt = {}) {
  dyn.validate(nodes);
  if (!(dt > 0.0)) throw DataError("simulate: dt must be positive");
  if (samples < 2) throw DataError("simulate: at least two samples required");
  if (opt.substeps < 1) throw DataError("simulate: substeps must be >= 1");
  const auto n = static_cast<Eigen::Index>(nodes.size());
  if (initial.v.size() != n || initial.delta.size() != n) throw DimensionMismatch("simulate: initial point size");

  std::vector<std::size_t> dynamic, statics;
  for (std::size_t s = 0; s < dyn.size(); ++s) (dyn.loads[s].is_static() ? statics : dynamic).push_back(s);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double h = dt / opt.substeps;
  const double sqrt_h = std::sqrt(h);

  Eigen::VectorXd v = initial.v, delta = initial.delta;
  MeasurementSeries series;
  series.dt = dt;
  series.seed = seed;
  series.resize(samples, nodes.size());

  auto record = [&](std::size_t row) {
    const auto inj = injections(ybus, v, delta);
    const auto r = static_cast<Eigen::Index>(row);
    series.v.row(r) = v.transpose();
    series.delta.row(r) = delta.transpose();
    series.p.row(r) = inj.p.transpose();
    series.q.row(r) = inj.q.transpose();
  };
  auto step = [&](double t) {
    const auto inj = injections(ybus, v, delta);
    for (std::size_t s : dynamic) {
      const auto& l = dyn.loads[s];
      const auto k = static_cast<Eigen::Index>(nodes.state_node(s));
      const double xi_p = normal(rng);
      const double xi_q = normal(rng);
      delta(k) += h * (l.p_set - inj.p(k)) / l.tau_p + l.p_set * l.sigma_p / l.tau_p * sqrt_h * xi_p;
      v(k) += h * (l.q_set - inj.q(k)) / l.tau_q + l.q_set * l.sigma_q / l.tau_q * sqrt_h * xi_q;
    }
    if (!statics.empty()) detail::settle_static_loads(ybus, nodes, dyn, statics, v, delta);
    detail::check_state(nodes, v, delta, t);
  };

  if (!statics.empty()) detail::settle_static_loads(ybus, nodes, dyn, statics, v, delta);
  for (std::size_t k = 0; k < opt.warmup_samples; ++k)
    for (int j = 0; j < opt.substeps; ++j) step(-static_cast<double>(opt.warmup_samples - k) * dt + j * h);
  record(0);
  for (std::size_t k = 1; k < samples; ++k) {
    for (int j = 0; j < opt.substeps; ++j) step(static_cast<double>(k - 1) * dt + j * h);
    record(k);
  }
  return series;
}

enum class PowerChannel {
  recompute,    ///< P, Q recomputed from the noisy V, delta through the network
  independent,  ///< P, Q perturbed by their own additive Gaussian noise
};

/// Additive Gaussian PMU noise. Magnitude noise is in pu of the 1 pu nominal.
struct NoiseSpec {
  double magnitude_std = 0.0;
  double angle_std = 0.0;   ///< rad
  double power_std = 0.0;   ///< pu; used with PowerChannel::independent
  PowerChannel power = PowerChannel::recompute;
  double tve_bound = 0.01;

  /// Largest per-channel std keeping 3 sqrt(sv^2 + sd^2) within the bound.
  static NoiseSpec from_tve(double bound, PowerChannel power = PowerChannel::recompute) {
    const double s = bound / (3.0 * std::numbers::sqrt2);
    return {s, s, s, power, bound};
  }

  /// Same std on every channel.
  static NoiseSpec from_level(double sigma, PowerChannel power = PowerChannel::recompute, double bound = 0.01) {
    return {sigma, sigma, sigma, power, bound};
  }

  /// 3-sigma total vector error radius of the magnitude/angle noise.
  double tve_3sigma() const { return 3.0 * std::hypot(magnitude_std, angle_std); }

  void validate() const {
    if (magnitude_std < 0.0 || angle_std < 0.0 || power_std < 0.0) throw DataError("noise std must be >= 0");
    if (tve_3sigma() > tve_bound * (1.0 + 1e-12))
      throw DataError("measurement noise exceeds the TVE bound (" + std::to_string(tve_3sigma()) + " > " +
                      std::to_string(tve_bound) + ")");
  }
};

/// |V' e^{j d'} - V e^{j d}| / |V|.
inline double total_vector_error(double v, double d, double v_meas, double d_meas) {
  return std::abs(std::polar(v_meas, d_meas) - std::polar(v, d)) / v;
}

/// `ybus` is required for PowerChannel::recompute and ignored otherwise.
inline MeasurementSeries add_measurement_noise(const MeasurementSeries& clean, const NoiseSpec& noise,
                                               std::uint64_t seed, const BusAdmittance* ybus = nullptr) {
  noise.validate();
  if (noise.power == PowerChannel::recompute && ybus == nullptr)
    throw DataError("add_measurement_noise: recomputing P, Q requires the bus admittance");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MeasurementSeries out = clean;
  out.seed = seed;
  for (Eigen::Index r = 0; r < out.v.rows(); ++r) {
    for (Eigen::Index k = 0; k < out.v.cols(); ++k) {
      out.v(r, k) += noise.magnitude_std * normal(rng);
      out.delta(r, k) += noise.angle_std * normal(rng);
    }
    if (noise.power == PowerChannel::recompute) {
      const auto inj = injections(*ybus, out.v.row(r).transpose(), out.delta.row(r).transpose());
      out.p.row(r) = inj.p.transpose();
      out.q.row(r) = inj.q.transpose();
    } else {
      for (Eigen::Index k = 0; k < out.v.cols(); ++k) {
        out.p(r, k) += noise.power_std * normal(rng);
        out.q(r, k) += noise.power_std * normal(rng);
      }
    }
  }
  return out;
}

/// Linearized drift and diffusion of the dynamic loads.
struct LinearOuModel {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  /// Non-slack state indices (NodeMap order) spanned by the model.
  std::vector<std::size_t> states;
};

/// Linearization at `op`. Static loads are eliminated algebraically (Kron
/// reduction), so the model spans dynamic nodes only.
inline LinearOuModel true_state_matrix(const BusAdmittance& ybus, const NodeMap& nodes, const LoadDynamics& dyn,
                                       const OperatingPoint& op) {
  dyn.validate(nodes);
  const auto m = static_cast<Eigen::Index>(nodes.num_states());
  const Eigen::MatrixXd j = state_jacobian(ybus, nodes, op).full();

  LinearOuModel model;
  std::vector<Eigen::Index> keep, drop;
  for (std::size_t s = 0; s < dyn.size(); ++s)
    if (dyn.loads[s].is_static())
      drop.push_back(static_cast<Eigen::Index>(s));
    else
      model.states.push_back(s);
  for (auto s : model.states) keep.push_back(static_cast<Eigen::Index>(s));
  const auto nk = static_cast<Eigen::Index>(keep.size());
  const auto nd = static_cast<Eigen::Index>(drop.size());

  auto idx = [&](const std::vector<Eigen::Index>& set, Eigen::Index i) {
    const auto n = static_cast<Eigen::Index>(set.size());
    return set[static_cast<std::size_t>(i % n)] + (i >= n ? m : 0);
  };
  Eigen::MatrixXd jr(2 * nk, 2 * nk);
  for (Eigen::Index r = 0; r < 2 * nk; ++r)
    for (Eigen::Index c = 0; c < 2 * nk; ++c) jr(r, c) = j(idx(keep, r), idx(keep, c));
  if (nd > 0) {
    Eigen::MatrixXd jks(2 * nk, 2 * nd), jsk(2 * nd, 2 * nk), jss(2 * nd, 2 * nd);
    for (Eigen::Index r = 0; r < 2 * nk; ++r)
      for (Eigen::Index c = 0; c < 2 * nd; ++c) jks(r, c) = j(idx(keep, r), idx(drop, c));
    for (Eigen::Index r = 0; r < 2 * nd; ++r)
      for (Eigen::Index c = 0; c < 2 * nk; ++c) jsk(r, c) = j(idx(drop, r), idx(keep, c));
    for (Eigen::Index r = 0; r < 2 * nd; ++r)
      for (Eigen::Index c = 0; c < 2 * nd; ++c) jss(r, c) = j(idx(drop, r), idx(drop, c));
    jr -= jks * jss.partialPivLu().solve(jsk);
  }

  Eigen::VectorXd inv_tau(2 * nk), diffusion(2 * nk);
  for (Eigen::Index i = 0; i < nk; ++i) {
    const auto& l = dyn.loads[model.states[static_cast<std::size_t>(i)]];
    inv_tau(i) = 1.0 / l.tau_p;
    inv_tau(nk + i) = 1.0 / l.tau_q;
    diffusion(i) = l.p_set * l.sigma_p / l.tau_p;
    diffusion(nk + i) = l.q_set * l.sigma_q / l.tau_q;
  }
  model.a = -(inv_tau.asDiagonal() * jr);
  model.b = diffusion.asDiagonal();
  return model;
}

}  // namespace lineest
