#pragma once

// Multiphase unbalanced feeder model: buses with phase sets, partial-phase
// branches carrying 3x3 series impedance blocks, and the bus admittance
// structure assembled from them. All quantities are per-unit.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lineest/errors.hpp"

namespace lineest {

enum class Phase : std::uint8_t { a = 0, b = 1, c = 2 };

inline constexpr std::array<Phase, 3> kAllPhases{Phase::a, Phase::b, Phase::c};

inline constexpr int phase_index(Phase p) { return static_cast<int>(p); }

inline char phase_char(Phase p) { return "abc"[phase_index(p)]; }

inline Phase parse_phase(std::string_view s) {
  if (s == "a" || s == "A") return Phase::a;
  if (s == "b" || s == "B") return Phase::b;
  if (s == "c" || s == "C") return Phase::c;
  throw SchemaError("", "unknown phase '" + std::string(s) + "'");
}

/// Phase-native reference angle: 0, -120 deg, +120 deg.
inline double nominal_angle(Phase p) {
  constexpr double kTwoThirdsPi = 2.0943951023931954923;
  switch (p) {
    case Phase::a: return 0.0;
    case Phase::b: return -kTwoThirdsPi;
    case Phase::c: return kTwoThirdsPi;
  }
  return 0.0;
}

/// Nonempty subset of {a, b, c}.
class PhaseSet {
 public:
  PhaseSet() = default;

  static PhaseSet from_mask(std::uint8_t mask) {
    if (mask == 0 || mask > 7) throw SchemaError("", "phase set must be a nonempty subset of {a,b,c}");
    PhaseSet s;
    s.mask_ = mask;
    return s;
  }

  /// Accepts strings like "abc", "bc", "a". Order and case are ignored.
  static PhaseSet parse(std::string_view text) {
    std::uint8_t mask = 0;
    for (char ch : text) {
      const auto bit = static_cast<std::uint8_t>(1u << phase_index(parse_phase(std::string_view(&ch, 1))));
      if (mask & bit) throw SchemaError("", "duplicate phase in '" + std::string(text) + "'");
      mask |= bit;
    }
    return from_mask(mask);
  }

  bool contains(Phase p) const { return (mask_ >> phase_index(p)) & 1u; }
  int size() const { return (mask_ & 1) + ((mask_ >> 1) & 1) + ((mask_ >> 2) & 1); }
  bool subset_of(PhaseSet other) const { return (mask_ & ~other.mask_) == 0; }
  std::uint8_t mask() const { return mask_; }

  std::vector<Phase> phases() const {
    std::vector<Phase> out;
    for (Phase p : kAllPhases)
      if (contains(p)) out.push_back(p);
    return out;
  }

  std::string to_string() const {
    std::string s;
    for (Phase p : phases()) s.push_back(phase_char(p));
    return s;
  }

  friend bool operator==(PhaseSet, PhaseSet) = default;

 private:
  std::uint8_t mask_ = 0;
};

struct PerUnitBase {
  double s_base_kva = 1000.0;
  double v_base_kv = 4.16;

  /// Ohms corresponding to 1 pu impedance.
  double impedance_base() const { return v_base_kv * v_base_kv * 1000.0 / s_base_kva; }

  friend bool operator==(const PerUnitBase&, const PerUnitBase&) = default;
};

struct Bus {
  std::string id;
  PhaseSet phases;
  bool is_slack = false;

  friend bool operator==(const Bus&, const Bus&) = default;
};

/// Series impedance of one branch. Rows/columns outside `phases` are zero.
struct BranchImpedance {
  std::size_t from = 0;
  std::size_t to = 0;
  PhaseSet phases;
  Eigen::Matrix3cd z = Eigen::Matrix3cd::Zero();
  /// Connectivity indicator u_ij. Disconnected branches carry no current.
  bool connected = true;

  friend bool operator==(const BranchImpedance& l, const BranchImpedance& r) {
    return l.from == r.from && l.to == r.to && l.phases == r.phases && l.z == r.z &&
           l.connected == r.connected;
  }
};

struct BranchAdmittance {
  std::size_t from = 0;
  std::size_t to = 0;
  PhaseSet phases;
  Eigen::Matrix3d g = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
};

class NetworkModel {
 public:
  PerUnitBase base;
  std::vector<Bus> buses;
  std::vector<BranchImpedance> branches;

  std::optional<std::size_t> find_bus(std::string_view id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return i;
    return std::nullopt;
  }

  std::size_t bus_index(std::string_view id) const {
    if (auto i = find_bus(id)) return *i;
    throw DataError("unknown bus '" + std::string(id) + "'");
  }

  std::size_t slack_index() const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].is_slack) return i;
    throw SchemaError("", "network has no slack bus");
  }

  /// Checks the structural invariants; throws SchemaError or PhaseConsistencyError.
  void validate() const;

  friend bool operator==(const NetworkModel&, const NetworkModel&) = default;
};

inline void NetworkModel::validate() const {
  if (buses.empty()) throw SchemaError("buses", "network has no buses");
  std::size_t slack_count = 0;
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].phases.mask() == 0) throw SchemaError("buses[" + std::to_string(i) + "]", "empty phase set");
    if (buses[i].is_slack) ++slack_count;
    for (std::size_t j = 0; j < i; ++j)
      if (buses[j].id == buses[i].id) throw SchemaError("buses[" + std::to_string(i) + "]", "duplicate bus id '" + buses[i].id + "'");
  }
  if (slack_count != 1)
    throw SchemaError("buses", "exactly one slack bus required, found " + std::to_string(slack_count));

  for (std::size_t k = 0; k < branches.size(); ++k) {
    const auto& br = branches[k];
    const std::string where = "branches[" + std::to_string(k) + "]";
    if (br.from >= buses.size() || br.to >= buses.size()) throw SchemaError(where, "bus index out of range");
    if (br.from == br.to) throw SchemaError(where, "branch connects a bus to itself");
    if (!br.phases.subset_of(buses[br.from].phases) || !br.phases.subset_of(buses[br.to].phases))
      throw PhaseConsistencyError(where + ": branch phases '" + br.phases.to_string() +
                                  "' not present at both endpoints ('" + buses[br.from].id + "' has '" +
                                  buses[br.from].phases.to_string() + "', '" + buses[br.to].id + "' has '" +
                                  buses[br.to].phases.to_string() + "')");
    for (Phase n : kAllPhases)
      for (Phase p : kAllPhases) {
        const auto v = br.z(phase_index(n), phase_index(p));
        const bool active = br.phases.contains(n) && br.phases.contains(p);
        if (!active && v != std::complex<double>(0.0, 0.0))
          throw SchemaError(where, std::string("nonzero impedance at inactive position (") + phase_char(n) +
                                       "," + phase_char(p) + ")");
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw SchemaError(where, "non-finite impedance");
      }
    for (Phase n : br.phases.phases())
      for (Phase p : br.phases.phases()) {
        const auto znp = br.z(phase_index(n), phase_index(p));
        const auto zpn = br.z(phase_index(p), phase_index(n));
        if (std::abs(znp - zpn) > 1e-9 * (std::abs(znp) + std::abs(zpn)))
          throw SchemaError(where, "impedance block is not symmetric on active phases");
      }
    for (std::size_t j = 0; j < k; ++j) {
      const auto& o = branches[j];
      if ((o.from == br.from && o.to == br.to) || (o.from == br.to && o.to == br.from))
        throw SchemaError(where, "parallel branch between the same buses");
    }
  }

  // Connectivity over in-service branches.
  std::vector<std::size_t> parent(buses.size());
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& br : branches)
    if (br.connected) parent[find(br.from)] = find(br.to);
  const auto root = find(0);
  for (std::size_t i = 1; i < buses.size(); ++i)
    if (find(i) != root) throw SchemaError("branches", "bus '" + buses[i].id + "' is not connected to the network");
}

/// One (bus, phase) pair; the unit at which voltages and injections live.
struct Node {
  std::size_t bus = 0;
  Phase phase = Phase::a;
};

/// Enumerates nodes in bus order, phases a-b-c within a bus. Non-slack nodes
/// additionally receive a state index; the OU state is [angles; magnitudes]
/// over non-slack nodes in this order.
class NodeMap {
 public:
  NodeMap() = default;

  explicit NodeMap(const NetworkModel& net) {
    bus_offset_.assign(net.buses.size() * 3, -1);
    for (std::size_t b = 0; b < net.buses.size(); ++b)
      for (Phase p : net.buses[b].phases.phases()) {
        const int idx = static_cast<int>(nodes_.size());
        bus_offset_[b * 3 + phase_index(p)] = idx;
        nodes_.push_back({b, p});
        if (net.buses[b].is_slack) {
          state_of_.push_back(-1);
        } else {
          state_of_.push_back(static_cast<int>(state_nodes_.size()));
          state_nodes_.push_back(static_cast<std::size_t>(idx));
        }
      }
  }

  std::size_t size() const { return nodes_.size(); }
  /// Number of non-slack nodes (m). The OU state has dimension 2m.
  std::size_t num_states() const { return state_nodes_.size(); }
  const Node& node(std::size_t k) const { return nodes_[k]; }
  const std::vector<Node>& nodes() const { return nodes_; }

  std::optional<std::size_t> find(std::size_t bus, Phase p) const {
    if (bus * 3 + phase_index(p) >= bus_offset_.size()) return std::nullopt;
    const int idx = bus_offset_[bus * 3 + phase_index(p)];
    if (idx < 0) return std::nullopt;
    return static_cast<std::size_t>(idx);
  }

  std::size_t at(std::size_t bus, Phase p) const {
    if (auto k = find(bus, p)) return *k;
    throw PhaseConsistencyError("bus index " + std::to_string(bus) + " has no phase " + phase_char(p));
  }

  bool is_slack(std::size_t k) const { return state_of_[k] < 0; }
  /// State index of node k, or -1 for slack nodes.
  int state_index(std::size_t k) const { return state_of_[k]; }
  /// Node index of state s.
  std::size_t state_node(std::size_t s) const { return state_nodes_[s]; }
  const std::vector<std::size_t>& state_nodes() const { return state_nodes_; }

 private:
  std::vector<Node> nodes_;
  std::vector<int> bus_offset_;
  std::vector<int> state_of_;
  std::vector<std::size_t> state_nodes_;
};

/// Default bound on cond(Z_active) above which a block is treated as singular.
inline constexpr double kImpedanceConditionBound = 1e12;

/// Inverts the active-phase submatrix of z. Missing-phase rows and columns of
/// the result are exactly zero.
inline BranchAdmittance invert_branch_impedance(const BranchImpedance& z,
                                                double condition_bound = kImpedanceConditionBound) {
  const auto phases = z.phases.phases();
  const auto k = static_cast<Eigen::Index>(phases.size());
  Eigen::MatrixXcd sub(k, k);
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < k; ++c) sub(r, c) = z.z(phase_index(phases[r]), phase_index(phases[c]));

  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(sub);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(k - 1);
  if (!(smin > 0.0) || smax / smin > condition_bound)
    throw SingularImpedance("branch impedance is singular (condition number " +
                            (smin > 0.0 ? std::to_string(smax / smin) : std::string("inf")) + ")");
  const Eigen::MatrixXcd inv = sub.fullPivLu().inverse();

  BranchAdmittance y;
  y.from = z.from;
  y.to = z.to;
  y.phases = z.phases;
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < k; ++c) {
      y.g(phase_index(phases[r]), phase_index(phases[c])) = inv(r, c).real();
      y.b(phase_index(phases[r]), phase_index(phases[c])) = inv(r, c).imag();
    }
  return y;
}

/// Dense bus admittance over all nodes, split into conductance and susceptance.
struct BusAdmittance {
  Eigen::MatrixXd g;
  Eigen::MatrixXd b;
  /// Structurally nonzero (row, col) pairs including the diagonal, row-major.
  std::vector<std::pair<int, int>> pattern;

  std::size_t size() const { return static_cast<std::size_t>(g.rows()); }

  void rebuild_pattern() {
    pattern.clear();
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c)
        if (r == c || g(r, c) != 0.0 || b(r, c) != 0.0) pattern.emplace_back(static_cast<int>(r), static_cast<int>(c));
  }
};

/// Stamps one branch admittance into a bus admittance: +Y on both diagonal
/// blocks, -Y on both off-diagonal blocks.
inline void stamp_branch(BusAdmittance& ybus, const NodeMap& nodes, std::size_t from, std::size_t to,
                         PhaseSet phases, const Eigen::Matrix3d& g, const Eigen::Matrix3d& b) {
  for (Phase n : phases.phases())
    for (Phase p : phases.phases()) {
      const double gv = g(phase_index(n), phase_index(p));
      const double bv = b(phase_index(n), phase_index(p));
      const auto in = nodes.at(from, n), ip = nodes.at(from, p);
      const auto jn = nodes.at(to, n), jp = nodes.at(to, p);
      ybus.g(in, ip) += gv;
      ybus.b(in, ip) += bv;
      ybus.g(jn, jp) += gv;
      ybus.b(jn, jp) += bv;
      ybus.g(in, jp) -= gv;
      ybus.b(in, jp) -= bv;
      ybus.g(jn, ip) -= gv;
      ybus.b(jn, ip) -= bv;
    }
}

/// Assembles the bus admittance of every connected branch. Series elements only.
inline BusAdmittance assemble_bus_admittance(const NetworkModel& net, const NodeMap& nodes,
                                             double condition_bound = kImpedanceConditionBound) {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  BusAdmittance ybus{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n), {}};
  for (const auto& br : net.branches) {
    if (!br.connected) continue;
    const auto y = invert_branch_impedance(br, condition_bound);
    stamp_branch(ybus, nodes, br.from, br.to, br.phases, y.g, y.b);
  }
  ybus.rebuild_pattern();
  return ybus;
}

inline BusAdmittance assemble_bus_admittance(const NetworkModel& net,
                                             double condition_bound = kImpedanceConditionBound) {
  return assemble_bus_admittance(net, NodeMap(net), condition_bound);
}

}  // namespace lineest
