#pragma once

// Measurement series as long-format CSV (`t,bus,phase,V,delta,P,Q`, one row
// per sample and node) with a `<file>.meta.json` sidecar holding dt and seed.
// Load dynamics as JSON: {"loads": [{bus, phase, p_set, q_set, tau_p, tau_q,
// sigma_p, sigma_q}, ...]}, one entry per non-slack node.

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/feeder_io.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/ousim.hpp"

namespace lineest {

/// Shortest text that parses back to the same double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

namespace detail {

inline double parse_double(std::string_view s, const std::string& where) {
  double x = 0.0;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw SchemaError(where, "expected a number, got '" + std::string(s) + "'");
  return x;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

inline std::filesystem::path meta_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta.json");
}

}  // namespace detail

inline void write_measurements(const MeasurementSeries& series, const NetworkModel& net, const NodeMap& nodes,
                               std::ostream& out) {
  if (series.num_nodes() != nodes.size()) throw DimensionMismatch("series does not match the network's nodes");
  out << "t,bus,phase,V,delta,P,Q\n";
  for (std::size_t k = 0; k < series.samples(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const std::string t = format_double(static_cast<double>(k) * series.dt);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      const auto& node = nodes.node(i);
      out << t << ',' << net.buses[node.bus].id << ',' << phase_char(node.phase) << ','
          << format_double(series.v(r, c)) << ',' << format_double(series.delta(r, c)) << ','
          << format_double(series.p(r, c)) << ',' << format_double(series.q(r, c)) << '\n';
    }
  }
}

inline MeasurementSeries read_measurements(std::istream& in, const NetworkModel& net, const NodeMap& nodes, double dt,
                                           std::uint64_t seed = 0, const std::string& name = "measurements") {
  if (!(dt > 0.0)) throw SchemaError(name, "dt must be positive");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(name, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,bus,phase,V,delta,P,Q") throw SchemaError(name + ":1", "unexpected header '" + line + "'");

  struct Row {
    std::size_t sample;
    std::size_t node;
    double v, delta, p, q;
  };
  std::vector<Row> rows;
  std::size_t max_sample = 0;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty() || line == "\r") continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw SchemaError(where, "expected 7 fields, got " + std::to_string(f.size()));
    const double t = detail::parse_double(f[0], where + " (t)");
    const double ks = t / dt;
    const auto k = std::llround(ks);
    if (k < 0 || std::abs(ks - static_cast<double>(k)) > 1e-6)
      throw SchemaError(where, "timestamp " + std::string(f[0]) + " is not a multiple of dt");
    const auto bus = net.find_bus(f[1]);
    if (!bus) throw SchemaError(where, "unknown bus '" + std::string(f[1]) + "'");
    Phase ph;
    try {
      ph = parse_phase(f[2]);
    } catch (const Error&) {
      throw SchemaError(where, "bad phase '" + std::string(f[2]) + "'");
    }
    const auto node = nodes.find(*bus, ph);
    if (!node) throw SchemaError(where, "bus " + std::string(f[1]) + " has no phase " + std::string(f[2]));
    rows.push_back({static_cast<std::size_t>(k), *node, detail::parse_double(f[3], where + " (V)"),
                    detail::parse_double(f[4], where + " (delta)"), detail::parse_double(f[5], where + " (P)"),
                    detail::parse_double(f[6], where + " (Q)")});
    max_sample = std::max(max_sample, static_cast<std::size_t>(k));
  }
  if (rows.empty()) throw SchemaError(name, "no samples");

  const std::size_t samples = max_sample + 1;
  MeasurementSeries s;
  s.dt = dt;
  s.seed = seed;
  s.resize(samples, nodes.size());
  std::vector<char> seen(samples * nodes.size(), 0);
  for (const auto& r : rows) {
    auto& flag = seen[r.sample * nodes.size() + r.node];
    if (flag) throw SchemaError(name, "duplicate row for sample " + std::to_string(r.sample));
    flag = 1;
    const auto i = static_cast<Eigen::Index>(r.sample), c = static_cast<Eigen::Index>(r.node);
    s.v(i, c) = r.v;
    s.delta(i, c) = r.delta;
    s.p(i, c) = r.p;
    s.q(i, c) = r.q;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) {
      const auto& node = nodes.node(i % nodes.size());
      throw SchemaError(name, "missing sample " + std::to_string(i / nodes.size()) + " for bus " +
                                  net.buses[node.bus].id + " phase " + phase_char(node.phase));
    }
  return s;
}

inline void save_measurements(const MeasurementSeries& series, const NetworkModel& net,
                              const std::filesystem::path& path) {
  const NodeMap nodes(net);
  {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    write_measurements(series, net, nodes, out);
    if (!out) throw IoError("write failed for " + path.string());
  }
  std::ofstream meta(detail::meta_path(path));
  if (!meta) throw IoError("cannot write " + detail::meta_path(path).string());
  meta << nlohmann::json{{"dt", series.dt}, {"seed", series.seed}, {"samples", series.samples()}}.dump(2) << '\n';
}

inline MeasurementSeries load_measurements(const NetworkModel& net, const std::filesystem::path& path) {
  const auto mp = detail::meta_path(path);
  std::ifstream meta(mp);
  if (!meta) throw IoError("cannot open metadata sidecar " + mp.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(mp.string(), e.what());
  }
  if (!doc.contains("dt") || !doc["dt"].is_number()) throw SchemaError(mp.string() + ".dt", "missing number");
  const std::uint64_t seed = doc.contains("seed") && doc["seed"].is_number_unsigned() ? doc["seed"].get<std::uint64_t>() : 0;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const NodeMap nodes(net);
  auto s = read_measurements(in, net, nodes, doc["dt"].get<double>(), seed, path.string());
  if (doc.contains("samples") && doc["samples"].is_number_unsigned() && doc["samples"].get<std::size_t>() != s.samples())
    throw SchemaError(path.string(), "sample count differs from the sidecar");
  return s;
}

inline nlohmann::json dynamics_to_json(const LoadDynamics& dyn, const NetworkModel& net, const NodeMap& nodes) {
  dyn.validate(nodes);
  nlohmann::json loads = nlohmann::json::array();
  for (std::size_t s = 0; s < dyn.size(); ++s) {
    const auto& node = nodes.node(nodes.state_node(s));
    const auto& l = dyn.loads[s];
    loads.push_back({{"bus", net.buses[node.bus].id},
                     {"phase", std::string(1, phase_char(node.phase))},
                     {"p_set", l.p_set},
                     {"q_set", l.q_set},
                     {"tau_p", l.tau_p},
                     {"tau_q", l.tau_q},
                     {"sigma_p", l.sigma_p},
                     {"sigma_q", l.sigma_q}});
  }
  return {{"loads", loads}};
}

inline LoadDynamics dynamics_from_json(const nlohmann::json& doc, const NetworkModel& net, const NodeMap& nodes) {
  if (!doc.is_object() || !doc.contains("loads") || !doc["loads"].is_array())
    throw SchemaError("loads", "expected an array of loads");
  LoadDynamics dyn;
  dyn.loads.resize(nodes.num_states());
  std::vector<char> seen(nodes.num_states(), 0);
  const auto& loads = doc["loads"];
  for (std::size_t i = 0; i < loads.size(); ++i) {
    const std::string where = "loads[" + std::to_string(i) + "]";
    const auto& j = loads[i];
    const auto bus_id = detail::require_id(j, "bus", where);
    const auto bus = net.find_bus(bus_id);
    if (!bus) throw SchemaError(where + ".bus", "unknown bus '" + bus_id + "'");
    const auto& phv = detail::require(j, "phase", where);
    if (!phv.is_string()) throw SchemaError(where + ".phase", "expected a string");
    Phase ph;
    try {
      ph = parse_phase(phv.get<std::string>());
    } catch (const Error&) {
      throw SchemaError(where + ".phase", "expected a, b or c");
    }
    const auto node = nodes.find(*bus, ph);
    if (!node) throw SchemaError(where, "bus " + bus_id + " has no phase " + phv.get<std::string>());
    const int s = nodes.state_index(*node);
    if (s < 0) throw SchemaError(where, "the slack bus carries no load");
    if (seen[static_cast<std::size_t>(s)]) throw SchemaError(where, "duplicate load for this node");
    seen[static_cast<std::size_t>(s)] = 1;
    auto& l = dyn.loads[static_cast<std::size_t>(s)];
    l.p_set = detail::require_number(j, "p_set", where);
    l.q_set = detail::require_number(j, "q_set", where);
    l.tau_p = detail::require_number(j, "tau_p", where);
    l.tau_q = detail::require_number(j, "tau_q", where);
    l.sigma_p = detail::require_number(j, "sigma_p", where);
    l.sigma_q = detail::require_number(j, "sigma_q", where);
  }
  for (std::size_t s = 0; s < seen.size(); ++s)
    if (!seen[s]) {
      const auto& node = nodes.node(nodes.state_node(s));
      throw SchemaError("loads", "no load for bus " + net.buses[node.bus].id + " phase " + phase_char(node.phase));
    }
  try {
    dyn.validate(nodes);
  } catch (const DataError& e) {
    throw SchemaError("loads", e.what());
  }
  return dyn;
}

inline LoadDynamics load_dynamics(const NetworkModel& net, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dynamics file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  try {
    return dynamics_from_json(doc, net, NodeMap(net));
  } catch (const SchemaError& e) {
    throw SchemaError(path.string(), e.what());
  }
}

inline void save_dynamics(const LoadDynamics& dyn, const NetworkModel& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dynamics file " + path.string());
  out << dynamics_to_json(dyn, net, NodeMap(net)).dump(2) << '\n';
}

}  // namespace lineest
