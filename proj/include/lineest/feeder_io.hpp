#pragma once

// Feeder document (JSON):
//   base     {s_base_kva, v_base_kv}
//   buses    [{id, phases, is_slack}]
//   branches [{from, to, phases, z_real[3][3], z_imag[3][3], unit: "ohm"|"pu", connected?}]
// Impedances given in ohms are converted to per-unit on load; saving always
// writes per-unit so that load(save(net)) reproduces net exactly.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"

namespace lineest {

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(where, std::string("missing field '") + key + "'");
  return *it;
}

inline double require_number(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_number()) throw SchemaError(where + "." + key, "expected a number");
  return v.get<double>();
}

inline std::string require_id(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw SchemaError(where + "." + key, "expected a string or integer id");
}

inline Eigen::Matrix3d read_matrix3(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  const std::string path = where + "." + key;
  if (!v.is_array() || v.size() != 3) throw SchemaError(path, "expected a 3x3 array");
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r) {
    if (!v[r].is_array() || v[r].size() != 3) throw SchemaError(path + "[" + std::to_string(r) + "]", "expected 3 entries");
    for (int c = 0; c < 3; ++c) {
      if (!v[r][c].is_number())
        throw SchemaError(path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]", "expected a number");
      m(r, c) = v[r][c].get<double>();
    }
  }
  return m;
}

inline PhaseSet read_phases(const nlohmann::json& obj, const std::string& where) {
  const auto& v = require(obj, "phases", where);
  if (!v.is_string()) throw SchemaError(where + ".phases", "expected a string such as \"abc\"");
  try {
    return PhaseSet::parse(v.get<std::string>());
  } catch (const SchemaError& e) {
    throw SchemaError(where + ".phases", e.what());
  }
}

}  // namespace detail

inline NetworkModel network_from_json(const nlohmann::json& doc) {
  NetworkModel net;
  const auto& base = detail::require(doc, "base", "");
  net.base.s_base_kva = detail::require_number(base, "s_base_kva", "base");
  net.base.v_base_kv = detail::require_number(base, "v_base_kv", "base");
  if (!(net.base.s_base_kva > 0.0) || !(net.base.v_base_kv > 0.0)) throw SchemaError("base", "base values must be positive");

  const auto& buses = detail::require(doc, "buses", "");
  if (!buses.is_array()) throw SchemaError("buses", "expected an array");
  for (std::size_t i = 0; i < buses.size(); ++i) {
    const std::string where = "buses[" + std::to_string(i) + "]";
    Bus bus;
    bus.id = detail::require_id(buses[i], "id", where);
    bus.phases = detail::read_phases(buses[i], where);
    if (auto it = buses[i].find("is_slack"); it != buses[i].end()) {
      if (!it->is_boolean()) throw SchemaError(where + ".is_slack", "expected a boolean");
      bus.is_slack = it->get<bool>();
    }
    net.buses.push_back(std::move(bus));
  }

  const auto& branches = detail::require(doc, "branches", "");
  if (!branches.is_array()) throw SchemaError("branches", "expected an array");
  const double zbase = net.base.impedance_base();
  for (std::size_t k = 0; k < branches.size(); ++k) {
    const std::string where = "branches[" + std::to_string(k) + "]";
    const auto& jb = branches[k];
    BranchImpedance br;
    const auto from = detail::require_id(jb, "from", where);
    const auto to = detail::require_id(jb, "to", where);
    auto fi = net.find_bus(from);
    auto ti = net.find_bus(to);
    if (!fi) throw SchemaError(where + ".from", "unknown bus '" + from + "'");
    if (!ti) throw SchemaError(where + ".to", "unknown bus '" + to + "'");
    br.from = *fi;
    br.to = *ti;
    br.phases = detail::read_phases(jb, where);
    const Eigen::Matrix3d zr = detail::read_matrix3(jb, "z_real", where);
    const Eigen::Matrix3d zi = detail::read_matrix3(jb, "z_imag", where);
    br.z.real() = zr;
    br.z.imag() = zi;
    const auto& unit = detail::require(jb, "unit", where);
    if (!unit.is_string()) throw SchemaError(where + ".unit", "expected \"ohm\" or \"pu\"");
    if (unit == "ohm") {
      br.z /= zbase;
    } else if (unit != "pu") {
      throw SchemaError(where + ".unit", "expected \"ohm\" or \"pu\", got " + unit.dump());
    }
    if (auto it = jb.find("connected"); it != jb.end()) {
      if (!it->is_boolean()) throw SchemaError(where + ".connected", "expected a boolean");
      br.connected = it->get<bool>();
    }
    net.branches.push_back(br);
  }
  net.validate();
  return net;
}

inline nlohmann::json network_to_json(const NetworkModel& net) {
  nlohmann::json doc;
  doc["base"] = {{"s_base_kva", net.base.s_base_kva}, {"v_base_kv", net.base.v_base_kv}};
  doc["buses"] = nlohmann::json::array();
  for (const auto& bus : net.buses)
    doc["buses"].push_back({{"id", bus.id}, {"phases", bus.phases.to_string()}, {"is_slack", bus.is_slack}});
  doc["branches"] = nlohmann::json::array();
  for (const auto& br : net.branches) {
    nlohmann::json zr = nlohmann::json::array(), zi = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
      zr.push_back({br.z(r, 0).real(), br.z(r, 1).real(), br.z(r, 2).real()});
      zi.push_back({br.z(r, 0).imag(), br.z(r, 1).imag(), br.z(r, 2).imag()});
    }
    nlohmann::json jb{{"from", net.buses[br.from].id},
                      {"to", net.buses[br.to].id},
                      {"phases", br.phases.to_string()},
                      {"z_real", zr},
                      {"z_imag", zi},
                      {"unit", "pu"}};
    if (!br.connected) jb["connected"] = false;
    doc["branches"].push_back(std::move(jb));
  }
  return doc;
}

inline NetworkModel parse_network(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("", std::string("malformed feeder document: ") + e.what());
  }
  return network_from_json(doc);
}

inline NetworkModel load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feeder file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_network(ss.str());
  } catch (const SchemaError& e) {
    throw SchemaError(path.string(), e.what());
  } catch (const PhaseConsistencyError& e) {
    throw PhaseConsistencyError(path.string() + ": " + e.what());
  }
}

inline void save_network(const NetworkModel& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write feeder file " + path.string());
  out << network_to_json(net).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace lineest
