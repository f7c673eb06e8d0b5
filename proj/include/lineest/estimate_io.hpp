#pragma once

// Estimate document: one CSV row per connected branch phase pair,
//   from,to,n,p,G_true,G_init,G_refined,B_true,B_init,B_refined
// with the *_true columns left empty when no reference network is given.

#include <filesystem>
#include <fstream>
#include <ostream>

#include "lineest/errors.hpp"
#include "lineest/measurement_io.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/pipeline.hpp"
#include "lineest/powerflow.hpp"

namespace lineest {

/// `reference` (optional) supplies the true columns; it must share the branch
/// list of `net`.
inline void write_estimate(const ParameterEstimate& est, const NetworkModel& net, std::ostream& out,
                           const NetworkModel* reference = nullptr) {
  Eigen::VectorXd truth;
  const auto np = static_cast<Eigen::Index>(est.index.size());
  if (reference) {
    const ParameterIndex ref_index(*reference);
    if (ref_index.size() != est.index.size()) throw DimensionMismatch("reference network has a different branch layout");
    truth = true_parameters(*reference, ref_index);
  }
  out << "from,to,n,p,G_true,G_init,G_refined,B_true,B_init,B_refined\n";
  for (std::size_t i = 0; i < est.index.size(); ++i) {
    const auto& e = est.index.entry(i);
    if (!est.index.connected(e.branch)) continue;
    const auto& br = net.branches[e.branch];
    const auto k = static_cast<Eigen::Index>(i);
    out << net.buses[br.from].id << ',' << net.buses[br.to].id << ',' << phase_char(e.n) << ',' << phase_char(e.p)
        << ',' << (reference ? format_double(truth(k)) : "") << ',' << format_double(est.theta_init(k)) << ','
        << format_double(est.theta_refined(k)) << ',' << (reference ? format_double(truth(np + k)) : "") << ','
        << format_double(est.theta_init(np + k)) << ',' << format_double(est.theta_refined(np + k)) << '\n';
  }
}

inline void save_estimate(const ParameterEstimate& est, const NetworkModel& net, const std::filesystem::path& path,
                          const NetworkModel* reference = nullptr) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write estimate file " + path.string());
  write_estimate(est, net, out, reference);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace lineest
