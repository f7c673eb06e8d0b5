#pragma once

// Monte Carlo evaluation: for every noise level and replicate, simulate a
// series, corrupt it, run the two-stage pipeline and score both stages by MAPE.
//
// Seed splitting: replicate seed r = mix(mix(mix(master), level), replicate)
// with mix = splitmix64 of the xor; the simulation uses mix(r ^ 1), the
// measurement noise mix(r ^ 2). Results do not depend on the worker count.

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "lineest/errors.hpp"
#include "lineest/feeder_io.hpp"
#include "lineest/measurement_io.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/ousim.hpp"
#include "lineest/pipeline.hpp"
#include "lineest/powerflow.hpp"

namespace lineest {

inline constexpr const char* kMethodName = "ou-broyden";

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t replicate_seed(std::uint64_t master, std::size_t level, std::size_t replicate) {
  return splitmix64(splitmix64(splitmix64(master) ^ level) ^ replicate);
}
inline std::uint64_t simulation_seed(std::uint64_t rep) { return splitmix64(rep ^ 1u); }
inline std::uint64_t noise_seed(std::uint64_t rep) { return splitmix64(rep ^ 2u); }

struct MapeResult {
  double value = 0.0;         ///< percent
  std::size_t included = 0;
  std::size_t excluded = 0;   ///< entries whose true value is zero
};

/// 100/N sum |t - e| / |t| over entries with t != 0.
inline MapeResult mape(std::span<const double> truth, std::span<const double> estimate) {
  if (truth.size() != estimate.size()) throw DimensionMismatch("mape: vectors differ in length");
  MapeResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 0.0) {
      ++r.excluded;
      continue;
    }
    sum += std::abs(truth[i] - estimate[i]) / std::abs(truth[i]);
    ++r.included;
  }
  if (r.included == 0) throw EmptyComparableSet("mape: every true entry is zero");
  r.value = 100.0 * sum / static_cast<double>(r.included);
  return r;
}

enum class Quantity { conductance, susceptance };

/// MAPE of G or B over the entries of connected branches.
inline MapeResult parameter_mape(const ParameterIndex& index, const Eigen::VectorXd& truth,
                                 const Eigen::VectorXd& estimate, Quantity which) {
  const auto np = static_cast<Eigen::Index>(index.size());
  if (truth.size() != 2 * np || estimate.size() != 2 * np) throw DimensionMismatch("parameter_mape: vector length");
  std::vector<double> t, e;
  const Eigen::Index off = which == Quantity::susceptance ? np : 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!index.connected(index.entry(i).branch)) continue;
    t.push_back(truth(off + static_cast<Eigen::Index>(i)));
    e.push_back(estimate(off + static_cast<Eigen::Index>(i)));
  }
  return mape(t, e);
}

enum class SweepTarget {
  measurement,  ///< level = std of additive noise on V, delta, P, Q
  process,      ///< level = load noise intensity; no measurement noise
};

struct ExperimentConfig {
  std::filesystem::path feeder;
  std::filesystem::path dynamics;  ///< empty: random loads drawn from `seed`
  std::size_t samples = 3600;
  double dt = 0.05;
  int substeps = 10;
  std::size_t warmup_samples = 200;
  std::size_t lag = 1;
  std::vector<double> noise_levels{1e-6, 1e-5, 1e-4, 1e-3};
  SweepTarget sweep_target = SweepTarget::measurement;
  double tve_bound = 0.01;
  std::size_t replicates = 20;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  Aggregation aggregation = Aggregation::snapshots;
  std::size_t snapshots = 300;
  double tolerance = 1e-8;
  int max_iterations = 50;
  int relinearize_every = 0;
  double step_cap = 0.10;
  std::filesystem::path output_dir = "results";

  void validate() const {
    if (replicates < 1) throw DataError("config: replicates must be >= 1");
    if (samples < 3) throw DataError("config: samples must be >= 3");
    if (!(dt > 0.0)) throw DataError("config: dt must be positive");
    if (substeps < 1) throw DataError("config: substeps must be >= 1");
    if (lag < 1 || lag >= samples) throw DataError("config: lag must satisfy 1 <= lag < samples");
    if (noise_levels.empty()) throw DataError("config: noise_levels is empty");
    for (double s : noise_levels)
      if (!(s >= 0.0) || !std::isfinite(s)) throw DataError("config: noise levels must be finite and >= 0");
    if (snapshots < 1) throw DataError("config: stage2.snapshots must be >= 1");
    if (!(tolerance > 0.0) || max_iterations < 1) throw DataError("config: bad stage-2 tolerance or iteration limit");
  }

  PipelineOptions pipeline() const {
    PipelineOptions p;
    p.lag = lag;
    p.aggregation = aggregation;
    p.snapshots = snapshots;
    p.refinement.tolerance = tolerance;
    p.refinement.max_iterations = max_iterations;
    p.refinement.relinearize_every = relinearize_every;
    p.refinement.step_cap = step_cap;
    return p;
  }
};

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"feeder", c.feeder.string()},
          {"dynamics", c.dynamics.string()},
          {"samples", c.samples},
          {"dt", c.dt},
          {"substeps", c.substeps},
          {"warmup_samples", c.warmup_samples},
          {"lag", c.lag},
          {"noise_levels", c.noise_levels},
          {"sweep_target", c.sweep_target == SweepTarget::measurement ? "measurement" : "process"},
          {"tve_bound", c.tve_bound},
          {"replicates", c.replicates},
          {"seed", c.seed},
          {"workers", c.workers},
          {"stage2",
           {{"aggregation", c.aggregation == Aggregation::mean ? "mean" : "snapshots"},
            {"snapshots", c.snapshots},
            {"tolerance", c.tolerance},
            {"max_iterations", c.max_iterations},
            {"relinearize_every", c.relinearize_every},
            {"step_cap", c.step_cap}}},
          {"output_dir", c.output_dir.string()}};
}

/// Relative paths in the document are resolved against `base_dir`. Missing
/// fields keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
  if (!doc.is_object()) throw SchemaError("config", "expected an object");
  ExperimentConfig c;
  auto path_field = [&](const char* key, std::filesystem::path& dst) {
    if (!doc.contains(key)) return;
    if (!doc[key].is_string()) throw SchemaError(std::string("config.") + key, "expected a string");
    const std::string s = doc[key].get<std::string>();
    dst = s.empty() ? std::filesystem::path{} : std::filesystem::path(s);
    if (!dst.empty() && dst.is_relative() && !base_dir.empty()) dst = base_dir / dst;
  };
  try {
    path_field("feeder", c.feeder);
    path_field("dynamics", c.dynamics);
    path_field("output_dir", c.output_dir);
    if (c.feeder.empty()) throw SchemaError("config.feeder", "missing feeder path");
    auto get = [&](const nlohmann::json& obj, const char* key, auto& dst) {
      if (obj.contains(key)) obj.at(key).get_to(dst);
    };
    get(doc, "samples", c.samples);
    get(doc, "dt", c.dt);
    get(doc, "substeps", c.substeps);
    get(doc, "warmup_samples", c.warmup_samples);
    get(doc, "lag", c.lag);
    get(doc, "noise_levels", c.noise_levels);
    get(doc, "tve_bound", c.tve_bound);
    get(doc, "replicates", c.replicates);
    get(doc, "seed", c.seed);
    get(doc, "workers", c.workers);
    if (doc.contains("sweep_target")) {
      const auto t = doc["sweep_target"].get<std::string>();
      if (t == "measurement") c.sweep_target = SweepTarget::measurement;
      else if (t == "process") c.sweep_target = SweepTarget::process;
      else throw SchemaError("config.sweep_target", "expected \"measurement\" or \"process\"");
    }
    if (doc.contains("stage2")) {
      const auto& s2 = doc["stage2"];
      if (s2.contains("aggregation")) {
        const auto a = s2["aggregation"].get<std::string>();
        if (a == "mean") c.aggregation = Aggregation::mean;
        else if (a == "snapshots") c.aggregation = Aggregation::snapshots;
        else throw SchemaError("config.stage2.aggregation", "expected \"mean\" or \"snapshots\"");
      }
      get(s2, "snapshots", c.snapshots);
      get(s2, "tolerance", c.tolerance);
      get(s2, "max_iterations", c.max_iterations);
      get(s2, "relinearize_every", c.relinearize_every);
      get(s2, "step_cap", c.step_cap);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config", e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  return config_from_json(doc, path.parent_path());
}

struct ReplicateResult {
  std::size_t level = 0;
  std::size_t replicate = 0;
  bool ok = false;
  std::string error;
  MapeResult initial_g, initial_b, refined_g, refined_b;
  std::string refinement_status;
  int iterations = 0;
  double seconds = 0.0;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;
};

struct Distribution {
  std::size_t count = 0;
  double mean = 0.0, median = 0.0, q1 = 0.0, q3 = 0.0, min = 0.0, max = 0.0;
};

/// Quartiles by linear interpolation between order statistics.
inline Distribution describe(std::vector<double> xs) {
  Distribution d;
  d.count = xs.size();
  if (xs.empty()) {
    d.mean = d.median = d.q1 = d.q3 = d.min = d.max = std::numeric_limits<double>::quiet_NaN();
    return d;
  }
  std::sort(xs.begin(), xs.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  };
  double sum = 0.0;
  for (double x : xs) sum += x;
  d.mean = sum / static_cast<double>(xs.size());
  d.median = quantile(0.5);
  d.q1 = quantile(0.25);
  d.q3 = quantile(0.75);
  d.min = xs.front();
  d.max = xs.back();
  return d;
}

struct LevelSummary {
  double noise = 0.0;
  std::size_t replicates = 0;
  std::size_t failures = 0;
  std::size_t excluded_g = 0;  ///< zero-valued true entries per replicate
  std::size_t excluded_b = 0;
  Distribution initial_g, initial_b, refined_g, refined_b;
  double mean_seconds = 0.0;
};

struct EvaluationReport {
  ExperimentConfig config;
  std::vector<ReplicateResult> runs;  ///< sorted by (level, replicate)
  std::vector<LevelSummary> levels;
};

inline std::vector<LevelSummary> summarize(const ExperimentConfig& config, const std::vector<ReplicateResult>& runs) {
  std::vector<LevelSummary> out;
  for (std::size_t l = 0; l < config.noise_levels.size(); ++l) {
    LevelSummary s;
    s.noise = config.noise_levels[l];
    std::vector<double> ig, ib, rg, rb;
    double secs = 0.0;
    for (const auto& r : runs) {
      if (r.level != l) continue;
      ++s.replicates;
      secs += r.seconds;
      if (!r.ok) {
        ++s.failures;
        continue;
      }
      ig.push_back(r.initial_g.value);
      ib.push_back(r.initial_b.value);
      rg.push_back(r.refined_g.value);
      rb.push_back(r.refined_b.value);
      s.excluded_g = r.initial_g.excluded;
      s.excluded_b = r.initial_b.excluded;
    }
    s.initial_g = describe(ig);
    s.initial_b = describe(ib);
    s.refined_g = describe(rg);
    s.refined_b = describe(rb);
    s.mean_seconds = s.replicates ? secs / static_cast<double>(s.replicates) : 0.0;
    out.push_back(s);
  }
  return out;
}

/// One replicate: simulate, corrupt, estimate, score. Library errors are
/// caught and recorded in the result.
inline ReplicateResult run_replicate(const ExperimentConfig& config, const NetworkModel& net, const NodeMap& nodes,
                                     const BusAdmittance& ybus, const LoadDynamics& dyn, const OperatingPoint& eq,
                                     const ParameterIndex& index, const Eigen::VectorXd& truth, std::size_t level,
                                     std::size_t replicate) {
  ReplicateResult r;
  r.level = level;
  r.replicate = replicate;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const double sigma = config.noise_levels[level];
    const auto rep = replicate_seed(config.seed, level, replicate);
    SimulationOptions so;
    so.substeps = config.substeps;
    so.warmup_samples = config.warmup_samples;
    MeasurementSeries series;
    if (config.sweep_target == SweepTarget::process) {
      const auto d = dyn.with_sigma(sigma);
      series = simulate(ybus, nodes, d, eq, config.dt, config.samples, simulation_seed(rep), so);
    } else {
      series = simulate(ybus, nodes, dyn, eq, config.dt, config.samples, simulation_seed(rep), so);
      if (sigma > 0.0) {
        const auto noise = NoiseSpec::from_level(sigma, PowerChannel::independent, config.tve_bound);
        series = add_measurement_noise(series, noise, noise_seed(rep), &ybus);
      }
    }
    const auto t1 = std::chrono::steady_clock::now();
    const auto est = run_pipeline(net, series, config.pipeline());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
    r.stage1_seconds = est.stage1_seconds;
    r.stage2_seconds = est.stage2_seconds;
    r.initial_g = parameter_mape(index, truth, est.theta_init, Quantity::conductance);
    r.initial_b = parameter_mape(index, truth, est.theta_init, Quantity::susceptance);
    r.refined_g = parameter_mape(index, truth, est.theta_refined, Quantity::conductance);
    r.refined_b = parameter_mape(index, truth, est.theta_refined, Quantity::susceptance);
    r.refinement_status = to_string(est.refinement.status);
    r.iterations = est.refinement.iterations;
    r.ok = true;
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.what();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return r;
}

inline EvaluationReport run_experiment(const ExperimentConfig& config, const NetworkModel& net,
                                       const LoadDynamics& dyn) {
  config.validate();
  const NodeMap nodes(net);
  const auto ybus = assemble_bus_admittance(net, nodes);
  const auto eq = equilibrium(ybus, nodes, dyn);
  const ParameterIndex index(net);
  const Eigen::VectorXd truth = true_parameters(net, index);

  EvaluationReport report;
  report.config = config;
  const std::size_t jobs = config.noise_levels.size() * config.replicates;
  report.runs.resize(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs; j = next++)
      report.runs[j] = run_replicate(config, net, nodes, ybus, dyn, eq, index, truth, j / config.replicates,
                                     j % config.replicates);
  };
  unsigned workers = config.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : config.workers;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(jobs, 1)));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  report.levels = summarize(config, report.runs);
  return report;
}

/// Loads the feeder and dynamics named by the config. Without a dynamics file,
/// loads are drawn with RandomLoadOptions defaults from the master seed.
inline EvaluationReport run_experiment(const ExperimentConfig& config) {
  const auto net = load_network(config.feeder);
  const NodeMap nodes(net);
  const auto dyn = config.dynamics.empty() ? random_load_dynamics(nodes, splitmix64(config.seed ^ 0x6c6f616473ULL))
                                           : load_dynamics(net, config.dynamics);
  return run_experiment(config, net, dyn);
}

namespace detail {

inline nlohmann::json distribution_json(const Distribution& d) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return {{"count", d.count}, {"mean", num(d.mean)}, {"median", num(d.median)}, {"q1", num(d.q1)},
          {"q3", num(d.q3)},  {"min", num(d.min)},   {"max", num(d.max)}};
}

inline void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << body;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Long-format metrics: noise,replicate,stage,metric,value,method. Failed
/// replicates contribute no rows.
inline std::string results_csv(const EvaluationReport& report) {
  std::string s = "noise,replicate,stage,metric,value,method\n";
  for (const auto& r : report.runs) {
    if (!r.ok) continue;
    const std::string noise = format_double(report.config.noise_levels[r.level]);
    auto row = [&](const char* stage, const char* metric, double v) {
      s += noise + ',' + std::to_string(r.replicate) + ',' + stage + ',' + metric + ',' + format_double(v) + ',' +
           kMethodName + '\n';
    };
    row("initial", "mape_G", r.initial_g.value);
    row("initial", "mape_B", r.initial_b.value);
    row("refined", "mape_G", r.refined_g.value);
    row("refined", "mape_B", r.refined_b.value);
  }
  return s;
}

inline nlohmann::json summary_json(const EvaluationReport& report) {
  nlohmann::json levels = nlohmann::json::array();
  for (std::size_t l = 0; l < report.levels.size(); ++l) {
    const auto& s = report.levels[l];
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& r : report.runs)
      if (r.level == l && !r.ok) failures.push_back({{"replicate", r.replicate}, {"error", r.error}});
    levels.push_back({{"noise", s.noise},
                      {"replicates", s.replicates},
                      {"failures", s.failures},
                      {"failed_runs", failures},
                      {"excluded_zero_true", {{"G", s.excluded_g}, {"B", s.excluded_b}}},
                      {"initial", {{"mape_G", detail::distribution_json(s.initial_g)},
                                   {"mape_B", detail::distribution_json(s.initial_b)}}},
                      {"refined", {{"mape_G", detail::distribution_json(s.refined_g)},
                                   {"mape_B", detail::distribution_json(s.refined_b)}}}});
  }
  return {{"method", kMethodName}, {"levels", levels}};
}

/// Writes config.snapshot.json, results.csv, summary.json, timing.csv and
/// distribution_level<i>.csv into `dir`. Refuses a non-empty existing
/// directory unless `force`.
inline void emit_outputs(const EvaluationReport& report, const std::filesystem::path& dir, bool force = false) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !force)
      throw IoError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  detail::write_file(dir / "config.snapshot.json", config_to_json(report.config).dump(2) + "\n");
  detail::write_file(dir / "results.csv", results_csv(report));
  detail::write_file(dir / "summary.json", summary_json(report).dump(2) + "\n");

  std::string timing = "noise,replicate,seconds,stage1_seconds,stage2_seconds\n";
  for (const auto& r : report.runs)
    timing += format_double(report.config.noise_levels[r.level]) + ',' + std::to_string(r.replicate) + ',' +
              format_double(r.seconds) + ',' + format_double(r.stage1_seconds) + ',' +
              format_double(r.stage2_seconds) + '\n';
  detail::write_file(dir / "timing.csv", timing);

  for (std::size_t l = 0; l < report.levels.size(); ++l) {
    std::string body = "noise,replicate,initial_G,initial_B,refined_G,refined_B\n";
    for (const auto& r : report.runs) {
      if (r.level != l || !r.ok) continue;
      body += format_double(report.levels[l].noise) + ',' + std::to_string(r.replicate) + ',' +
              format_double(r.initial_g.value) + ',' + format_double(r.initial_b.value) + ',' +
              format_double(r.refined_g.value) + ',' + format_double(r.refined_b.value) + '\n';
    }
    detail::write_file(dir / ("distribution_level" + std::to_string(l) + ".csv"), body);
  }
}

}  // namespace lineest
