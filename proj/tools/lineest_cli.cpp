// lineest: simulate micro-PMU series, estimate line parameters, run Monte
// Carlo evaluations. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lineest/lineest.hpp"

namespace fs = std::filesystem;
using namespace lineest;

namespace {

void refuse_overwrite(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) throw IoError(path.string() + " exists; pass --force to overwrite");
}

struct SimulateArgs {
  std::string feeder, dynamics, out, save_dynamics;
  std::uint64_t seed = 1;
  std::size_t samples = 3600;
  double dt = 0.05;
  int substeps = 10;
  std::size_t warmup = 200;
  double noise = 0.0;
  bool force = false;
};

int run_simulate(const SimulateArgs& a) {
  const auto net = load_network(a.feeder);
  const NodeMap nodes(net);
  const auto ybus = assemble_bus_admittance(net, nodes);
  const auto dyn = a.dynamics.empty() ? random_load_dynamics(nodes, a.seed) : load_dynamics(net, a.dynamics);
  const auto eq = equilibrium(ybus, nodes, dyn);
  SimulationOptions so;
  so.substeps = a.substeps;
  so.warmup_samples = a.warmup;
  auto series = simulate(ybus, nodes, dyn, eq, a.dt, a.samples, a.seed, so);
  if (a.noise > 0.0)
    series = add_measurement_noise(series, NoiseSpec::from_level(a.noise, PowerChannel::independent),
                                   splitmix64(a.seed ^ 2u), &ybus);
  refuse_overwrite(a.out, a.force);
  save_measurements(series, net, a.out);
  if (!a.save_dynamics.empty()) {
    refuse_overwrite(a.save_dynamics, a.force);
    save_dynamics(dyn, net, a.save_dynamics);
  }
  std::cerr << "wrote " << series.samples() << " samples x " << nodes.size() << " nodes to " << a.out << '\n';
  return 0;
}

struct EstimateArgs {
  std::string feeder, measurements, out;
  std::size_t lag = 1;
  std::size_t snapshots = 300;
  std::string aggregation = "snapshots";
  bool truth = false;
  bool force = false;
};

int run_estimate(const EstimateArgs& a) {
  const auto net = load_network(a.feeder);
  const auto series = load_measurements(net, a.measurements);
  PipelineOptions opt;
  opt.lag = a.lag;
  opt.snapshots = a.snapshots;
  opt.aggregation = a.aggregation == "mean" ? Aggregation::mean : Aggregation::snapshots;
  const auto est = run_pipeline(net, series, opt);
  for (const auto& w : est.warnings) std::cerr << "warning: " << w << '\n';
  for (std::size_t br = 0; br < est.branch_status.size(); ++br)
    if (est.branch_status[br] != BranchStatus::ok && est.branch_status[br] != BranchStatus::disconnected)
      std::cerr << "branch " << net.buses[net.branches[br].from].id << "-" << net.buses[net.branches[br].to].id
                << ": initial estimate " << to_string(est.branch_status[br]) << '\n';
  const NetworkModel* reference = a.truth ? &net : nullptr;
  if (a.out.empty() || a.out == "-") {
    write_estimate(est, net, std::cout, reference);
  } else {
    refuse_overwrite(a.out, a.force);
    save_estimate(est, net, a.out, reference);
  }
  std::cerr << "stage 1 " << est.stage1_seconds << " s, stage 2 " << est.stage2_seconds << " s ("
            << to_string(est.refinement.status) << ", " << est.refinement.iterations << " iterations)\n";
  return 0;
}

struct EvaluateArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples, lag, replicates;
  std::optional<double> dt;
  std::optional<unsigned> workers;
  std::vector<double> noise;
  bool force = false;
};

int run_evaluate(const EvaluateArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.samples) cfg.samples = *a.samples;
  if (a.lag) cfg.lag = *a.lag;
  if (a.replicates) cfg.replicates = *a.replicates;
  if (a.dt) cfg.dt = *a.dt;
  if (a.workers) cfg.workers = *a.workers;
  if (!a.noise.empty()) cfg.noise_levels = a.noise;
  if (!a.out.empty()) cfg.output_dir = a.out;
  cfg.validate();
  // Check before the (possibly long) run.
  if (fs::exists(cfg.output_dir) && !fs::is_empty(cfg.output_dir) && !a.force)
    throw IoError("output directory " + cfg.output_dir.string() + " is not empty; pass --force to overwrite");
  const auto report = run_experiment(cfg);
  emit_outputs(report, cfg.output_dir, a.force);
  for (const auto& s : report.levels)
    std::cout << "noise " << s.noise << ": median MAPE B initial " << s.initial_b.median << " %, refined "
              << s.refined_b.median << " % (" << s.replicates - s.failures << "/" << s.replicates << " ok)\n";
  std::cout << "results in " << cfg.output_dir.string() << '\n';
  return 0;
}

int run_validate(const std::string& path) {
  const auto net = load_network(path);
  for (const auto& br : net.branches) invert_branch_impedance(br);
  const NodeMap nodes(net);
  std::size_t connected = 0;
  for (const auto& br : net.branches) connected += br.connected ? 1 : 0;
  std::cout << path << ": ok, " << net.buses.size() << " buses, " << net.branches.size() << " branches ("
            << connected << " connected), " << nodes.size() << " nodes, " << ParameterIndex(net).size()
            << " phase pairs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Line parameter estimation from micro-PMU time series"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* cmd_sim = app.add_subcommand("simulate", "feeder + load dynamics -> measurement CSV");
  cmd_sim->add_option("--feeder", sim.feeder, "feeder JSON")->required()->check(CLI::ExistingFile);
  cmd_sim->add_option("--dynamics", sim.dynamics, "load dynamics JSON (random loads from --seed if omitted)")
      ->check(CLI::ExistingFile);
  cmd_sim->add_option("--out", sim.out, "measurement CSV (sidecar <out>.meta.json)")->required();
  cmd_sim->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
  cmd_sim->add_option("--samples", sim.samples, "number of samples")->capture_default_str()->check(CLI::Range(2ul, 100000000ul));
  cmd_sim->add_option("--dt", sim.dt, "sample interval [s]")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_sim->add_option("--substeps", sim.substeps, "integration steps per sample")->capture_default_str()->check(CLI::Range(1, 100000));
  cmd_sim->add_option("--warmup", sim.warmup, "discarded samples before recording")->capture_default_str();
  cmd_sim->add_option("--noise", sim.noise, "measurement noise std on V, delta, P, Q")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd_sim->add_option("--save-dynamics", sim.save_dynamics, "also write the load dynamics used");
  cmd_sim->add_flag("--force", sim.force, "overwrite existing files");

  EstimateArgs est;
  auto* cmd_est = app.add_subcommand("estimate", "feeder connectivity + measurement CSV -> estimate CSV");
  cmd_est->add_option("--feeder", est.feeder, "feeder JSON")->required()->check(CLI::ExistingFile);
  cmd_est->add_option("--measurements", est.measurements, "measurement CSV")->required()->check(CLI::ExistingFile);
  cmd_est->add_option("--out", est.out, "estimate CSV ('-' for stdout)")->capture_default_str();
  cmd_est->add_option("--lag", est.lag, "covariance lag in samples")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_est->add_option("--snapshots", est.snapshots, "samples stacked in the refinement")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_est->add_option("--aggregation", est.aggregation, "refinement rows: snapshots | mean")
      ->capture_default_str()
      ->check(CLI::IsMember({"snapshots", "mean"}));
  cmd_est->add_flag("--truth", est.truth, "report the feeder's own impedances as true values");
  cmd_est->add_flag("--force", est.force, "overwrite an existing file");

  EvaluateArgs ev;
  auto* cmd_ev = app.add_subcommand("evaluate", "experiment config -> Monte Carlo report");
  cmd_ev->add_option("--config", ev.config, "experiment JSON")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--out", ev.out, "output directory (overrides the config)");
  cmd_ev->add_option("--seed", ev.seed, "master seed");
  cmd_ev->add_option("--samples", ev.samples, "samples per series");
  cmd_ev->add_option("--dt", ev.dt, "sample interval [s]")->check(CLI::PositiveNumber);
  cmd_ev->add_option("--lag", ev.lag, "covariance lag in samples");
  cmd_ev->add_option("--noise", ev.noise, "noise levels, comma separated")->delimiter(',');
  cmd_ev->add_option("--replicates", ev.replicates, "replicates per noise level");
  cmd_ev->add_option("--workers", ev.workers, "concurrent replicates (0 = all cores)");
  cmd_ev->add_flag("--force", ev.force, "write into a non-empty output directory");

  std::string feeder_path;
  auto* cmd_feeder = app.add_subcommand("feeder", "feeder file utilities");
  cmd_feeder->require_subcommand(1);
  auto* cmd_validate = cmd_feeder->add_subcommand("validate", "schema and consistency check");
  cmd_validate->add_option("file", feeder_path, "feeder JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*cmd_sim) return run_simulate(sim);
    if (*cmd_est) return run_estimate(est);
    if (*cmd_ev) return run_evaluate(ev);
    if (*cmd_validate) return run_validate(feeder_path);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
