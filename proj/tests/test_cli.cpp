#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "lineest/feeder_io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kData = LINEEST_DATA_DIR;
const std::string kCli = LINEEST_CLI;

fs::path work_dir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "lineest_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

/// Runs the CLI with `args`, stdout to `out` (discarded when empty); returns the exit code.
int run(const std::string& args, const fs::path& out = {}) {
  const std::string redirect = out.empty() ? " >/dev/null" : " >" + out.string();
  const int status = std::system((kCli + " " + args + redirect + " 2>/dev/null").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("simulate --feeder " + (kData / "feeder4.json").string()), 1);
  EXPECT_EQ(run("simulate --feeder " + (kData / "feeder4.json").string() + " --out x.csv --dt -1"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, FeederValidation) {
  EXPECT_EQ(run("feeder validate " + (kData / "feeder13.json").string()), 0);
  const auto broken = work_dir() / "broken.json";
  std::ofstream(broken) << R"({"base": {"s_base_kva": 1, "v_base_kv": 1}, "buses": []})";
  EXPECT_EQ(run("feeder validate " + broken.string()), 2);
  EXPECT_EQ(run("feeder validate " + (work_dir() / "absent.json").string()), 2);

  auto net = lineest::load_network(kData / "feeder4.json");
  net.branches[1].z.setZero();
  net.branches[1].z(1, 1) = net.branches[1].z(1, 2) = net.branches[1].z(2, 1) = net.branches[1].z(2, 2) = {0.1, 0.2};
  const auto singular = work_dir() / "singular.json";
  lineest::save_network(net, singular);
  EXPECT_EQ(run("feeder validate " + singular.string()), 3);
}

TEST(Cli, SimulateEstimateRoundTrip) {
  const auto csv = work_dir() / "series.csv";
  const std::string sim = "simulate --feeder " + (kData / "feeder4.json").string() + " --dynamics " +
                          (kData / "feeder4_dynamics.json").string() + " --samples 800 --seed 3 --out " + csv.string();
  ASSERT_EQ(run(sim), 0);
  EXPECT_TRUE(fs::exists(csv.string() + ".meta.json"));
  EXPECT_EQ(run(sim), 2);
  EXPECT_EQ(run(sim + " --force"), 0);

  const auto est = work_dir() / "estimate.csv";
  ASSERT_EQ(run("estimate --feeder " + (kData / "feeder4.json").string() + " --measurements " + csv.string() +
                " --truth --out -",
                est),
            0);
  const auto text = slurp(est);
  EXPECT_EQ(text.rfind("from,to,n,p,G_true,G_init,G_refined,B_true,B_init,B_refined\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 14);
  EXPECT_EQ(run("estimate --feeder " + (kData / "feeder13.json").string() + " --measurements " + csv.string()), 2);
}

TEST(Cli, EvaluateRefusesNonEmptyOutputWithoutForce) {
  const auto out = work_dir() / "eval";
  const std::string ev = "evaluate --config " + (kData / "experiment.json").string() +
                         " --samples 600 --replicates 1 --noise 0,1e-5 --out " + out.string();
  ASSERT_EQ(run(ev), 0);
  EXPECT_TRUE(fs::exists(out / "results.csv"));
  EXPECT_EQ(run(ev), 2);
  EXPECT_EQ(run(ev + " --force"), 0);
}
