#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "fixtures.hpp"
#include "stannis/cli.hpp"

using namespace stannis;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string data(const std::string& rel) { return test::data_path(rel); }
std::string net(const std::string& name) { return data("networks/" + name + ".json"); }

// Cluster and calibration files shared by every test in the suite.
class Pipeline : public ::testing::Test {
 protected:
  static fs::path dir;
  static std::string cluster;
  static std::string calibration;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / fmt::format("stannis_cli_{}", ::getpid());
    fs::create_directories(dir);
    cluster = (dir / "cluster.json").string();
    calibration = (dir / "calibration.json").string();
    auto r = invoke({"bench-import", "--cluster", data("cluster_base.json"), "--bench", data("benchmarks.csv"), "-o",
                  cluster});
    ASSERT_EQ(r.code, 0) << r.err;
    std::vector<std::string> args{"calibrate", "--cluster", cluster, "--targets", data("calibration_targets.json"),
                                  "-o", calibration};
    for (const auto& n : test::network_names()) {
      args.push_back("--network");
      args.push_back(net(n));
    }
    r = invoke(args);
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static void TearDownTestSuite() { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

fs::path Pipeline::dir;
std::string Pipeline::cluster;
std::string Pipeline::calibration;

io::ojson json_file(const std::string& p) { return io::load_json(p); }

}  // namespace

TEST(Cli, HelpListsEveryConfigKey) {
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const auto& k : cli::config_keys()) EXPECT_NE(r.out.find(k.key), std::string::npos) << k.key;
  for (const auto& s : cli::subcommands()) EXPECT_NE(r.out.find(s), std::string::npos) << s;
  const auto sub = invoke({"tune", "--help"});
  EXPECT_EQ(sub.code, 0);
  EXPECT_NE(sub.out.find("tuner.C"), std::string::npos);
}

TEST(Cli, Version) { EXPECT_EQ(invoke({"--version"}).out, "1.0.0\n"); }

TEST(Cli, ExitCodes) {
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kExitUnknownSubcommand);
  EXPECT_EQ(invoke({"tune", "--cluster", "/nonexistent/cluster.json", "--network", net("nasnet")}).code,
            cli::kExitInputIo);
  const auto bad_key = invoke({"tune", "--set", "tuner.bogus=1", "--cluster", "/nonexistent", "--network", net("nasnet")});
  EXPECT_EQ(bad_key.code, cli::kExitValidation);
  EXPECT_NE(bad_key.err.find("tuner.bogus"), std::string::npos);
  EXPECT_EQ(invoke({"tune", "--set", "tuner.E=0.5", "--cluster", data("cluster_base.json"), "--network", net("nasnet")})
                .code,
            cli::kExitValidation);
  EXPECT_EQ(invoke({"tune", "--no-such-flag"}).code, cli::kExitValidation);
}

TEST(Cli, BinaryExitCodes) {
  const std::string bin = STANNIS_CLI_PATH;
  auto status = [&](const std::string& args) {
    const int raw = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(raw);
  };
  EXPECT_EQ(status("--version"), 0);
  EXPECT_EQ(status("frobnicate"), 64);
  EXPECT_EQ(status("tune --cluster /nonexistent/c.json --network " + net("nasnet")), 66);
  EXPECT_EQ(status("verify-train --set train.steps=1 -o /nonexistent/dir/out.json"), 73);
  EXPECT_EQ(status("tune --set nope=1"), 2);
}

TEST(Cli, MalformedInputNamesFile) {
  const auto r = invoke({"bench-import", "--cluster", data("cluster_base.json"), "--bench", net("nasnet"), "--format",
                      "csv"});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("nasnet.json"), std::string::npos);
}

TEST_F(Pipeline, TuneShippedFixtures) {
  const auto out = path("tune.json");
  const auto r = invoke({"tune", "--cluster", cluster, "--network", net("mobilenetv2"), "-o", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json_file(out);
  EXPECT_EQ(j["slow_node"], "csd00");
  EXPECT_EQ(j["per_node"].size(), 25u);
  EXPECT_EQ(j["per_node"]["csd00"]["batch"], 25);
  EXPECT_LE(j["margin_achieved"].get<double>(), 0.2);
  // Library and CLI agree.
  const auto lib = tune_cluster(io::cluster_from_json(json_file(cluster)), test::network("mobilenetv2"), TuneConfig{});
  EXPECT_EQ(j["per_node"]["host"]["batch"], lib.per_node.at("host").batch_size);
}

TEST_F(Pipeline, SimulateHostOnlyIsNeutral) {
  const auto r = invoke({"simulate", "--cluster", cluster, "--network", net("inceptionv3"), "--n-csds", "0",
                      "--calibration", calibration});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = io::parse_json(r.out, "stdout");
  EXPECT_EQ(j["speedup_vs_host"].get<double>(), 1.0);
  EXPECT_EQ(j["energy_saving_vs_baseline"].get<double>(), 0.0);
}

TEST_F(Pipeline, TunePartitionSimulateCompose) {
  const auto t = path("t.json"), p = path("p.json"), ids = path("ids.csv");
  ASSERT_EQ(invoke({"tune", "--cluster", cluster, "--network", net("squeezenet"), "--n-csds", "4", "-o", t}).code, 0);
  auto r = invoke({"partition", "--tune", t, "--cluster", cluster, "--ids-csv", ids, "-o", p});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(ids));
  r = invoke({"simulate", "--cluster", cluster, "--network", net("squeezenet"), "--tune", t, "--plan", p});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sim = io::parse_json(r.out, "stdout");
  EXPECT_EQ(sim["config"]["n_csds"], 4);
  // Same result as tuning and partitioning internally.
  r = invoke({"simulate", "--cluster", cluster, "--network", net("squeezenet"), "--n-csds", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto internal = io::parse_json(r.out, "stdout");
  auto chained = sim;
  internal.erase("manifest");
  chained.erase("manifest");
  EXPECT_EQ(chained.dump(), internal.dump());

  // A plan whose batches disagree with the tune is rejected.
  auto plan = json_file(p);
  plan["per_node"]["host"]["batch"] = 1;
  io::write_file(p, io::dump(plan));
  r = invoke({"simulate", "--cluster", cluster, "--network", net("squeezenet"), "--tune", t, "--plan", p});
  EXPECT_EQ(r.code, cli::kExitValidation);
}

TEST_F(Pipeline, SweepEnergyMatchesMeasurements) {
  const auto out = path("sweep.csv");
  const auto r = invoke({"sweep", "--cluster", cluster, "--network", net("mobilenetv2"), "--n-csds", "24,0,4,16,8",
                      "--calibration", calibration, "-o", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(cli::sidecar_path(out)));
  const auto rows = io::parse_sweep_csv(io::read_file(out), out);
  const std::map<std::size_t, double> measured{{0, 13.10}, {4, 8.30}, {8, 6.84}, {16, 5.05}, {24, 4.02}};
  ASSERT_EQ(rows.size(), measured.size());
  for (const auto& row : rows) {
    const double want = measured.at(row.n_csds);
    EXPECT_LE(std::abs(row.j_per_img - want) / want, 0.05) << row.n_csds;
  }
  EXPECT_EQ(rows.front().n_csds, 0u);
  EXPECT_NEAR(rows.back().speedup, 2.7, 1e-9);
}

TEST_F(Pipeline, ReportPassThroughAndMerge) {
  std::vector<std::string> inputs;
  for (const auto& n : test::network_names()) {
    const auto out = path("sw_" + n + ".csv");
    const auto r = invoke({"sweep", "--cluster", cluster, "--network", net(n), "--n-csds", "0,1,2,3,4,6,8,12,16,20,24",
                        "--calibration", calibration, "-o", out});
    ASSERT_EQ(r.code, 0) << r.err;
    inputs.push_back(out);
  }

  const auto single = path("single.csv");
  auto r = invoke({"report", "--in", inputs[1], "-o", single});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_file(single), io::read_file(inputs[1]));

  const auto merged = path("merged.csv"), summary = path("summary.txt");
  std::vector<std::string> args{"report", "-o", merged, "--summary", summary};
  for (auto it = inputs.rbegin(); it != inputs.rend(); ++it) {
    args.push_back("--in");
    args.push_back(*it);
  }
  r = invoke(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = io::parse_sweep_csv(io::read_file(merged), merged);
  EXPECT_EQ(rows.size(), 44u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_TRUE(std::tie(rows[i - 1].network, rows[i - 1].n_csds) < std::tie(rows[i].network, rows[i].n_csds));
  }
  const auto text = io::read_file(summary);
  EXPECT_EQ(r.out, text);
  EXPECT_NE(text.find("mobilenetv2: max speedup 2.7x at N=24, max saving 69% at N=24"), std::string::npos) << text;

  r = invoke({"report", "--in", inputs[0], "--in", inputs[0]});
  EXPECT_EQ(r.code, cli::kExitValidation);
}

TEST_F(Pipeline, ManifestEchoesEffectiveConfig) {
  const auto out = path("tune_cfg.json");
  ASSERT_EQ(invoke({"tune", "--cluster", cluster, "--network", net("nasnet"), "--set", "tuner.C=6", "--seed", "7", "-o",
                 out})
                .code,
            0);
  const auto m = json_file(out)["manifest"];
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["config"]["tuner.C"].get<double>(), 6.0);
  for (const auto& k : cli::config_keys()) EXPECT_TRUE(m["config"].contains(k.key)) << k.key;
  EXPECT_EQ(m["inputs"].size(), 2u);
}

TEST_F(Pipeline, ReplayIsByteIdentical) {
  struct Case {
    std::vector<std::string> args;
    std::string artifact;
    std::vector<std::string> extra_outputs;
  };
  const auto t = path("rt.json"), p = path("rp.json");
  std::vector<Case> cases{
      {{"tune", "--cluster", cluster, "--network", net("nasnet"), "--n-csds", "5", "--set", "tuner.E=4"}, t, {}},
      {{"partition", "--tune", t, "--cluster", cluster, "--ids-csv", p + ".ids.csv"}, p, {".ids.csv"}},
      {{"simulate", "--cluster", cluster, "--network", net("nasnet"), "--tune", t, "--plan", p, "--calibration",
        calibration},
       path("rs.json"),
       {}},
      {{"sweep", "--cluster", cluster, "--network", net("nasnet"), "--n-csds", "0,3", "--calibration", calibration},
       path("rw.csv"),
       {}},
      {{"verify-train", "--set", "train.steps=40", "--trace", path("rv.json") + ".trace.csv"},
       path("rv.json"),
       {".trace.csv"}},
  };
  for (auto& c : cases) {
    auto args = c.args;
    args.insert(args.end(), {"-o", c.artifact});
    auto r = invoke(args);
    ASSERT_EQ(r.code, 0) << c.args[0] << ": " << r.err;
    const bool csv = c.artifact.ends_with(".csv");
    const std::string manifest_source = csv ? cli::sidecar_path(c.artifact) : c.artifact;
    const std::string replayed = c.artifact + ".replay";
    std::vector<std::string> replay_args{c.args[0], "--replay", manifest_source, "-o", replayed};
    if (c.args[0] == "partition") replay_args.insert(replay_args.end(), {"--ids-csv", replayed + ".ids.csv"});
    if (c.args[0] == "verify-train") replay_args.insert(replay_args.end(), {"--trace", replayed + ".trace.csv"});
    r = invoke(replay_args);
    ASSERT_EQ(r.code, 0) << c.args[0] << " replay: " << r.err;
    EXPECT_EQ(io::read_file(replayed), io::read_file(c.artifact)) << c.args[0];
    for (const auto& suffix : c.extra_outputs) {
      const std::string original = c.args[0] == "partition" ? p + suffix : c.artifact + suffix;
      EXPECT_EQ(io::read_file(replayed + suffix), io::read_file(original)) << c.args[0] << suffix;
    }
  }
}

TEST_F(Pipeline, ReplayRejectsOtherSubcommand) {
  const auto t = path("rt2.json");
  ASSERT_EQ(invoke({"tune", "--cluster", cluster, "--network", net("nasnet"), "-o", t}).code, 0);
  EXPECT_EQ(invoke({"simulate", "--replay", t}).code, cli::kExitValidation);
}

TEST(Cli, VerifyTrainReportsBothAveragings) {
  const auto r = invoke({"verify-train", "--set", "train.steps=200"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = io::parse_json(r.out, "stdout");
  EXPECT_EQ(j["total_batch"], 48);
  EXPECT_TRUE(j.contains("weighted"));
  EXPECT_TRUE(j.contains("uniform"));
}

TEST_F(Pipeline, PartitionShippedDataset) {
  const auto t = path("full_t.json"), p = path("full_p.json");
  ASSERT_EQ(invoke({"tune", "--cluster", cluster, "--network", net("mobilenetv2"), "-o", t}).code, 0);
  const auto r = invoke({"partition", "--tune", t, "--dataset", data("dataset.json"), "-o", p});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto plan = io::plan_from_json(json_file(p));
  EXPECT_EQ(plan.epoch_steps, 109);
  const auto tune = io::tune_from_json(json_file(t));
  EXPECT_TRUE(validate_plan(plan, tune, io::dataset_from_json(json_file(data("dataset.json")))).empty());
}
