#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "qcplan/commands.hpp"

using namespace qcplan;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qcplan_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config_in.json";
  write_file(p, j.dump(2));
  return p.string();
}

json small_config(const fs::path& out) {
  return {{"data", {{"classes", 4}, {"dim", 8}, {"n_per_class", 10}, {"input_dim", 32}}},
          {"train", {{"warmup_epochs", 2}, {"main_epochs", 3}, {"lr", 0.01}, {"batch_size", 16}}},
          {"output_dir", out.string()}};
}

int tool(const std::string& args) {
  const std::string cmd = std::string(QCPLAN_TOOL_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t csv_rows(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n - 1;
}

}  // namespace

TEST(Config, RoundTripsThroughJson) {
  ExperimentConfig c = canonical_config();
  c.loss = MarginSpec::magface(MagLinear{0.4, 0.7, 12.0, 90.0}, 16.0);
  c.loss.negative = CurricularNegative{0.25};
  c.reg.b_mode = OffsetMode::Zero;
  c.train.mode = ParamMode::FrozenDirection;
  c.data.noise_levels = {{0.1, 0.25}, {0.3, 0.75}};
  const std::string once = serialize_config(c);
  const std::string twice = serialize_config(parse_config(once));
  EXPECT_EQ(once, twice);
  EXPECT_EQ(to_json(parse_config(once)), to_json(c));

  for (const MarginSpec& spec : {MarginSpec::adaface(0.4, 32.0), MarginSpec::mv_softmax(0.35, 1.2, 32.0),
                                 MarginSpec::sphereface(1.35, 32.0), MarginSpec::cosface(0.35, 32.0)}) {
    c.loss = spec;
    EXPECT_EQ(serialize_config(parse_config(serialize_config(c))), serialize_config(c));
  }
}

TEST(Config, MissingKSolvesForBalance) {
  const ExperimentConfig c = parse_config(R"({"reg": {"l_a": 1.0, "u_a": 100.0, "k": null}})");
  EXPECT_NEAR(c.reg.k, 3421.926910299003, 1e-9);
  EXPECT_EQ(parse_config("{}").reg.k, ExperimentConfig{}.reg.k);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  for (const char* text : {R"({"bogus": 1})", R"({"loss": {"margin": 0.5}})", R"({"loss": {"m2": {"mode": "x"}}})",
                           R"({"data": {"noise_levels": [{"sigma": 0, "fraction": 1, "extra": 2}]}})",
                           R"({"train": {"mode": "free"}})", R"({"emit": ["plots"]})", R"({"reg": {"l_a": 5, "u_a": 5}})",
                           R"({"data": {"classes": -3}})", R"({"train": {"lr": "fast"}})", "{not json"}) {
    try {
      parse_config(text);
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ConfigError) << text;
    }
  }
}

TEST(Cli, SolveKTable) {
  std::ostringstream out, err;
  ASSERT_EQ(cmd_solve_k(10.0, 110.0, out, err), kExitOk);
  std::istringstream in(out.str());
  std::string header, first, line, last;
  std::getline(in, header);
  EXPECT_EQ(header, "k,p_d,z_star");
  std::getline(in, first);
  while (std::getline(in, line)) last = line;
  EXPECT_EQ(first.substr(first.rfind(',') + 1), "10");
  EXPECT_EQ(last.substr(last.rfind(',') + 1), "110");
  EXPECT_EQ(cmd_solve_k(1.0, 1.0, out, err), kExitUsage);
}

TEST(Cli, ExitCodesFromTheTool) {
  const fs::path dir = scratch("exit_codes");
  const std::string cfg = write_config(dir, small_config(dir / "run"));
  EXPECT_EQ(tool("--help"), 0);
  EXPECT_EQ(tool("no-such-command"), 2);
  EXPECT_EQ(tool("solve-k --la 1 --ua 100"), 0);
  EXPECT_EQ(tool("solve-k --la 1 --ua 1"), 2);
  EXPECT_EQ(tool("check-grad --config " + cfg + " --instances 3"), 0);
  EXPECT_EQ(tool("check-grad --config " + cfg + " --instances 3 --inject-fault"), 1);
  EXPECT_EQ(tool("check-grad --config " + cfg + " --instances 0"), 2);
  EXPECT_EQ(tool("plan --config " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(tool("analyze --run " + (dir / "nowhere").string() + " --emit metrics"), 4);
  EXPECT_EQ(tool("plan --config " + cfg), 0);
  EXPECT_EQ(tool("analyze --run " + (dir / "run").string() + " --emit projection,plots"), 2);
  EXPECT_EQ(tool("sweep --config " + cfg + " --param loss.nope --values 1"), 2);
  EXPECT_EQ(tool("sweep --config " + cfg + " --param output_dir --values 1"), 2);

  json runaway = small_config(dir / "runaway");
  runaway["train"]["lr"] = 1e300;
  EXPECT_EQ(tool("plan --config " + write_config(dir, runaway)), 3);
  EXPECT_TRUE(fs::exists(dir / "runaway" / "failure_state.json"));
}

TEST(Cli, PlanWritesSchemasAndCreatesDirectories) {
  const fs::path dir = scratch("plan");
  json j = small_config(dir / "nested" / "run");
  j["emit"] = {"history", "magnitudes", "projection", "metrics"};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(write_config(dir, j), std::nullopt, out, err), kExitOk) << err.str();
  const fs::path run = dir / "nested" / "run";
  EXPECT_EQ(read_file(run / "history.csv").substr(0, 44), "epoch,phase,mean_lsm,mean_lreg,mean_pd,lr\n0,");
  EXPECT_EQ(csv_rows(run / "history.csv"), 5u);
  EXPECT_EQ(csv_rows(run / "magnitudes.csv"), 40u);
  EXPECT_EQ(read_file(run / "magnitudes.csv").substr(0, 68),
            "sample_id,class,noise_sigma,mislabeled,p_d,magnitude,cos_to_proxy\n0,");
  EXPECT_EQ(read_file(run / "projection.csv").substr(0, 31), "sample_id,x,y,magnitude,p_d\npro");

  const json metrics = json::parse(read_file(run / "metrics.json"));
  for (const char* key : {"tar_at_far", "auc", "rank_k", "pearson_pd_mag", "pearson_noise_mag"}) {
    EXPECT_TRUE(metrics.contains(key)) << key;
  }
  const json manifest = json::parse(read_file(run / "manifest.json"));
  for (const auto& [name, sum] : manifest.at("files").items()) {
    EXPECT_EQ(sha256_hex(read_file(run / name)), sum.get<std::string>()) << name;
  }
  EXPECT_TRUE(manifest.at("seed_override").is_null());
}

TEST(Cli, ZeroRateSmokeRunHasOneRow) {
  const fs::path dir = scratch("smoke");
  json j = small_config(dir / "run");
  j["train"] = {{"warmup_epochs", 0}, {"main_epochs", 1}, {"lr", 0.0}};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(write_config(dir, j), std::nullopt, out, err), kExitOk);
  EXPECT_EQ(csv_rows(dir / "run" / "history.csv"), 1u);
}

TEST(Cli, IdenticalConfigsGiveIdenticalChecksums) {
  const fs::path dir = scratch("repro");
  const std::string cfg = write_config(dir, small_config(dir / "a"));
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(cfg, (dir / "a").string(), out, err), kExitOk);
  ASSERT_EQ(cmd_plan(cfg, (dir / "b").string(), out, err), kExitOk);
  const json a = json::parse(read_file(dir / "a" / "manifest.json"));
  const json b = json::parse(read_file(dir / "b" / "manifest.json"));
  EXPECT_EQ(a.at("config_hash"), b.at("config_hash"));
  for (const char* f : {"history.csv", "magnitudes.csv", "state.json"}) EXPECT_EQ(a["files"][f], b["files"][f]) << f;
}

TEST(Cli, SeedOverrideIsAppliedAndRecorded) {
  const fs::path dir = scratch("seed");
  const std::string cfg = write_config(dir, small_config(dir / "a"));
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(cfg, (dir / "a").string(), out, err), kExitOk);
  ::setenv("QCP_SEED_OVERRIDE", "17", 1);
  const int code = cmd_plan(cfg, (dir / "b").string(), out, err);
  ::setenv("QCP_SEED_OVERRIDE", "seventeen", 1);
  const int bad = cmd_plan(cfg, (dir / "c").string(), out, err);
  ::unsetenv("QCP_SEED_OVERRIDE");
  ASSERT_EQ(code, kExitOk);
  EXPECT_EQ(bad, kExitUsage);
  const json b = json::parse(read_file(dir / "b" / "manifest.json"));
  EXPECT_EQ(b.at("seed_override"), 17);
  EXPECT_EQ(b.at("seed"), 17);
  EXPECT_NE(read_file(dir / "a" / "history.csv"), read_file(dir / "b" / "history.csv"));
  EXPECT_EQ(parse_config(read_file(dir / "b" / "config.json")).data.seed, 17u);
}

TEST(Cli, AnalyzeEmitsOnlyWhatIsAsked) {
  const fs::path dir = scratch("analyze");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(write_config(dir, small_config(dir / "run")), std::nullopt, out, err), kExitOk);
  const fs::path run = dir / "run";
  ASSERT_EQ(cmd_analyze(run.string(), "projection", std::string("2,3"), out, err), kExitOk);
  EXPECT_TRUE(fs::exists(run / "projection.csv"));
  EXPECT_FALSE(fs::exists(run / "metrics.json"));
  EXPECT_EQ(read_file(run / "projection.csv").substr(28, 8), "proxy:2,");

  ASSERT_EQ(cmd_analyze(run.string(), "metrics", std::nullopt, out, err), kExitOk);
  const json m = json::parse(read_file(run / "metrics.json"));
  double prev = 2.0;
  for (double far : default_far_grid()) {
    const double tar = m["tar_at_far"][format_key(far)].get<double>();
    EXPECT_LE(tar, prev);
    prev = tar;
  }
  const json manifest = json::parse(read_file(run / "manifest.json"));
  EXPECT_EQ(manifest["files"]["metrics.json"], sha256_hex(read_file(run / "metrics.json")));
  EXPECT_EQ(cmd_analyze(run.string(), "metrics", std::string("1,1"), out, err), kExitOk);  // pair only matters for projection
  EXPECT_EQ(cmd_analyze(run.string(), "projection", std::string("1,1"), out, err), kExitUsage);
  fs::remove(run / "state.json");
  EXPECT_EQ(cmd_analyze(run.string(), "metrics", std::nullopt, out, err), kExitMissing);
}

TEST(Cli, SingleValueSweepMatchesPlan) {
  const fs::path dir = scratch("sweep1");
  const std::string cfg = write_config(dir, small_config(dir / "sweep"));
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(cfg, (dir / "plan").string(), out, err), kExitOk);
  ASSERT_EQ(cmd_sweep(cfg, "loss.s", "6", std::nullopt, out, err), kExitOk) << err.str();
  const fs::path child = dir / "sweep" / "loss.s=6";
  for (const char* f : {"history.csv", "magnitudes.csv", "state.json"}) {
    EXPECT_EQ(read_file(child / f), read_file(dir / "plan" / f)) << f;
  }
  EXPECT_EQ(json::parse(read_file(child / "manifest.json"))["config_hash"],
            json::parse(read_file(dir / "plan" / "manifest.json"))["config_hash"]);
  EXPECT_EQ(csv_rows(dir / "sweep" / "summary.csv"), 1u);
}

TEST(Cli, SweepWithoutRegularizerStillReportsIt) {
  const fs::path dir = scratch("sweep_lambda");
  json j = small_config(dir / "sweep");
  j["train"]["main_epochs"] = 8;
  const std::string cfg = write_config(dir, j);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_sweep(cfg, "reg.lambda_g", "0,300,1000", std::nullopt, out, err), kExitOk) << err.str();
  EXPECT_EQ(csv_rows(dir / "sweep" / "summary.csv"), 3u);
  const auto history = [&](const char* v) {
    std::istringstream in(read_file(dir / "sweep" / (std::string("reg.lambda_g=") + v) / "history.csv"));
    std::vector<double> lreg;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> cells = split_list(line);
      lreg.push_back(std::stod(cells[3]));
    }
    return lreg;
  };
  const auto off = history("0");
  const auto on = history("300");
  EXPECT_GT(off.back(), 0.0);  // reported ...
  EXPECT_GT(off.back(), 5.0 * on.back());  // ... but not driven down
  EXPECT_EQ(cmd_sweep(cfg, "data.classes", "2.5", std::nullopt, out, err), kExitUsage);
}

TEST(Cli, CsvRealsRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 3421.926910299003, 1e-300, -2.5e17, 0.0}) {
    EXPECT_EQ(std::stod(format_real(v)), v);
  }
  EXPECT_EQ(format_real(0.1), "0.10000000000000001");
}

TEST(Config, ShippedConfigsParse) {
  const ExperimentConfig c = load_config(std::string(QCPLAN_SOURCE_DIR) + "/configs/canonical.json");
  EXPECT_EQ(serialize_config(c), serialize_config(canonical_config()));
  EXPECT_NO_THROW(load_config(std::string(QCPLAN_SOURCE_DIR) + "/configs/smoke.json"));
}

// Checksums frozen from the first canonical run with this toolchain.
TEST(Cli, CanonicalRunMatchesGoldens) {
  const fs::path dir = scratch("golden");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_plan(std::string(QCPLAN_SOURCE_DIR) + "/configs/canonical.json", (dir / "run").string(), out, err),
            kExitOk);
  std::istringstream golden(read_file(std::string(QCPLAN_SOURCE_DIR) + "/tests/golden/canonical.sha256"));
  std::size_t n = 0;
  for (std::string sum, name; golden >> sum >> name; ++n) {
    EXPECT_EQ(sha256_hex(read_file(dir / "run" / name)), sum) << name;
  }
  EXPECT_EQ(n, 5u);
}
