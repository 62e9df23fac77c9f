#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "builders.hpp"

namespace fs = std::filesystem;
using namespace testing_support;

namespace {

struct Run {
  int code;
  std::string output;
};

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("epiagent_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run run(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const auto log = dir / "cli.log";
  const std::string cmd = env + " " + std::string(EPIAGENT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_file(log)};
}

std::string f(const std::string& rel) { return fixture(rel); }

std::string pipeline_args(const std::string& planner, const fs::path& out, const std::string& graph_flag = "") {
  return "pipeline --scenario " + f("scenarios/six_scenarios.json") + " --data " + f("data/six_scenarios.csv") +
         " --patches " + f("patches.csv") + " --corpus " + f("corpus") + " --config " + f("config.json") +
         " --planner scripted:" + f("planner/" + planner) + " --seed 7 --out " + out.string() + " " + graph_flag;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  return out;
}

}  // namespace

TEST(Cli, VerifyGraphExitCodes) {
  const auto dir = scratch("verify");
  EXPECT_EQ(run("verify-graph --graph " + f("graphs/sveird.json"), dir).code, 0);
  const auto bad = run("verify-graph --graph " + f("graphs/seird_direct_recovery.json"), dir);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("R1"), std::string::npos);
  EXPECT_EQ(run("verify-graph --graph /nonexistent.json", dir).code, 1);
  EXPECT_NE(run("verify-graph", dir).code, 0);
}

TEST(Cli, SimulateWritesTrajectories) {
  const auto dir = scratch("simulate");
  const auto r = run("simulate --graph " + f("graphs/seird.json") + " --params " + f("params/seird.json") +
                         " --scenario " + f("scenarios/seird_baseline.json") + " --out " + (dir / "out").string() +
                         " --full-state --data-out " + (dir / "data.csv").string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto files = tree(dir / "out");
  EXPECT_TRUE(files.count("simulation_summary.json"));
  EXPECT_TRUE(files.count("trajectory_baseline.csv"));
  EXPECT_TRUE(files.count("state_baseline.csv"));
  EXPECT_EQ(io::read_file(dir / "data.csv").rfind("scenario_id,patch_id,week", 0), 0u);
  EXPECT_EQ(r.output.find("UNVERIFIED"), std::string::npos);
}

TEST(Cli, ZeroTransmissionGivesFlatCumulativeInfections) {
  const auto dir = scratch("beta0");
  const auto r = run("simulate --graph " + f("graphs/seir.json") + " --params " + f("params/seir_beta0.json") +
                         " --scenario " + f("scenarios/seir_decay.json") + " --out " + dir.string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = io::parse_csv(io::read_file(dir / "trajectory_baseline.csv"));
  ASSERT_GT(rows.size(), 2u);
  const auto col = io::header_index(rows[0], {"cumulative_infections_count"}, "trajectory").at("cumulative_infections_count");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(std::stod(rows[i][col]), 0.0);
}

TEST(Cli, UnverifiedGraphRequiresOptIn) {
  const auto dir = scratch("unverified");
  io::write_file(dir / "params.json", R"({"beta": 0.35, "sigma": 0.25, "gamma": 0.2, "mu": 0.005, "rho": 0.01})");
  const std::string args = "simulate --graph " + f("graphs/seird_direct_recovery.json") + " --params " +
                           (dir / "params.json").string() + " --scenario " + f("scenarios/seird_baseline.json") + " --out " +
                           dir.string();
  const auto refused = run(args, dir);
  EXPECT_NE(refused.code, 0);
  EXPECT_NE(refused.output.find("R1"), std::string::npos);
  const auto forced = run(args + " --allow-unverified", dir);
  ASSERT_EQ(forced.code, 0) << forced.output;
  EXPECT_NE(forced.output.find("UNVERIFIED"), std::string::npos);
  const auto summary = nlohmann::json::parse(io::read_file(dir / "simulation_summary.json"));
  EXPECT_FALSE(summary[0].at("verified_graph").get<bool>());
}

TEST(Cli, ValidateSixScenarios) {
  const auto dir = scratch("validate");
  const auto r = run("validate --graph " + f("graphs/sveird.json") + " --params " + f("params/sveird_true.json") +
                         " --scenario " + f("scenarios/six_scenarios.json") + " --out " + dir.string(),
                     dir);
  EXPECT_EQ(r.code, 0) << r.output;
}

TEST(Cli, PipelineAcceptsAndRecordsTwoGraphAttempts) {
  const auto dir = scratch("pipeline");
  const auto out = dir / "out";
  const auto r = run(pipeline_args("pipeline.json", out), dir);
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(out / "transcript.jsonl");
  std::string line;
  int graph_attempts = 0;
  while (std::getline(in, line))
    if (nlohmann::json::parse(line).value("event", "") == "graph_attempt") ++graph_attempts;
  EXPECT_EQ(graph_attempts, 2);
  for (const char* name : {"graph.json", "theta.csv", "summary.csv", "orderings.csv", "run_report.json",
                           "metadata.json", "feedback.txt"})
    EXPECT_TRUE(fs::exists(out / name)) << name;
  const auto report = nlohmann::json::parse(io::read_file(out / "run_report.json"));
  EXPECT_EQ(report.at("outcome"), "accepted");
}

TEST(Cli, PipelineIsDeterministic) {
  const auto dir = scratch("determinism");
  ASSERT_EQ(run(pipeline_args("pipeline.json", dir / "a"), dir).code, 0);
  ASSERT_EQ(run(pipeline_args("pipeline.json", dir / "b"), dir).code, 0);
  auto a = tree(dir / "a"), b = tree(dir / "b");
  a.erase("metadata.json");
  b.erase("metadata.json");
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, content] : a) EXPECT_TRUE(b.count(name) && b.at(name) == content) << name;
}

TEST(Cli, AblationFailsValidation) {
  const auto dir = scratch("ablation");
  const auto r = run(pipeline_args("ablation.json", dir / "out", "--allow-unverified"), dir);
  EXPECT_EQ(r.code, 5) << r.output;
}

TEST(Cli, AlwaysInvalidPlannerExhaustsBudget) {
  const auto dir = scratch("exhaust");
  const auto r = run(pipeline_args("always_invalid.json", dir / "out"), dir);
  EXPECT_EQ(r.code, 4) << r.output;
}

TEST(Cli, LlmPlannerWithoutEndpointFails) {
  const auto dir = scratch("llm");
  const std::string args = "pipeline --scenario " + f("scenarios/six_scenarios.json") + " --data " +
                           f("data/six_scenarios.csv") + " --patches " + f("patches.csv") + " --planner llm --out " +
                           (dir / "out").string();
  const auto r = run(args, dir, "env -u EPIAGENT_LLM_ENDPOINT");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("EPIAGENT_LLM_ENDPOINT"), std::string::npos);
}

TEST(Cli, CalibrateThenProject) {
  const auto dir = scratch("calibrate");
  const auto spec = nlohmann::json::parse(read_fixture("planner/pipeline.json")).at("model_spec").at(2);
  io::write_file(dir / "spec.json", spec.dump());
  const std::string common = " --graph " + f("graphs/sveird.json") + " --params " + (dir / "spec.json").string() +
                             " --scenario " + f("scenarios/six_scenarios.json") + " --patches " + f("patches.csv") +
                             " --config " + f("config.json");
  const auto cal = run("calibrate" + common + " --data " + f("data/six_scenarios.csv") + " --out " +
                           (dir / "cal").string(),
                       dir);
  ASSERT_EQ(cal.code, 0) << cal.output;
  const auto names = std::vector<std::string>{"beta", "gamma", "mu", "sigma", "waning_r", "waning_v"};
  const auto theta = io::parse_theta_csv(io::read_file(dir / "cal" / "theta.csv"), names);
  const std::vector<double> truth = {0.35, 0.2, 0.005, 0.25, 0.008, 0.01};
  for (std::size_t j = 0; j < truth.size(); ++j) EXPECT_NEAR(theta[j] / truth[j], 1.0, 0.02) << names[j];
  EXPECT_TRUE(fs::exists(dir / "cal" / "loss_history.csv"));

  const auto proj = run("project" + common + " --theta " + (dir / "cal" / "theta.csv").string() +
                            " --seed 3 --jobs 2 --out " + (dir / "proj").string(),
                        dir);
  ASSERT_EQ(proj.code, 0) << proj.output;
  const auto rows = io::parse_csv(io::read_file(dir / "proj" / "bands_A.csv"));
  EXPECT_EQ(rows[0], (std::vector<std::string>{"week", "patch_id", "output", "median", "lower50", "upper50",
                                               "lower80", "upper80"}));
  EXPECT_EQ(rows.size(), 1u + 52u * 2u);
}
