#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "stlfleet/errors.hpp"
#include "stlfleet/fleet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stlfleet;

namespace {

int cmd_decompose(const std::string& scenario_path, int task_idx) {
  fleet::Scenario sc = fleet::load_scenario(scenario_path);
  if (task_idx < 0 || task_idx >= static_cast<int>(sc.tasks.size())) {
    std::cerr << "task index out of range (scenario has " << sc.tasks.size()
              << " tasks)\n";
    return 2;
  }
  const auto& task = sc.tasks[task_idx];
  std::cout << "task " << task.name << " (k=" << task.arrive_k
            << ", r_max=" << task.r_max << ", nu=" << task.decomposed.nu << ")\n";
  std::cout << "  formula: " << task.formula.to_string() << "\n";
  for (int j = 0; j < task.decomposed.nu; ++j) {
    std::cout << "  subspec " << j << " (r_max=" << task.decomposed.sub_risks[j]
              << "): " << task.decomposed.subformulas[j].to_string() << "\n";
  }
  return 0;
}

int cmd_simulate(const std::string& scenario_path, uint64_t seed, bool has_seed,
                 const std::string& out_dir, bool plot) {
  fleet::Scenario sc = fleet::load_scenario(scenario_path);
  fleet::RunLog log =
      has_seed ? fleet::run_scenario_seeded(sc, seed) : fleet::run_scenario(sc);
  for (const auto& t : log.tasks) {
    std::cout << "k=" << t.k << " " << t.task << ": "
              << (t.accepted ? "accepted" : "rejected");
    if (t.accepted) {
      std::cout << " (";
      for (const auto& [j, id] : t.assignment) std::cout << " s" << j << "->" << id;
      std::cout << " )";
    }
    std::cout << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    fleet::write_trajectories_csv((fs::path(out_dir) / "trajectories.csv").string(), log);
    fleet::write_events_jsonl((fs::path(out_dir) / "events.jsonl").string(), log);
    fleet::write_summary_json((fs::path(out_dir) / "summary.json").string(), log);
    if (plot)
      fleet::write_plot_svg((fs::path(out_dir) / "plot.svg").string(), sc, log);
    std::cout << "outputs written to " << out_dir << "\n";
  }
  return 0;
}

int cmd_verify(const std::string& scenario_path, int runs, const std::string& out_dir) {
  fleet::Scenario sc = fleet::load_scenario(scenario_path);
  fleet::VerifyReport report = fleet::verify_monte_carlo(sc, runs);
  for (const auto& s : report.specs) {
    std::cout << s.task << ": accepted " << s.accepted_runs << "/" << report.runs
              << ", satisfied " << s.satisfied_runs << " (rate " << s.rate
              << ", wilson_lo " << s.wilson_lo << ", claim >= " << s.claim << ") "
              << (s.pass ? "PASS" : "FAIL") << "\n";
    for (const auto& sub : s.subspecs)
      std::cout << "  subspec " << sub.subspec << ": rate " << sub.rate
                << ", wilson_lo " << sub.wilson_lo << ", claim >= " << sub.claim
                << " " << (sub.pass ? "PASS" : "FAIL") << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    fleet::RunLog log = fleet::run_scenario(sc);
    fleet::write_summary_json((fs::path(out_dir) / "summary.json").string(), log,
                              &report);
  }
  return report.all_pass ? 0 : 1;
}

int cmd_auction(const std::string& pairs_path) {
  std::ifstream in(pairs_path);
  if (!in) {
    std::cerr << "cannot open " << pairs_path << "\n";
    return 2;
  }
  json j = json::parse(in);
  fleet::PairList pairs;
  int max_agent = -1, max_sub = -1;
  for (const auto& p : j.at("pairs")) {
    fleet::Pair pr;
    pr.agent = p.at("agent").get<int>();
    pr.subspec = p.at("subspec").get<int>();
    pr.local_risk = p.at("risk").get<double>();
    pr.feasible = p.value("feasible", true);
    max_agent = std::max(max_agent, pr.agent);
    max_sub = std::max(max_sub, pr.subspec);
    pairs.push_back(pr);
  }
  const int nu = j.value("nu", max_sub + 1);
  const int agents = j.value("agents", max_agent + 1);
  auto assignment = fleet::auction(pairs, nu, agents);
  if (!assignment) {
    std::cout << "{\"status\": \"reject\"}\n";
    return 0;
  }
  json out{{"status", "assigned"}, {"total_risk", assignment->total_risk}};
  json map = json::object();
  for (const auto& [s, a] : assignment->agent_of) map[std::to_string(s)] = a;
  out["assignment"] = map;
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"STL task allocation and tube-MPC fleet simulator"};
  app.require_subcommand(1);

  std::string scenario_path, out_dir, pairs_path;
  int task_idx = 0;
  int runs = 500;
  uint64_t seed = 0;
  bool plot = false;

  auto* dec = app.add_subcommand("decompose", "print a task's agent-level subformulas");
  dec->add_option("scenario", scenario_path)->required();
  dec->add_option("--task", task_idx)->required();

  auto* sim = app.add_subcommand("simulate", "run the scenario once");
  sim->add_option("scenario", scenario_path)->required();
  auto* seed_opt = sim->add_option("--seed", seed, "override the scenario seed");
  sim->add_option("--out", out_dir, "output directory");
  sim->add_flag("--plot", plot, "also write plot.svg");

  auto* ver = app.add_subcommand("verify", "Monte Carlo probabilistic verification");
  ver->add_option("scenario", scenario_path)->required();
  ver->add_option("--runs", runs)->required();
  ver->add_option("--out", out_dir, "output directory");

  auto* auc = app.add_subcommand("auction", "solve a standalone assignment instance");
  auc->add_option("--pairs", pairs_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (dec->parsed()) return cmd_decompose(scenario_path, task_idx);
    if (sim->parsed())
      return cmd_simulate(scenario_path, seed, seed_opt->count() > 0, out_dir, plot);
    if (ver->parsed()) return cmd_verify(scenario_path, runs, out_dir);
    if (auc->parsed()) return cmd_auction(pairs_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::ScenarioInvalid ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
