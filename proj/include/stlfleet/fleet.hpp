#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stlfleet/decomp.hpp"
#include "stlfleet/mpc.hpp"
#include "stlfleet/plant.hpp"
#include "stlfleet/stl.hpp"

namespace stlfleet::fleet {

struct AgentSpec {
  plant::AgentModel model;  // original coordinates
  Eigen::VectorXd x0;
};

struct TaskSpec {
  std::string name;
  int arrive_k = 0;
  std::string formula_text;
  stl::Formula formula;  // original coordinates, NNF
  double r_max = 0.5;
  int nu = 1;
  std::string target;  // "auction" or an agent id
  decomp::DecomposedTask decomposed;  // agent-level subformulas + risks
};

struct Scenario {
  int horizon = 25;
  uint64_t seed = 0;
  decomp::Orthotope workspace;
  stl::PredicateTable predicates;
  std::vector<AgentSpec> agents;
  std::vector<TaskSpec> tasks;
  mpc::MpcConfig config;
  int threads = 0;  // 0: hardware concurrency

  int agent_index(const std::string& id) const;
};

/// Load and validate a scenario file; every defect surfaces as
/// ScenarioInvalid.
Scenario load_scenario(const std::string& path);
Scenario parse_scenario_text(const std::string& json_text);

// -------------------------------------------------------------------- events

enum class EventKind {
  TaskArrived, Decomposed, Filtered, PairSolved, Auctioned, Accepted,
  Rejected, MeasurementOnly, KeptPrevious,
};

const char* event_name(EventKind k);

struct Event {
  int k = 0;
  EventKind kind;
  std::string task;
  std::string agent;
  int subspec = -1;
  double value = 0.0;
  std::string detail;
};

// ------------------------------------------------------------------ pairing

struct Pair {
  int agent = 0;    // agent index
  int subspec = 0;  // subspecification index
  double robustness = 0.0;
  double local_risk = 0.0;
  bool feasible = false;
};
using PairList = std::vector<Pair>;

/// Robustness-based pair filtering: with more agents than subspecs, keep per
/// subspec the nu agents whose prior nominal trajectories score the largest
/// robustness (ties by agent order); otherwise return all pairs unfiltered.
PairList filter_pairs(const std::vector<stl::Formula>& subspecs,
                      const std::vector<stl::Signal>& prior_nominals, int k);

struct Assignment {
  std::map<int, int> agent_of;  // subspec -> agent index
  double total_risk = 0.0;
};

/// Minimum-total-risk assignment over the feasible pairs (the binary program
/// of the allocation step); nullopt means the specification is rejected.
std::optional<Assignment> auction(const PairList& pairs, int nu, int num_agents);

// ------------------------------------------------------------------ run log

struct TaskOutcome {
  std::string task;
  int k = 0;
  bool accepted = false;
  double r_max = 0.5;
  int nu = 1;
  std::map<int, std::string> assignment;  // subspec -> agent id
  std::vector<double> local_risks;
  bool satisfied = false;               // evaluated on the realized run
  std::vector<bool> subspec_satisfied;  // per subspec
};

struct RunLog {
  uint64_t seed = 0;
  std::vector<std::string> agent_ids;
  std::vector<std::vector<Eigen::VectorXd>> x;  // [k][agent], k in 0..N
  std::vector<std::vector<Eigen::VectorXd>> u;  // [k][agent], k in 0..N-1
  std::vector<Event> events;
  std::vector<mpc::SolveRecord> solves;
  std::vector<TaskOutcome> tasks;
  bool clipped_inputs = false;

  const TaskOutcome* outcome(const std::string& task) const;
};

/// Execute the allocation-and-control loop over the whole horizon.
/// Deterministic given the scenario seed.
RunLog run_scenario(const Scenario& sc);
RunLog run_scenario_seeded(const Scenario& sc, uint64_t seed);

// ------------------------------------------------------------- verification

struct SubspecRate {
  int subspec = 0;
  long satisfied = 0;
  double rate = 0.0;
  double wilson_lo = 0.0;
  double claim = 0.0;  // 1 - r_max / nu
  bool pass = false;
};

struct SpecReport {
  std::string task;
  double r_max = 0.5;
  int nu = 1;
  long accepted_runs = 0;
  long satisfied_runs = 0;
  double rate = 0.0;
  double wilson_lo = 0.0;
  double claim = 0.0;  // 1 - r_max
  bool pass = false;
  std::vector<SubspecRate> subspecs;
};

struct VerifyReport {
  uint64_t seed = 0;
  long runs = 0;
  std::vector<SpecReport> specs;
  bool all_pass = true;
};

/// Re-run the scenario `runs` times under fresh sub-seeds and compare the
/// empirical satisfaction of every spec accepted in the reference run against
/// its risk budget (Wilson 95% lower bound).
VerifyReport verify_monte_carlo(const Scenario& sc, int runs);

double wilson_lower(long successes, long trials, double z = 1.959963984540054);

// ----------------------------------------------------------------- outputs

void write_trajectories_csv(const std::string& path, const RunLog& log);
void write_events_jsonl(const std::string& path, const RunLog& log);
void write_summary_json(const std::string& path, const RunLog& log,
                        const VerifyReport* verify = nullptr);
void write_plot_svg(const std::string& path, const Scenario& sc,
                    const RunLog& log);

}  // namespace stlfleet::fleet
