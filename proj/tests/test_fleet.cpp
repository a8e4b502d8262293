#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include <json.hpp>

#include "stlfleet/errors.hpp"
#include "stlfleet/fleet.hpp"

using namespace stlfleet;
using namespace stlfleet::fleet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string two_agent_scenario(const std::string& tasks_json,
                               double noise = 0.001) {
  return R"({
    "horizon": 10,
    "seed": 42,
    "workspace": {"lower": [0, 0], "upper": [40, 30]},
    "config": {"eps": 1e-3, "segments": 8, "risk_curve": "pwl", "rho_cap": 20.0},
    "predicates": {
      "GOAL": {"box": {"lower": [18, 10], "upper": [22, 14]}},
      "FAR":  {"box": {"lower": [200, 200], "upper": [204, 204]}}
    },
    "agents": [
      {"id": "A", "A": [[1,0],[0,1]], "B": [[1,0],[0,1]], "K": [[-0.618,0],[0,-0.618]],
       "noise_cov": [[)" + format_double(noise) + R"(,0],[0,)" + format_double(noise) + R"(]],
       "input_box": {"lower": [-4,-4], "upper": [4,4]}, "x0": [10, 12]},
      {"id": "B", "A": [[1,0],[0,1]], "B": [[1,0],[0,1]], "K": [[-0.618,0],[0,-0.618]],
       "noise_cov": [[)" + format_double(noise) + R"(,0],[0,)" + format_double(noise) + R"(]],
       "input_box": {"lower": [-5,-5], "upper": [5,5]}, "x0": [36, 26]}
    ],
    "tasks": [)" + tasks_json + R"(]
  })";
}

stl::Signal hold_signal(double x, double y, int len) {
  VectorXd v(2);
  v << x, y;
  return stl::Signal::constant(0, len, v);
}

stl::Formula reach_box(double cx, double cy, double half, int a, int b) {
  VectorXd lo(2), hi(2);
  lo << cx - half, cy - half;
  hi << cx + half, cy + half;
  auto p = std::make_shared<stl::Predicate>(stl::Predicate::box(lo, hi));
  return stl::Formula::eventually(a, b, stl::Formula::pred(p));
}

}  // namespace

TEST_CASE("filter_pairs: with |I| == nu every pair survives") {
  std::vector<stl::Formula> subs = {reach_box(5, 5, 1, 0, 3),
                                    reach_box(9, 9, 1, 0, 3)};
  std::vector<stl::Signal> prior = {hold_signal(0, 0, 6), hold_signal(9, 9, 6)};
  PairList pairs = filter_pairs(subs, prior, 0);
  CHECK(pairs.size() == 4);  // 2 agents x 2 subspecs, unfiltered
}

TEST_CASE("filter_pairs: nearest agent wins a reach subspec") {
  std::vector<stl::Formula> subs = {reach_box(0, 0, 0.5, 0, 3)};
  std::vector<stl::Signal> prior = {hold_signal(1, 0, 6), hold_signal(2, 0, 6),
                                    hold_signal(3, 0, 6), hold_signal(4, 0, 6)};
  PairList pairs = filter_pairs(subs, prior, 0);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].agent == 0);  // distance 1 beats 2, 3, 4
  CHECK(pairs[0].robustness == doctest::Approx(-0.5));
}

TEST_CASE("filter_pairs: nu=2 over four agents keeps exactly four pairs") {
  std::vector<stl::Formula> subs = {reach_box(0, 0, 1, 0, 2),
                                    reach_box(10, 0, 1, 0, 2)};
  std::vector<stl::Signal> prior = {hold_signal(1, 0, 4), hold_signal(2, 0, 4),
                                    hold_signal(8, 0, 4), hold_signal(11, 0, 4)};
  PairList pairs = filter_pairs(subs, prior, 0);
  CHECK(pairs.size() == 4);
  // subspec 0 keeps the two leftmost agents, subspec 1 the two rightmost
  CHECK(pairs[0].subspec == 0);
  CHECK(pairs[0].agent == 0);
  CHECK(pairs[1].agent == 1);
  CHECK(pairs[2].subspec == 1);
  CHECK(pairs[2].agent == 2);
  CHECK(pairs[3].agent == 3);
}

TEST_CASE("filter_pairs: improving an agent's trajectory never drops it") {
  std::vector<stl::Formula> subs = {reach_box(0, 0, 0.5, 0, 3)};
  for (double d = 5.0; d >= 1.0; d -= 0.5) {
    std::vector<stl::Signal> prior = {hold_signal(d, 0, 6), hold_signal(3, 0, 6),
                                      hold_signal(4, 0, 6), hold_signal(6, 0, 6)};
    PairList pairs = filter_pairs(subs, prior, 0);
    REQUIRE(pairs.size() == 1);
    if (d < 3.0) CHECK(pairs[0].agent == 0);
  }
}

TEST_CASE("auction: examples from small instances") {
  PairList single{{0, 0, 0.0, 0.25, true}};
  auto a = auction(single, 1, 1);
  REQUIRE(a.has_value());
  CHECK(a->agent_of.at(0) == 0);
  CHECK(a->total_risk == doctest::Approx(0.25));

  // risks [[0.2,0.9],[0.3,0.1],[0.8,0.4]]: best total 0.2 + 0.1 = 0.3
  PairList pairs;
  const double risks[3][2] = {{0.2, 0.9}, {0.3, 0.1}, {0.8, 0.4}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      pairs.push_back({i, j, 0.0, risks[i][j], true});
  auto b = auction(pairs, 2, 3);
  REQUIRE(b.has_value());
  CHECK(b->agent_of.at(0) == 0);
  CHECK(b->agent_of.at(1) == 1);
  CHECK(b->total_risk == doctest::Approx(0.3));

  // a subspec with no feasible pair forces rejection
  PairList missing{{0, 0, 0.0, 0.2, true}, {1, 0, 0.0, 0.4, true}};
  CHECK(!auction(missing, 2, 2).has_value());
}

TEST_CASE("auction: equals exhaustive enumeration with random masks") {
  std::mt19937_64 gen(2025);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const int agents = 2 + static_cast<int>(gen() % 5);
    const int nu = 1 + static_cast<int>(gen() % 3);
    PairList pairs;
    std::vector<std::vector<double>> risk(agents, std::vector<double>(nu, 0));
    std::vector<std::vector<bool>> ok(agents, std::vector<bool>(nu, false));
    for (int i = 0; i < agents; ++i)
      for (int j = 0; j < nu; ++j) {
        risk[i][j] = unif(gen);
        ok[i][j] = unif(gen) < 0.7;
        if (ok[i][j]) pairs.push_back({i, j, 0.0, risk[i][j], true});
      }
    auto result = auction(pairs, nu, agents);
    // oracle
    double best = std::numeric_limits<double>::infinity();
    std::vector<bool> used(agents, false);
    std::function<void(int, double)> rec = [&](int j, double acc) {
      if (j == nu) {
        best = std::min(best, acc);
        return;
      }
      for (int i = 0; i < agents; ++i) {
        if (used[i] || !ok[i][j]) continue;
        used[i] = true;
        rec(j + 1, acc + risk[i][j]);
        used[i] = false;
      }
    };
    rec(0, 0.0);
    if (std::isfinite(best)) {
      REQUIRE(result.has_value());
      CHECK(result->total_risk == doctest::Approx(best).epsilon(1e-9));
    } else {
      CHECK(!result.has_value());
    }
  }
}

TEST_CASE("scenario parsing validates its inputs") {
  CHECK_THROWS_AS(parse_scenario_text("{"), Error);
  CHECK_THROWS_AS(parse_scenario_text("{\"horizon\": 0, \"agents\": []}"), Error);
  // unknown target agent
  std::string bad_target = two_agent_scenario(
      R"({"k": 1, "formula": "F[0,3] GOAL", "r_max": 0.5, "target": "Z"})");
  CHECK_THROWS_AS(parse_scenario_text(bad_target), Error);
  // horizon overflow
  std::string overflow = two_agent_scenario(
      R"({"k": 5, "formula": "F[0,9] GOAL", "r_max": 0.5})");
  CHECK_THROWS_AS(parse_scenario_text(overflow), Error);
  // bad risk
  std::string bad_risk = two_agent_scenario(
      R"({"k": 1, "formula": "F[0,3] GOAL", "r_max": 1.5})");
  CHECK_THROWS_AS(parse_scenario_text(bad_risk), Error);
  try {
    parse_scenario_text(bad_risk);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ScenarioInvalid);
  }

  // a valid one parses and decomposes at load
  std::string good = two_agent_scenario(
      R"({"k": 1, "formula": "F[0,3] GOAL", "r_max": 0.5, "nu": 1})");
  Scenario sc = parse_scenario_text(good);
  CHECK(sc.agents.size() == 2);
  CHECK(sc.tasks.size() == 1);
  CHECK(sc.tasks[0].decomposed.nu == 1);
  CHECK(sc.tasks[0].decomposed.sub_risks[0] == doctest::Approx(0.5));
}

TEST_CASE("run_scenario: no tasks, agents hold their terminals") {
  Scenario sc = parse_scenario_text(two_agent_scenario("", 1e-9));
  RunLog log = run_scenario(sc);
  REQUIRE(log.x.size() == 11);
  for (int i = 0; i < 2; ++i) {
    const VectorXd drift = log.x[10][i] - log.x[0][i];
    CHECK(drift.lpNorm<Eigen::Infinity>() <= 1e-3);
  }
  for (const auto& e : log.events) CHECK(e.kind != EventKind::Accepted);
  CHECK(log.tasks.empty());
}

TEST_CASE("run_scenario: auctioned task is accepted by the nearer agent") {
  Scenario sc = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,5] GOAL", "r_max": 0.5, "nu": 1})"));
  RunLog log = run_scenario(sc);
  REQUIRE(log.tasks.size() == 1);
  CHECK(log.tasks[0].accepted);
  CHECK(log.tasks[0].assignment.at(0) == "A");  // A starts closer to GOAL
  CHECK(log.tasks[0].satisfied);  // realized trajectory reaches the box
  // exactly one accepted event for the arrival
  int accepted = 0, rejected = 0;
  for (const auto& e : log.events) {
    accepted += e.kind == EventKind::Accepted;
    rejected += e.kind == EventKind::Rejected;
  }
  CHECK(accepted == 1);
  CHECK(rejected == 0);
}

TEST_CASE("run_scenario: unreachable task is rejected with no side effects") {
  Scenario with = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,3] FAR", "r_max": 0.5, "nu": 1})"));
  Scenario without = parse_scenario_text(two_agent_scenario(""));
  RunLog lw = run_scenario(with);
  RunLog lo = run_scenario(without);
  REQUIRE(lw.tasks.size() == 1);
  CHECK(!lw.tasks[0].accepted);
  int rejected = 0;
  for (const auto& e : lw.events) rejected += e.kind == EventKind::Rejected;
  CHECK(rejected == 1);
  // a rejected task leaves the run bit-identical to one without the task
  for (size_t k = 0; k < lw.x.size(); ++k)
    for (int i = 0; i < 2; ++i)
      CHECK((lw.x[k][i] - lo.x[k][i]).lpNorm<Eigen::Infinity>() == 0.0);
  for (size_t k = 0; k + 1 < lw.x.size(); ++k)
    for (int i = 0; i < 2; ++i)
      CHECK((lw.u[k][i] - lo.u[k][i]).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("run_scenario: targeted tasks accept or reject on their own agent") {
  Scenario sc = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,5] GOAL", "r_max": 0.5, "target": "B"},
         {"k": 2, "formula": "F[0,2] FAR", "r_max": 0.5, "target": "A"})"));
  RunLog log = run_scenario(sc);
  REQUIRE(log.tasks.size() == 2);
  CHECK(log.tasks[0].accepted);
  CHECK(log.tasks[0].assignment.at(0) == "B");
  CHECK(!log.tasks[1].accepted);
}

TEST_CASE("run_scenario: deterministic under the same seed") {
  Scenario sc = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,5] GOAL", "r_max": 0.5, "nu": 1})"));
  RunLog a = run_scenario_seeded(sc, 7);
  RunLog b = run_scenario_seeded(sc, 7);
  for (size_t k = 0; k < a.x.size(); ++k)
    for (int i = 0; i < 2; ++i)
      CHECK((a.x[k][i] - b.x[k][i]).lpNorm<Eigen::Infinity>() == 0.0);
  RunLog c = run_scenario_seeded(sc, 8);
  bool any_differs = false;
  for (size_t k = 0; k < a.x.size(); ++k)
    for (int i = 0; i < 2; ++i)
      any_differs = any_differs ||
                    (a.x[k][i] - c.x[k][i]).lpNorm<Eigen::Infinity>() > 0;
  CHECK(any_differs);
}

TEST_CASE("verify_monte_carlo: deterministic reports and sane rates") {
  Scenario sc = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,5] GOAL", "r_max": 0.5, "nu": 1})"));
  CHECK_THROWS_AS(verify_monte_carlo(sc, 10), Error);  // needs >= 100 runs
  VerifyReport r1 = verify_monte_carlo(sc, 100);
  VerifyReport r2 = verify_monte_carlo(sc, 100);
  REQUIRE(r1.specs.size() == 1);
  CHECK(r1.specs[0].accepted_runs == r2.specs[0].accepted_runs);
  CHECK(r1.specs[0].satisfied_runs == r2.specs[0].satisfied_runs);
  CHECK(r1.specs[0].rate == r2.specs[0].rate);
  // sigma = 0.001 leaves huge margins: everything should satisfy
  CHECK(r1.specs[0].accepted_runs == 100);
  CHECK(r1.specs[0].pass);
}

TEST_CASE("wilson_lower: reference values") {
  CHECK(wilson_lower(0, 0) == 0.0);
  CHECK(wilson_lower(100, 100) == doctest::Approx(0.9630065018).epsilon(1e-8));
  CHECK(wilson_lower(95, 100) == doctest::Approx(0.8882495308).epsilon(1e-8));
  CHECK(wilson_lower(500, 500) > 0.99);
}

TEST_CASE("outputs: csv, events and summary files are written and parse") {
  namespace fs = std::filesystem;
  Scenario sc = parse_scenario_text(two_agent_scenario(
      R"({"k": 1, "formula": "F[0,5] GOAL", "r_max": 0.5, "nu": 1})"));
  RunLog log = run_scenario(sc);
  const fs::path dir = fs::temp_directory_path() / "stlfleet_test_out";
  fs::create_directories(dir);
  write_trajectories_csv((dir / "trajectories.csv").string(), log);
  write_events_jsonl((dir / "events.jsonl").string(), log);
  write_summary_json((dir / "summary.json").string(), log);
  write_plot_svg((dir / "plot.svg").string(), sc, log);

  std::ifstream csv(dir / "trajectories.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "run,k,agent,x1,x2,u1,u2");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 2 * 11);  // two agents, k = 0..10

  std::ifstream ev(dir / "events.jsonl");
  int parsed = 0;
  for (std::string line; std::getline(ev, line);) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("type"));
    ++parsed;
  }
  CHECK(parsed > 5);

  std::ifstream sum(dir / "summary.json");
  auto j = nlohmann::json::parse(sum);
  CHECK(j.at("tasks").size() == 1);
  CHECK(j.at("tasks")[0].at("accepted").get<bool>());
  fs::remove_all(dir);
}
