#include "stlfleet/fleet.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "stlfleet/errors.hpp"
#include "stlfleet/rng.hpp"

namespace stlfleet::fleet {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

int Scenario::agent_index(const std::string& id) const {
  for (size_t i = 0; i < agents.size(); ++i)
    if (agents[i].model.id == id) return static_cast<int>(i);
  return -1;
}

const TaskOutcome* RunLog::outcome(const std::string& task) const {
  for (const auto& t : tasks)
    if (t.task == task) return &t;
  return nullptr;
}

const char* event_name(EventKind k) {
  switch (k) {
    case EventKind::TaskArrived: return "task_arrived";
    case EventKind::Decomposed: return "decomposed";
    case EventKind::Filtered: return "filtered";
    case EventKind::PairSolved: return "pair_solved";
    case EventKind::Auctioned: return "auctioned";
    case EventKind::Accepted: return "accepted";
    case EventKind::Rejected: return "rejected";
    case EventKind::MeasurementOnly: return "measurement_only";
    case EventKind::KeptPrevious: return "kept_previous";
  }
  return "?";
}

// ---------------------------------------------------------------- scenario

namespace {

VectorXd parse_vector(const json& j, const char* what) {
  if (!j.is_array()) fail(Errc::ScenarioInvalid, std::string(what) + ": expected array");
  VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

MatrixXd parse_matrix(const json& j, const char* what) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    fail(Errc::ScenarioInvalid, std::string(what) + ": expected array of arrays");
  MatrixXd m(j.size(), j[0].size());
  for (size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != j[0].size())
      fail(Errc::ScenarioInvalid, std::string(what) + ": ragged matrix");
    for (size_t c = 0; c < j[r].size(); ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

decomp::Orthotope parse_box(const json& j, const char* what) {
  decomp::Orthotope b;
  b.lower = parse_vector(j.at("lower"), what);
  b.upper = parse_vector(j.at("upper"), what);
  if (b.lower.size() != b.upper.size() || (b.upper - b.lower).minCoeff() < 0)
    fail(Errc::ScenarioInvalid, std::string(what) + ": bad box bounds");
  return b;
}

stl::PredicatePtr parse_predicate(const std::string& name, const json& j) {
  if (j.contains("G")) {
    return std::make_shared<stl::Predicate>(parse_matrix(j.at("G"), name.c_str()),
                                            parse_vector(j.at("b"), name.c_str()),
                                            name);
  }
  if (j.contains("box")) {
    decomp::Orthotope box = parse_box(j.at("box"), name.c_str());
    const int k = box.dim();
    int dim = j.value("dim", k);
    std::vector<int> coords;
    if (j.contains("coords"))
      for (const auto& c : j.at("coords")) coords.push_back(c.get<int>());
    else
      for (int i = 0; i < k; ++i) coords.push_back(i);
    return std::make_shared<stl::Predicate>(
        stl::Predicate::box_in_dims(dim, coords, box.lower, box.upper, name));
  }
  fail(Errc::ScenarioInvalid, "predicate " + name + ": need G/b or box");
}

Scenario parse_scenario_json(const json& j) {
  Scenario sc;
  sc.horizon = j.at("horizon").get<int>();
  if (sc.horizon < 1) fail(Errc::ScenarioInvalid, "horizon must be >= 1");
  sc.seed = j.value("seed", 0ULL);
  if (j.contains("workspace")) sc.workspace = parse_box(j.at("workspace"), "workspace");
  sc.threads = j.value("threads", 0);

  if (j.contains("config")) {
    const json& c = j.at("config");
    auto& cfg = sc.config;
    cfg.eps = c.value("eps", cfg.eps);
    cfg.big_m = c.value("big_m", cfg.big_m);
    cfg.rho_cap = c.value("rho_cap", cfg.rho_cap);
    cfg.segments = c.value("segments", cfg.segments);
    const std::string mode = c.value("risk_curve", std::string("pwl"));
    if (mode == "pwl")
      cfg.mode = mpc::RiskCurveMode::Pwl;
    else if (mode == "appendix_quadratic")
      cfg.mode = mpc::RiskCurveMode::AppendixQuadratic;
    else
      fail(Errc::ScenarioInvalid, "config.risk_curve must be pwl|appendix_quadratic");
    cfg.risk_lb = c.value("risk_lb", cfg.risk_lb);
    cfg.risk_ub = c.value("risk_ub", cfg.risk_ub);
    cfg.quad_a = c.value("quad_a", cfg.quad_a);
    cfg.quad_b = c.value("quad_b", cfg.quad_b);
    cfg.input_weight = c.value("input_weight", cfg.input_weight);
    cfg.node_limit = c.value("node_limit", cfg.node_limit);
  }
  sc.config.horizon = sc.horizon;
  sc.config.workspace = sc.workspace;

  if (j.contains("predicates"))
    for (auto it = j.at("predicates").begin(); it != j.at("predicates").end(); ++it)
      sc.predicates[it.key()] = parse_predicate(it.key(), it.value());

  if (!j.contains("agents") || j.at("agents").empty())
    fail(Errc::ScenarioInvalid, "scenario needs at least one agent");
  for (const json& a : j.at("agents")) {
    AgentSpec as;
    auto& m = as.model;
    m.id = a.at("id").get<std::string>();
    m.A = parse_matrix(a.at("A"), "A");
    m.B = parse_matrix(a.at("B"), "B");
    m.noise_cov = parse_matrix(a.at("noise_cov"), "noise_cov");
    m.noise_mean = a.contains("noise_mean")
                       ? parse_vector(a.at("noise_mean"), "noise_mean")
                       : VectorXd::Zero(m.A.rows());
    m.input_box = parse_box(a.at("input_box"), "input_box");
    m.K = a.contains("K") ? parse_matrix(a.at("K"), "K")
                          : plant::lqr_gain(m.A, m.B);
    m.sigma_inf = MatrixXd();
    as.x0 = parse_vector(a.at("x0"), "x0");
    if (as.x0.size() != m.A.rows())
      fail(Errc::ScenarioInvalid, "agent " + m.id + ": x0 dimension");
    m.validate();
    for (const auto& other : sc.agents)
      if (other.model.id == m.id)
        fail(Errc::ScenarioInvalid, "duplicate agent id " + m.id);
    sc.agents.push_back(std::move(as));
  }
  const int n = sc.agents[0].model.n();
  for (const auto& a : sc.agents)
    if (a.model.n() != n || a.model.m() != sc.agents[0].model.m())
      fail(Errc::ScenarioInvalid, "all agents must share state/input dimensions");
  if (sc.workspace.dim() != 0 && sc.workspace.dim() != n)
    fail(Errc::ScenarioInvalid, "workspace dimension must match the state");

  int last_k = -1;
  int task_no = 0;
  if (j.contains("tasks")) {
    for (const json& t : j.at("tasks")) {
      TaskSpec ts;
      ts.name = t.value("name", "task" + std::to_string(task_no));
      ++task_no;
      ts.arrive_k = t.at("k").get<int>();
      ts.formula_text = t.at("formula").get<std::string>();
      ts.r_max = t.at("r_max").get<double>();
      ts.nu = t.value("nu", 1);
      ts.target = t.value("target", std::string("auction"));
      if (ts.arrive_k < 0 || ts.arrive_k >= sc.horizon)
        fail(Errc::ScenarioInvalid, ts.name + ": arrival time outside [0, N)");
      if (ts.arrive_k < last_k)
        fail(Errc::ScenarioInvalid, "task arrival times must be non-decreasing");
      last_k = ts.arrive_k;
      if (!(ts.r_max > 0.0 && ts.r_max < 1.0))
        fail(Errc::ScenarioInvalid, ts.name + ": r_max must lie in (0,1)");
      const bool auctioned = ts.target == "auction";
      if (!auctioned && sc.agent_index(ts.target) < 0)
        fail(Errc::ScenarioInvalid, ts.name + ": unknown target agent " + ts.target);
      if (!auctioned && ts.nu != 1)
        fail(Errc::ScenarioInvalid, ts.name + ": targeted tasks must have nu = 1");
      if (ts.nu < 1 || ts.nu > static_cast<int>(sc.agents.size()))
        fail(Errc::ScenarioInvalid, ts.name + ": nu out of range");
      const int want_dim = auctioned ? ts.nu * n : n;
      ts.formula = stl::parse_formula(ts.formula_text, sc.predicates, want_dim);
      const stl::TimeSet h = stl::active_horizon(ts.formula, ts.arrive_k);
      if (!h.empty() && h.max() > sc.horizon)
        fail(Errc::ScenarioInvalid,
             ts.name + ": active horizon reaches " + std::to_string(h.max()) +
                 " beyond N=" + std::to_string(sc.horizon));
      ts.decomposed = decomp::decompose(ts.formula, auctioned ? ts.nu : 1, n);
      ts.decomposed.parent_id = ts.name;
      ts.decomposed.sub_risks = decomp::split_risk(ts.r_max, ts.decomposed.nu);
      sc.tasks.push_back(std::move(ts));
    }
  }
  return sc;
}

}  // namespace

Scenario parse_scenario_text(const std::string& text) {
  try {
    return parse_scenario_json(json::parse(text));
  } catch (const Error& e) {
    if (e.code() == Errc::ScenarioInvalid) throw;
    fail(Errc::ScenarioInvalid, e.what());
  } catch (const json::exception& e) {
    fail(Errc::ScenarioInvalid, std::string("JSON: ") + e.what());
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::ScenarioInvalid, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario_text(buf.str());
}

// ------------------------------------------------------------ filter/auction

PairList filter_pairs(const std::vector<stl::Formula>& subspecs,
                      const std::vector<stl::Signal>& prior_nominals, int k) {
  const int nu = static_cast<int>(subspecs.size());
  const int total = static_cast<int>(prior_nominals.size());
  PairList out;
  for (int j = 0; j < nu; ++j) {
    std::vector<std::pair<double, int>> scored;  // (robustness, agent)
    for (int i = 0; i < total; ++i)
      scored.emplace_back(stl::robustness(subspecs[j], prior_nominals[i], k), i);
    if (total > nu) {
      // keep the nu largest, ties by agent order
      std::stable_sort(scored.begin(), scored.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      scored.resize(nu);
      std::sort(scored.begin(), scored.end(),
                [](const auto& a, const auto& b) { return a.second < b.second; });
    }
    for (const auto& [rob, i] : scored) {
      Pair p;
      p.agent = i;
      p.subspec = j;
      p.robustness = rob;
      out.push_back(p);
    }
  }
  std::sort(out.begin(), out.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.subspec, a.agent) < std::tie(b.subspec, b.agent);
  });
  return out;
}

std::optional<Assignment> auction(const PairList& pairs, int nu, int num_agents) {
  std::vector<const Pair*> feasible;
  for (const auto& p : pairs)
    if (p.feasible) feasible.push_back(&p);
  for (int j = 0; j < nu; ++j) {
    bool any = false;
    for (const auto* p : feasible) any = any || p->subspec == j;
    if (!any) return std::nullopt;  // rejection: some subspec has no bidder
  }

  auto prog = optimizer::ConvexProgram::make(static_cast<int>(feasible.size()));
  for (size_t v = 0; v < feasible.size(); ++v) {
    prog.c(v) = feasible[v]->local_risk;
    prog.lb(v) = 0.0;
    prog.ub(v) = 1.0;
    prog.binaries.push_back(static_cast<int>(v));
  }
  prog.Aeq = MatrixXd::Zero(nu, prog.n);
  prog.beq = VectorXd::Ones(nu);
  for (size_t v = 0; v < feasible.size(); ++v)
    prog.Aeq(feasible[v]->subspec, v) = 1.0;
  prog.Ain = MatrixXd::Zero(num_agents, prog.n);
  prog.bin = VectorXd::Constant(num_agents, -1.0);
  for (size_t v = 0; v < feasible.size(); ++v)
    prog.Ain(feasible[v]->agent, v) = -1.0;  // each agent at most one subspec

  auto sol = optimizer::solve_micqp(prog);
  if (!sol.optimal()) return std::nullopt;

  Assignment out;
  out.total_risk = 0.0;
  for (size_t v = 0; v < feasible.size(); ++v) {
    const double lam = sol.x(v);
    if (std::abs(lam - std::round(lam)) > 1e-6)
      fail(Errc::NumericalFailure, "auction returned a fractional assignment");
    if (std::round(lam) == 1.0) {
      out.agent_of[feasible[v]->subspec] = feasible[v]->agent;
      out.total_risk += feasible[v]->local_risk;
    }
  }
  if (static_cast<int>(out.agent_of.size()) != nu)
    fail(Errc::NumericalFailure, "auction assignment incomplete");
  return out;
}

// ---------------------------------------------------------------- main loop

namespace {

struct AgentCtx {
  const AgentSpec* spec = nullptr;
  plant::AgentModel norm;
  mpc::AgentRuntime rt;
  plant::AgentState st;
  std::unique_ptr<plant::NoiseStream> noise;
  bool updated = false;
};

mpc::Plan hold_plan(const mpc::AgentRuntime& rt, int k, int N) {
  mpc::Plan p;
  p.solved_at = k;
  p.horizon_n = N;
  const int m = rt.model.m();
  p.v.assign(N - k, VectorXd::Zero(m));
  p.z.push_back(rt.x);
  for (int t = k; t < N; ++t) p.z.push_back(rt.model.A * p.z.back());
  p.rho = VectorXd::Zero(N + 1);
  p.r = VectorXd::Zero(N + 1);
  return p;
}

struct PairResult {
  bool ok = false;
  mpc::Plan plan;
  double risk = 0.0;
  mpc::AcceptedSpec candidate;
  std::vector<mpc::SolveRecord> records;
};

PairResult solve_pair(const AgentCtx& agent, const stl::Formula& subformula,
                      double sub_risk, const std::string& name, int k,
                      const mpc::MpcConfig& cfg) {
  PairResult out;
  out.candidate = mpc::make_accepted(
      plant::to_normalized_frame(subformula, agent.norm.T_inv), k, sub_risk, name,
      cfg.horizon);
  mpc::BuiltProblem bp =
      mpc::build_problem(agent.rt, agent.rt.accepted, &out.candidate, k, cfg);
  mpc::SolveRecord rec;
  rec.agent = agent.norm.id;
  rec.k = k;
  rec.stage = 1;
  rec.binaries = bp.total_binaries;
  rec.big_m = bp.big_m;
  if (bp.infeasible_at_build) {
    rec.status = optimizer::SolveStatus::Infeasible;
    out.records.push_back(rec);
    return out;
  }
  auto sol = optimizer::solve_micqp(bp.program,
                                    mpc::solver_options(bp, cfg, agent.rt.x));
  rec.status = sol.status;
  rec.nodes = sol.nodes;
  if (sol.optimal()) {
    out.plan = mpc::extract_plan(bp, agent.rt, agent.rt.accepted, &out.candidate, sol);
    out.risk = out.plan.local_risk;
    out.ok = true;
    rec.objective = sol.value;
    rec.local_risk = out.risk;
  }
  out.records.push_back(rec);
  return out;
}

}  // namespace

RunLog run_scenario_seeded(const Scenario& sc, uint64_t seed) {
  const int N = sc.horizon;
  const int num_agents = static_cast<int>(sc.agents.size());
  const mpc::MpcConfig& cfg = sc.config;

  RunLog log;
  log.seed = seed;
  log.x.assign(N + 1, std::vector<VectorXd>(num_agents));
  log.u.assign(N, std::vector<VectorXd>(num_agents));

  std::vector<AgentCtx> agents(num_agents);
  for (int i = 0; i < num_agents; ++i) {
    AgentCtx& a = agents[i];
    a.spec = &sc.agents[i];
    a.norm = plant::normalize(a.spec->model);
    a.rt.model = a.norm;
    a.rt.committed_rho = VectorXd::Zero(N + 1);
    a.rt.committed_r = VectorXd::Zero(N + 1);
    a.st.x = a.spec->x0;
    a.st.z = a.spec->x0;
    a.st.e = VectorXd::Zero(a.spec->x0.size());
    a.st.k = 0;
    a.noise = std::make_unique<plant::NoiseStream>(
        mix_seed(seed, static_cast<uint64_t>(i)), a.spec->model.noise_cov);
    log.agent_ids.push_back(a.spec->model.id);
  }

  // outcome slots in task order
  for (const auto& t : sc.tasks) {
    TaskOutcome o;
    o.task = t.name;
    o.k = t.arrive_k;
    o.r_max = t.r_max;
    o.nu = t.decomposed.nu;
    log.tasks.push_back(std::move(o));
  }

  for (int k = 0; k < N; ++k) {
    // measure
    for (auto& a : agents) {
      a.rt.x = a.norm.T * a.st.x;
      a.rt.history.push_back(a.rt.x);
      a.updated = false;
    }
    for (int i = 0; i < num_agents; ++i) log.x[k][i] = agents[i].st.x;

    // prior nominal trajectories (from the strategies computed at k-1;
    // constant-hold before the first solve)
    std::vector<stl::Signal> prior(num_agents);
    for (int i = 0; i < num_agents; ++i) {
      const auto& a = agents[i];
      prior[i] = a.rt.plan
                     ? a.rt.plan->nominal_signal(a.norm.T_inv)
                     : stl::Signal::constant(0, N + 1, a.spec->x0);
    }

    // task arrivals
    for (size_t ti = 0; ti < sc.tasks.size(); ++ti) {
      const TaskSpec& task = sc.tasks[ti];
      if (task.arrive_k != k) continue;
      TaskOutcome& outcome = log.tasks[ti];
      log.events.push_back({k, EventKind::TaskArrived, task.name, "", -1, 0.0,
                            task.formula_text});

      if (task.target != "auction") {
        const int i = sc.agent_index(task.target);
        AgentCtx& a = agents[i];
        auto candidate = mpc::make_accepted(
            plant::to_normalized_frame(task.formula, a.norm.T_inv), k, task.r_max,
            task.name, N);
        auto res = mpc::solve_step(a.rt, a.rt.accepted, &candidate, k, cfg,
                                   [&](const mpc::SolveRecord& r) {
                                     log.solves.push_back(r);
                                   });
        if (res.kind == mpc::StepKind::AcceptWithPlan) {
          a.rt.accepted.push_back(candidate);
          a.rt.plan = res.plan;
          a.updated = true;
          outcome.accepted = true;
          outcome.assignment[0] = a.norm.id;
          outcome.local_risks = {res.local_risk};
          log.events.push_back({k, EventKind::Accepted, task.name, a.norm.id, 0,
                                res.local_risk, "targeted"});
        } else {
          log.events.push_back({k, EventKind::Rejected, task.name, a.norm.id, -1,
                                0.0, "targeted"});
          // reuse the fallback this step instead of re-solving later
          if (res.kind == mpc::StepKind::MeasurementOnly) {
            a.rt.plan = res.plan;
            a.updated = true;
            log.events.push_back(
                {k, EventKind::MeasurementOnly, "", a.norm.id, -1, 0.0, ""});
          } else if (res.kind == mpc::StepKind::KeepPrevious) {
            if (!a.rt.plan) a.rt.plan = hold_plan(a.rt, k, N);
            a.updated = true;
            log.events.push_back(
                {k, EventKind::KeptPrevious, "", a.norm.id, -1, 0.0, ""});
          }
        }
        continue;
      }

      // auctioned task
      const auto& dec = task.decomposed;
      const int nu = dec.nu;
      log.events.push_back({k, EventKind::Decomposed, task.name, "", -1,
                            static_cast<double>(nu), ""});
      PairList pairs = filter_pairs(dec.subformulas, prior, k);
      {
        std::ostringstream os;
        for (const auto& p : pairs)
          os << "(" << log.agent_ids[p.agent] << ",s" << p.subspec << ","
             << std::setprecision(4) << p.robustness << ") ";
        log.events.push_back({k, EventKind::Filtered, task.name, "", -1,
                              static_cast<double>(pairs.size()), os.str()});
      }

      // per-pair tube MPC solves; deterministic collection order (j, i)
      std::vector<PairResult> results(pairs.size());
      {
        std::vector<std::future<PairResult>> futs;
        futs.reserve(pairs.size());
        for (const auto& p : pairs) {
          const AgentCtx& a = agents[p.agent];
          const stl::Formula& sf = dec.subformulas[p.subspec];
          const double rj = dec.sub_risks[p.subspec];
          std::string nm = task.name + "#s" + std::to_string(p.subspec);
          futs.push_back(std::async(std::launch::async, solve_pair, std::cref(a),
                                    std::cref(sf), rj, nm, k, std::cref(cfg)));
        }
        for (size_t pi = 0; pi < pairs.size(); ++pi) results[pi] = futs[pi].get();
      }
      for (size_t pi = 0; pi < pairs.size(); ++pi) {
        pairs[pi].feasible = results[pi].ok;
        pairs[pi].local_risk = results[pi].ok ? results[pi].risk : 0.0;
        for (const auto& r : results[pi].records) log.solves.push_back(r);
        log.events.push_back({k, EventKind::PairSolved, task.name,
                              log.agent_ids[pairs[pi].agent], pairs[pi].subspec,
                              pairs[pi].local_risk,
                              results[pi].ok ? "feasible" : "infeasible"});
      }

      auto assignment = auction(pairs, nu, num_agents);
      log.events.push_back({k, EventKind::Auctioned, task.name, "", -1,
                            assignment ? assignment->total_risk : 0.0,
                            assignment ? "assigned" : "reject"});
      if (assignment) {
        outcome.accepted = true;
        outcome.local_risks.assign(nu, 0.0);
        for (const auto& [j, i] : assignment->agent_of) {
          // adopt the winning pair's plan and commitment
          for (size_t pi = 0; pi < pairs.size(); ++pi) {
            if (pairs[pi].subspec == j && pairs[pi].agent == i) {
              AgentCtx& a = agents[i];
              a.rt.accepted.push_back(results[pi].candidate);
              a.rt.plan = results[pi].plan;
              a.updated = true;
              outcome.assignment[j] = a.norm.id;
              outcome.local_risks[j] = results[pi].risk;
              break;
            }
          }
        }
        std::ostringstream os;
        for (const auto& [j, id] : outcome.assignment) os << "s" << j << "->" << id << " ";
        log.events.push_back({k, EventKind::Accepted, task.name, "", -1,
                              assignment->total_risk, os.str()});
      } else {
        log.events.push_back({k, EventKind::Rejected, task.name, "", -1, 0.0,
                              "no feasible assignment"});
      }
    }

    // everyone not updated this step re-solves on measurement only
    for (auto& a : agents) {
      if (a.updated) continue;
      auto res = mpc::solve_step(a.rt, a.rt.accepted, nullptr, k, cfg,
                                 [&](const mpc::SolveRecord& r) {
                                   log.solves.push_back(r);
                                 });
      if (res.kind == mpc::StepKind::MeasurementOnly) {
        a.rt.plan = res.plan;
        log.events.push_back(
            {k, EventKind::MeasurementOnly, "", a.norm.id, -1, 0.0, ""});
      } else {
        if (!a.rt.plan) a.rt.plan = hold_plan(a.rt, k, N);
        log.events.push_back(
            {k, EventKind::KeptPrevious, "", a.norm.id, -1, 0.0, ""});
      }
    }

    // implement u(k) = v(k) + K e(k) and step the plants
    for (int i = 0; i < num_agents; ++i) {
      AgentCtx& a = agents[i];
      const mpc::Plan& plan = *a.rt.plan;
      const VectorXd v = plan.v_at(k);
      a.st.z = a.norm.T_inv * plan.z_at(k);
      a.st.e = a.st.x - a.st.z;
      auto res = plant::step(a.spec->model, a.st, v, *a.noise);
      log.u[k][i] = res.u;
      log.clipped_inputs = log.clipped_inputs || res.clipped;
      a.st = res.next;
      if (k + 1 <= N) {
        a.rt.committed_rho(k + 1) = plan.rho(k + 1);
        a.rt.committed_r(k + 1) = plan.r(k + 1);
      }
    }
  }
  for (int i = 0; i < num_agents; ++i) log.x[N][i] = agents[i].st.x;

  // evaluate realized satisfaction of the decomposed conjunctions
  for (size_t ti = 0; ti < sc.tasks.size(); ++ti) {
    const TaskSpec& task = sc.tasks[ti];
    TaskOutcome& outcome = log.tasks[ti];
    if (!outcome.accepted) continue;
    outcome.subspec_satisfied.assign(task.decomposed.nu, false);
    outcome.satisfied = true;
    for (const auto& [j, id] : outcome.assignment) {
      const int i = sc.agent_index(id);
      stl::Signal traj;
      traj.start = 0;
      for (int t = 0; t <= N; ++t) traj.values.push_back(log.x[t][i]);
      const bool ok =
          stl::satisfies(task.decomposed.subformulas[j], traj, task.arrive_k);
      outcome.subspec_satisfied[j] = ok;
      outcome.satisfied = outcome.satisfied && ok;
    }
  }
  return log;
}

RunLog run_scenario(const Scenario& sc) { return run_scenario_seeded(sc, sc.seed); }

// ------------------------------------------------------------- verification

double wilson_lower(long successes, long trials, double z) {
  if (trials <= 0) return 0.0;
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = p + z2 / (2.0 * n);
  const double spread = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
  return (center - spread) / denom;
}

VerifyReport verify_monte_carlo(const Scenario& sc, int runs) {
  if (runs < 100) fail(Errc::InvalidRange, "verification needs at least 100 runs");

  const RunLog reference = run_scenario(sc);

  struct Counts {
    long accepted = 0;
    long satisfied = 0;
    std::vector<long> sub_sat;
  };
  std::vector<int> tracked;  // indices of tasks accepted in the reference run
  for (size_t ti = 0; ti < reference.tasks.size(); ++ti)
    if (reference.tasks[ti].accepted) tracked.push_back(static_cast<int>(ti));

  std::vector<std::vector<Counts>> per_run(runs);
  const int threads = sc.threads > 0
                          ? sc.threads
                          : std::max(1u, std::thread::hardware_concurrency());
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int idx = next.fetch_add(1); idx < runs; idx = next.fetch_add(1)) {
      RunLog lg = run_scenario_seeded(sc, mix_seed(sc.seed, idx + 1));
      std::vector<Counts> counts(tracked.size());
      for (size_t t = 0; t < tracked.size(); ++t) {
        const TaskOutcome& o = lg.tasks[tracked[t]];
        counts[t].sub_sat.assign(o.nu, 0);
        if (!o.accepted) continue;
        counts[t].accepted = 1;
        counts[t].satisfied = o.satisfied ? 1 : 0;
        for (int j = 0; j < o.nu; ++j)
          counts[t].sub_sat[j] = (j < static_cast<int>(o.subspec_satisfied.size()) &&
                                  o.subspec_satisfied[j])
                                     ? 1
                                     : 0;
      }
      per_run[idx] = std::move(counts);
    }
  };
  {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  VerifyReport report;
  report.seed = sc.seed;
  report.runs = runs;
  for (size_t t = 0; t < tracked.size(); ++t) {
    const TaskOutcome& ref = reference.tasks[tracked[t]];
    SpecReport sr;
    sr.task = ref.task;
    sr.r_max = ref.r_max;
    sr.nu = ref.nu;
    sr.claim = 1.0 - ref.r_max;
    std::vector<long> sub(ref.nu, 0);
    for (int idx = 0; idx < runs; ++idx) {
      const Counts& c = per_run[idx][t];
      sr.accepted_runs += c.accepted;
      sr.satisfied_runs += c.satisfied;
      for (int j = 0; j < ref.nu; ++j) sub[j] += c.sub_sat[j];
    }
    sr.rate = sr.accepted_runs > 0
                  ? static_cast<double>(sr.satisfied_runs) / sr.accepted_runs
                  : 0.0;
    sr.wilson_lo = wilson_lower(sr.satisfied_runs, sr.accepted_runs);
    sr.pass = sr.accepted_runs > 0 && sr.wilson_lo >= sr.claim;
    for (int j = 0; j < ref.nu; ++j) {
      SubspecRate sub_rate;
      sub_rate.subspec = j;
      sub_rate.satisfied = sub[j];
      sub_rate.rate = sr.accepted_runs > 0
                          ? static_cast<double>(sub[j]) / sr.accepted_runs
                          : 0.0;
      sub_rate.wilson_lo = wilson_lower(sub[j], sr.accepted_runs);
      sub_rate.claim = 1.0 - ref.r_max / ref.nu;
      sub_rate.pass = sr.accepted_runs > 0 && sub_rate.wilson_lo >= sub_rate.claim;
      sr.subspecs.push_back(sub_rate);
      sr.pass = sr.pass && sub_rate.pass;
    }
    report.all_pass = report.all_pass && sr.pass;
    report.specs.push_back(std::move(sr));
  }
  return report;
}

// ----------------------------------------------------------------- outputs

void write_trajectories_csv(const std::string& path, const RunLog& log) {
  std::ofstream out(path);
  if (!out) fail(Errc::ScenarioInvalid, "cannot write " + path);
  const int N = static_cast<int>(log.x.size()) - 1;
  const int num_agents = static_cast<int>(log.agent_ids.size());
  const int n = num_agents > 0 ? static_cast<int>(log.x[0][0].size()) : 0;
  const int m = (N > 0 && num_agents > 0) ? static_cast<int>(log.u[0][0].size()) : 0;
  out << "run,k,agent";
  for (int c = 0; c < n; ++c) out << ",x" << (c + 1);
  for (int c = 0; c < m; ++c) out << ",u" << (c + 1);
  out << "\n";
  out << std::setprecision(17);
  for (int k = 0; k <= N; ++k)
    for (int i = 0; i < num_agents; ++i) {
      out << 0 << "," << k << "," << log.agent_ids[i];
      for (int c = 0; c < n; ++c) out << "," << log.x[k][i](c);
      for (int c = 0; c < m; ++c) {
        if (k < N)
          out << "," << log.u[k][i](c);
        else
          out << ",";
      }
      out << "\n";
    }
}

void write_events_jsonl(const std::string& path, const RunLog& log) {
  std::ofstream out(path);
  if (!out) fail(Errc::ScenarioInvalid, "cannot write " + path);
  for (const auto& e : log.events) {
    json j{{"type", "event"},
           {"k", e.k},
           {"kind", event_name(e.kind)},
           {"task", e.task},
           {"agent", e.agent},
           {"subspec", e.subspec},
           {"value", e.value},
           {"detail", e.detail}};
    out << j.dump() << "\n";
  }
  for (const auto& s : log.solves) {
    json j{{"type", "solve"},
           {"k", s.k},
           {"agent", s.agent},
           {"stage", s.stage},
           {"status", optimizer::status_name(s.status)},
           {"objective", s.objective},
           {"local_risk", s.local_risk},
           {"binaries", s.binaries},
           {"nodes", s.nodes},
           {"big_m", s.big_m}};
    out << j.dump() << "\n";
  }
}

namespace {

json report_to_json(const VerifyReport& v) {
  json specs = json::array();
  for (const auto& s : v.specs) {
    json subs = json::array();
    for (const auto& sub : s.subspecs)
      subs.push_back({{"subspec", sub.subspec},
                      {"satisfied", sub.satisfied},
                      {"rate", sub.rate},
                      {"wilson_lo", sub.wilson_lo},
                      {"claim", sub.claim},
                      {"pass", sub.pass}});
    specs.push_back({{"task", s.task},
                     {"r_max", s.r_max},
                     {"nu", s.nu},
                     {"accepted_runs", s.accepted_runs},
                     {"satisfied_runs", s.satisfied_runs},
                     {"rate", s.rate},
                     {"wilson_lo", s.wilson_lo},
                     {"claim", s.claim},
                     {"pass", s.pass},
                     {"subspecs", subs}});
  }
  return json{{"runs", v.runs}, {"seed", v.seed}, {"all_pass", v.all_pass},
              {"specs", specs}};
}

}  // namespace

void write_summary_json(const std::string& path, const RunLog& log,
                        const VerifyReport* verify) {
  std::ofstream out(path);
  if (!out) fail(Errc::ScenarioInvalid, "cannot write " + path);
  json tasks = json::array();
  for (const auto& t : log.tasks) {
    json assignment = json::object();
    for (const auto& [j, id] : t.assignment) assignment[std::to_string(j)] = id;
    tasks.push_back({{"task", t.task},
                     {"k", t.k},
                     {"accepted", t.accepted},
                     {"r_max", t.r_max},
                     {"nu", t.nu},
                     {"assignment", assignment},
                     {"local_risks", t.local_risks},
                     {"satisfied", t.satisfied},
                     {"subspec_satisfied", t.subspec_satisfied}});
  }
  json j{{"seed", log.seed},
         {"agents", log.agent_ids},
         {"clipped_inputs", log.clipped_inputs},
         {"tasks", tasks}};
  if (verify) j["verify"] = report_to_json(*verify);
  out << j.dump(2) << "\n";
}

void write_plot_svg(const std::string& path, const Scenario& sc,
                    const RunLog& log) {
  if (sc.workspace.dim() != 2) return;  // plotting is 2-D only
  std::ofstream out(path);
  if (!out) fail(Errc::ScenarioInvalid, "cannot write " + path);
  const double x0 = sc.workspace.lower(0), x1 = sc.workspace.upper(0);
  const double y0 = sc.workspace.lower(1), y1 = sc.workspace.upper(1);
  const double scale = 900.0 / std::max(x1 - x0, 1e-9);
  const double W = (x1 - x0) * scale, H = (y1 - y0) * scale;
  auto X = [&](double x) { return (x - x0) * scale; };
  auto Y = [&](double y) { return H - (y - y0) * scale; };

  out << "<svg xmlns='http://www.w3.org/2000/svg' viewBox='" << -40 << " " << -40
      << " " << W + 80 << " " << H + 80 << "'>\n";
  out << "<rect x='0' y='0' width='" << W << "' height='" << H
      << "' fill='white' stroke='black'/>\n";

  // draw every plottable (2-D, bounded) named predicate as its bounding box
  for (const auto& [name, pred] : sc.predicates) {
    if (pred->dim() != 2) continue;
    try {
      auto box = decomp::bounding_orthotope(decomp::Polytope::from_predicate(*pred));
      const bool obstacle = name.rfind("B", 0) == 0;
      out << "<rect x='" << X(box.lower(0)) << "' y='" << Y(box.upper(1))
          << "' width='" << (box.upper(0) - box.lower(0)) * scale << "' height='"
          << (box.upper(1) - box.lower(1)) * scale << "' fill='"
          << (obstacle ? "#cccccc" : "#dff0ff") << "' stroke='#555'/>\n";
      out << "<text x='" << X(box.lower(0)) + 3 << "' y='" << Y(box.upper(1)) + 13
          << "' font-size='11'>" << name << "</text>\n";
    } catch (const Error&) {
      continue;  // unbounded predicates are not drawn
    }
  }

  const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b"};
  for (size_t i = 0; i < log.agent_ids.size(); ++i) {
    out << "<polyline fill='none' stroke='" << colors[i % 6]
        << "' stroke-width='2' points='";
    for (const auto& step : log.x) out << X(step[i](0)) << "," << Y(step[i](1)) << " ";
    out << "'/>\n";
    const auto& start = log.x[0][i];
    out << "<circle cx='" << X(start(0)) << "' cy='" << Y(start(1))
        << "' r='4' fill='" << colors[i % 6] << "'/>\n";
    out << "<text x='" << X(start(0)) + 6 << "' y='" << Y(start(1)) - 6
        << "' font-size='12'>" << log.agent_ids[i] << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace stlfleet::fleet
