// Acceptance checks, one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "decfl/harness.hpp"
#include "decfl/optimizers.hpp"
#include "support/oracles.hpp"
#include "support/reference_loops.hpp"

using namespace decfl;

namespace {

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, double limit_seconds, const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v{false, ""};
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char timing[96];
  if (limit_seconds > 0.0) {
    std::snprintf(timing, sizeof timing, "%.2f s, limit %.0f s", secs, limit_seconds);
    if (secs >= limit_seconds) {
      v.pass = false;
      v.detail += "; over the runtime limit";
    }
  } else {
    std::snprintf(timing, sizeof timing, "%.2f s", secs);
  }
  if (!v.pass) ++failures;
  std::printf("%s [%d] %s: %s (%s)\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str(),
              timing);
  std::fflush(stdout);
}

std::string num(double v, const char* f = "%.4g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Graph random_connected_graph(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nodes(2, 50), kind(0, 4);
  std::uniform_real_distribution<double> prob(0.05, 1.0);
  const int n = nodes(rng);
  static constexpr GraphKind kinds[] = {GraphKind::complete, GraphKind::ring, GraphKind::path,
                                        GraphKind::star, GraphKind::erdos_renyi};
  const GraphKind k = kinds[kind(rng)];
  if (k != GraphKind::erdos_renyi) return build_graph(k, n);
  return build_graph(k, n, std::min(1.0, std::max(prob(rng), 3.0 / n)), rng());
}

Verdict mixing_suite() {
  std::mt19937_64 rng(2024);
  int graphs = 0;
  double worst_row = 0.0, worst_gap = 0.0;
  for (; graphs < 150; ++graphs) {
    const Graph g = random_connected_graph(rng);
    const MixingMatrix w = metropolis_weights(g);
    const int n = g.node_count();
    for (int i = 0; i < n; ++i) {
      double row = 0.0;
      for (int j = 0; j < n; ++j) {
        if (w.weights(i, j) != w.weights(j, i))
          return {false, "asymmetric entry at N=" + std::to_string(n)};
        if (i != j && !g.has_edge(i, j) && w.weights(i, j) != 0.0)
          return {false, "weight off the graph at N=" + std::to_string(n)};
        row += w.weights(i, j);
      }
      worst_row = std::max(worst_row, std::abs(row - 1.0));
    }
    worst_gap = std::max(worst_gap, w.lambda2);
    if (worst_row > 1e-12 || !(w.lambda2 < 1.0))
      return {false, "row sum error " + num(worst_row) + ", lambda2 " + num(w.lambda2)};
  }
  const double path3 = metropolis_weights(build_graph(GraphKind::path, 3)).lambda2;
  const bool ok = std::abs(path3 - 2.0 / 3.0) <= 1e-9;
  return {ok, std::to_string(graphs) + " graphs, max |row sum - 1| = " + num(worst_row) +
                  ", max lambda2 = " + num(worst_gap, "%.6f") + ", path-3 lambda2 = " +
                  num(path3, "%.12f")};
}

Verdict contraction() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal;
  double worst_slack = -1.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Graph g = random_connected_graph(rng);
    const MixingMatrix w = metropolis_weights(g);
    const int n = g.node_count(), d = 3;
    std::vector<NodeState> states(n);
    std::vector<GradientSample> grads(n);
    for (int i = 0; i < n; ++i) {
      states[i].node = i;
      states[i].theta = Vector::NullaryExpr(d, [&] { return normal(rng); });
      grads[i] = {Vector::NullaryExpr(d, [&] { return normal(rng); }), 1, i};
    }
    std::vector<Vector> before, after;
    for (const auto& s : states) before.push_back(s.theta);
    for (const auto& s : dsgd_mix_step(states, grads, w, 0.0)) after.push_back(s.theta);
    const double ratio = consensus_violation(after) / consensus_violation(before);
    const double bound = w.lambda2 * w.lambda2 + 1e-9;
    worst_slack = std::max(worst_slack, ratio - bound);
    if (ratio > bound)
      return {false, "ratio " + num(ratio) + " > lambda2^2 " + num(bound) + " at N=" +
                         std::to_string(n)};
  }
  return {true, "50 graphs, max(ratio - lambda2^2) = " + num(worst_slack)};
}

Verdict tracker_conservation() {
  const auto p = ProblemInstance::logistic(generate_heterogeneous_data(10, 60, 4, 1.5, 31));
  const auto w = metropolis_weights(build_graph(GraphKind::ring, 10));
  RunConfig cfg;
  cfg.algorithm = Algorithm::dsgt;
  cfg.comm_period = 1;
  cfg.minibatch = 5;
  cfg.total_rounds = 1000;
  cfg.schedule = {StepSchedule::Kind::inverse_sqrt, 0.2};
  cfg.metric_every = 1000;
  cfg.seed = 8;
  double worst = 0.0;
  int rounds = 0;
  RunHooks hooks;
  hooks.on_round = [&](int, std::span<const NodeState> states) {
    Vector tracker = Vector::Zero(p.dimension()), stored = Vector::Zero(p.dimension());
    for (const auto& s : states) {
      tracker += s.tracker;
      stored += s.last_comm_gradient;
    }
    worst = std::max(worst, ((tracker - stored) / 10.0).cwiseAbs().maxCoeff());
    ++rounds;
  };
  run(cfg, p, w, hooks);
  return {worst <= 1e-10 && rounds == 1000,
          std::to_string(rounds) + " rounds, max |mean tracker - mean stored gradient| = " +
              num(worst)};
}

Verdict q_one_reduction() {
  const auto p = ProblemInstance::shallow_nn(generate_heterogeneous_data(5, 40, 5, 1.0, 4));
  const auto w = metropolis_weights(build_graph(GraphKind::erdos_renyi, 5, 0.6, 3));
  int compared = 0;
  for (Algorithm a : {Algorithm::dsgd, Algorithm::dsgt}) {
    RunConfig cfg;
    cfg.algorithm = a;
    cfg.comm_period = 1;
    cfg.minibatch = 8;
    cfg.total_rounds = 200;
    cfg.schedule = {StepSchedule::Kind::inverse_sqrt, 0.3};
    cfg.init_policy = InitPolicy::per_node;
    cfg.init_scale = 0.5;
    cfg.metric_every = 200;
    cfg.seed = 21;
    const auto reference = oracle::reference_trajectory(cfg, p, w);
    bool identical = true;
    RunHooks hooks;
    hooks.on_round = [&](int r, std::span<const NodeState> states) {
      for (int i = 0; i < 5; ++i) {
        identical = identical && states[i].theta == reference[r - 1][i];
        ++compared;
      }
    };
    run(cfg, p, w, hooks);
    if (!identical) return {false, std::string(to_string(a)) + " differs from the reference loop"};
  }
  return {compared == 2000, "DSGD and DSGT, 200 rounds x 5 nodes, bit-identical iterates (" +
                                std::to_string(compared) + " compared)"};
}

Verdict closed_form_minimizer() {
  const auto nodes = generate_quadratic_nodes(8, 5, 3.0, -0.5, 0.5, 19);
  const auto p = ProblemInstance::quadratic(nodes, 0.0);
  std::vector<Matrix> as;
  std::vector<Vector> bs;
  for (const auto& q : nodes) {
    as.push_back(q.a);
    bs.push_back(q.b);
  }
  const Vector target = oracle::quadratic_consensus_minimizer(as, bs);
  RunConfig cfg;
  cfg.algorithm = Algorithm::dsgt;
  cfg.total_rounds = 500;
  cfg.schedule = {StepSchedule::Kind::constant, 0.1};
  cfg.init_policy = InitPolicy::per_node;
  cfg.init_scale = 1.0;
  cfg.metric_every = 500;
  double worst = 0.0;
  RunHooks hooks;
  hooks.on_round = [&](int r, std::span<const NodeState> states) {
    if (r == 500)
      for (const auto& s : states) worst = std::max(worst, (s.theta - target).norm());
  };
  run(cfg, p, metropolis_weights(build_graph(GraphKind::complete, 8)), hooks);
  return {worst <= 1e-6, "max ||theta_i - x*|| = " + num(worst)};
}

Verdict gradient_correctness() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  const auto data = generate_heterogeneous_data(2, 30, 5, 1.0, 6);
  const ProblemInstance models[] = {
      ProblemInstance::quadratic(generate_quadratic_nodes(2, 6, 1.0, 0.0, 1.0, 7)),
      ProblemInstance::logistic(data), ProblemInstance::shallow_nn(data)};
  double worst = 0.0;
  int points = 0;
  for (const auto& p : models) {
    for (int k = 0; k < 20; ++k, ++points) {
      const Vector x = Vector::NullaryExpr(p.dimension(), [&] { return normal(rng); });
      const int node = k % 2;
      const Vector analytic = full_gradient(p, node, x);
      const Vector fd = oracle::finite_difference_gradient(
          [&](const Vector& y) { return loss_eval(p, node, y); }, x, 1e-5);
      worst = std::max(worst, oracle::relative_error(analytic, fd));
    }
  }
  return {worst <= 1e-5, "3 models x 20 points, max relative error " + num(worst)};
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("decfl_acceptance_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(dir);
  return dir;
}

Verdict linear_speedup() {
  const auto out = scratch("speedup");
  const std::string text =
      "[experiment]\nname = \"speedup\"\nseeds = [0, 1, 2, 3, 4]\noutput_dir = \"" +
      out.string() +
      "\"\ntotal_rounds = 10000\nmetric_every = 1\n"
      "[topology]\nkind = \"complete\"\n"
      "[problem]\nmodel = \"quadratic\"\n"
      "[problem.quadratic]\ndimension = 10\nsigma2 = 1.0\nheterogeneity = 1.0\ncenter = 1.0\n"
      "seed = 5\n"
      "[optimizer]\nschedule = { kind = \"theorem1\", c = 0.02 }\ninit_scale = 0.0\n"
      "[[runs]]\nname = \"DSGT\"\nalgorithm = \"dsgt\"\n"
      "[sweep]\nnodes = [2, 4, 8, 16]\n";
  const auto result = speedup_sweep(parse_experiment_spec(text));
  double at4 = 0.0, at16 = 0.0;
  std::string table;
  for (const auto& row : result.rows) {
    if (row.nodes == 4) at4 = row.metric_mean;
    if (row.nodes == 16) at16 = row.metric_mean;
    table += " N=" + std::to_string(row.nodes) + ":" + num(row.metric_mean);
  }
  const auto slope = result.slopes.at("DSGT");
  const bool ok = at16 < at4 && slope && *slope >= -1.5 && *slope <= -0.5;
  return {ok, "metric" + table + ", N=4/N=16 ratio " + num(at4 / at16) + ", slope " +
                  (slope ? num(*slope) : std::string("n/a"))};
}

Verdict communication_efficiency() {
  const auto data = generate_heterogeneous_data(20, 500, 5, 1.0, 11);
  const auto p = ProblemInstance::shallow_nn(data);
  if (p.dimension() != 42) return {false, "network has " + std::to_string(p.dimension()) +
                                              " parameters"};
  const auto w = metropolis_weights(build_graph(GraphKind::erdos_renyi, 20, 0.3, 7));
  const auto runs_for = [&](int q, int rounds, int every) {
    std::vector<TrajectoryLog> logs;
    for (std::uint64_t seed : {0, 1, 2}) {
      RunConfig cfg;
      cfg.algorithm = Algorithm::dsgt;
      cfg.comm_period = q;
      cfg.minibatch = 20;
      cfg.total_rounds = rounds;
      cfg.schedule = {StepSchedule::Kind::inverse_sqrt, 0.02};
      cfg.init_scale = 0.5;
      cfg.metric_every = every;
      cfg.seed = seed;
      logs.push_back(run(cfg, p, w));
    }
    return average_logs(logs);
  };
  const auto classic = runs_for(1, 2000, 2000);
  const double level = classic.final_record().global_loss;
  const auto fd = runs_for(100, 20000, 10);
  int needed = -1;
  for (const auto& r : fd.records)
    if (r.global_loss <= level) {
      needed = r.comm_rounds;
      break;
    }
  const bool ok = needed >= 0 && needed <= 200;
  return {ok, "DSGT loss at 2000 comms " + num(level, "%.6f") + "; FD-DSGT (Q=100) reaches it at " +
                  (needed >= 0 ? std::to_string(needed) : std::string("never")) +
                  " comms (limit 200)"};
}

Verdict heterogeneity_advantage() {
  const auto w = metropolis_weights(build_graph(GraphKind::ring, 10));
  int wins = 0;
  double gap_dsgd = 0.0, gap_dsgt = 0.0, viol_dsgd = 0.0, viol_dsgt = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = ProblemInstance::quadratic(generate_quadratic_nodes(10, 5, 4.0, 1.0, 3.0, seed));
    RunConfig cfg;
    cfg.total_rounds = 500;
    cfg.schedule = {StepSchedule::Kind::constant, 0.02};
    cfg.init_policy = InitPolicy::per_node;
    cfg.init_scale = 1.0;
    cfg.metric_every = 500;
    cfg.seed = seed;
    cfg.algorithm = Algorithm::dsgd;
    const auto a = run(cfg, p, w).final_record();
    cfg.algorithm = Algorithm::dsgt;
    const auto b = run(cfg, p, w).final_record();
    wins += b.stationarity_gap <= a.stationarity_gap;
    gap_dsgd += a.stationarity_gap / 5;
    gap_dsgt += b.stationarity_gap / 5;
    viol_dsgd += a.consensus_violation / 5;
    viol_dsgt += b.consensus_violation / 5;
  }
  return {wins == 5, "DSGT gap <= DSGD gap in " + std::to_string(wins) +
                         "/5 seeds; mean gap " + num(gap_dsgt) + " vs " + num(gap_dsgd) +
                         ", mean violation " + num(viol_dsgt) + " vs " + num(viol_dsgd)};
}

}  // namespace

int main() {
  criterion(1, "mixing-matrix suite", 10, mixing_suite);
  criterion(2, "contraction", 5, contraction);
  criterion(3, "gradient-tracking conservation", 10, tracker_conservation);
  criterion(4, "Q=1 reduction", 0, q_one_reduction);
  criterion(5, "oracle equivalence on quadratics", 0, closed_form_minimizer);
  criterion(6, "gradient correctness", 5, gradient_correctness);
  criterion(7, "linear speedup", 120, linear_speedup);
  criterion(8, "communication efficiency", 300, communication_efficiency);
  criterion(9, "heterogeneity advantage", 0, heterogeneity_advantage);
  std::printf("%d of 9 criteria failed\n", failures);
  std::filesystem::remove_all(std::filesystem::temp_directory_path() /
                              ("decfl_acceptance_" + std::to_string(::getpid())));
  return failures;
}
