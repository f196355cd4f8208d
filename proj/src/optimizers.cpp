#include "decfl/optimizers.hpp"

#include <chrono>
#include <cmath>
#include <exception>

#ifdef DECFL_HAVE_OPENMP
#include <omp.h>
#endif

#include "decfl/errors.hpp"

namespace decfl {

namespace {

// Runs fn(i) for every node, optionally across threads. Each index is
// handled by exactly one thread, so results never depend on scheduling.
template <class Fn>
void for_each_node(int n, int threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
#ifdef DECFL_HAVE_OPENMP
#pragma omp parallel for num_threads(threads) schedule(static) if (threads > 1)
#endif
  for (int i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  (void)threads;
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void require_finite(const Vector& v, int node, const char* what) {
  if (!v.allFinite()) {
    throw NumericalError(std::string("non-finite ") + what + " at node " + std::to_string(node));
  }
}

std::vector<Vector> thetas_of(std::span<const NodeState> states) {
  std::vector<Vector> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.theta);
  return out;
}

void check_round_inputs(std::size_t states, std::size_t grads, const MixingMatrix& w) {
  if (states != grads) throw ValidationError("need exactly one gradient per node");
  if (static_cast<int>(states) != w.node_count()) {
    throw ValidationError("mixing matrix size does not match node count");
  }
}

}  // namespace

Algorithm parse_algorithm(std::string_view name) {
  if (name == "dsgd") return Algorithm::dsgd;
  if (name == "dsgt") return Algorithm::dsgt;
  throw ValidationError("unknown algorithm '" + std::string(name) + "' (expected dsgd|dsgt)");
}

InitPolicy parse_init_policy(std::string_view name) {
  if (name == "identical") return InitPolicy::identical;
  if (name == "per_node") return InitPolicy::per_node;
  throw ValidationError("unknown init policy '" + std::string(name) +
                        "' (expected identical|per_node)");
}

LocalDirection parse_local_direction(std::string_view name) {
  if (name == "gradient") return LocalDirection::gradient;
  if (name == "tracker") return LocalDirection::tracker;
  throw ValidationError("unknown local direction '" + std::string(name) +
                        "' (expected gradient|tracker)");
}

StepSchedule::Kind parse_schedule_kind(std::string_view name) {
  if (name == "constant") return StepSchedule::Kind::constant;
  if (name == "inverse_sqrt") return StepSchedule::Kind::inverse_sqrt;
  if (name == "theorem1") return StepSchedule::Kind::theorem1;
  throw ValidationError("unknown schedule '" + std::string(name) +
                        "' (expected constant|inverse_sqrt|theorem1)");
}

std::string_view to_string(Algorithm a) { return a == Algorithm::dsgd ? "dsgd" : "dsgt"; }
std::string_view to_string(InitPolicy p) {
  return p == InitPolicy::identical ? "identical" : "per_node";
}
std::string_view to_string(LocalDirection d) {
  return d == LocalDirection::gradient ? "gradient" : "tracker";
}
std::string_view to_string(StepSchedule::Kind k) {
  switch (k) {
    case StepSchedule::Kind::constant: return "constant";
    case StepSchedule::Kind::inverse_sqrt: return "inverse_sqrt";
    case StepSchedule::Kind::theorem1: return "theorem1";
  }
  return "?";
}

double step_size(const StepSchedule& s, int round, int n_nodes) {
  if (round < 1) throw ValidationError("step size requested for round " + std::to_string(round));
  if (!(s.c > 0.0) || !std::isfinite(s.c)) throw ValidationError("schedule constant must be > 0");
  const double r = static_cast<double>(round);
  switch (s.kind) {
    case StepSchedule::Kind::constant: return s.c;
    case StepSchedule::Kind::inverse_sqrt: return s.c / std::sqrt(r);
    case StepSchedule::Kind::theorem1:
      if (n_nodes < 1) throw ValidationError("theorem1 schedule needs n_nodes >= 1");
      return s.c * std::sqrt(static_cast<double>(n_nodes)) / std::sqrt(r);
  }
  return s.c;
}

void validate(const RunConfig& cfg) {
  const std::string where = cfg.name.empty() ? "run" : "run '" + cfg.name + "'";
  if (cfg.comm_period < 1) throw ValidationError(where + ": comm_period (Q) must be >= 1");
  if (cfg.minibatch < 1) throw ValidationError(where + ": minibatch (m) must be >= 1");
  if (cfg.total_rounds < 1) throw ValidationError(where + ": total_rounds (T) must be >= 1");
  if (!(cfg.schedule.c > 0.0) || !std::isfinite(cfg.schedule.c)) {
    throw ValidationError(where + ": schedule constant must be > 0");
  }
  if (!(cfg.init_scale >= 0.0)) throw ValidationError(where + ": init_scale must be >= 0");
  if (cfg.metric_every < 0) throw ValidationError(where + ": metric_every must be >= 0");
  if (cfg.threads < 1) throw ValidationError(where + ": threads must be >= 1");
}

int effective_metric_every(const RunConfig& cfg, int dimension) {
  if (cfg.metric_every > 0) return cfg.metric_every;
  return dimension <= 100 ? 1 : 10;
}

NodeState local_step(NodeState state, const GradientSample& grad, double alpha) {
  if (grad.value.size() != state.theta.size()) {
    throw ValidationError("gradient dimension does not match iterate");
  }
  require_finite(grad.value, state.node, "gradient");
  state.theta -= alpha * grad.value;
  return state;
}

std::vector<Vector> mix(const MixingMatrix& w, std::span<const Vector> xs) {
  const int n = w.node_count();
  if (static_cast<int>(xs.size()) != n) {
    throw ValidationError("mixing matrix size does not match node count");
  }
  std::vector<Vector> out(n);
  for (int i = 0; i < n; ++i) {
    Vector acc = Vector::Zero(xs[i].size());
    for (int j = 0; j < n; ++j) {
      const double wij = w.weights(i, j);
      if (wij != 0.0) acc += wij * xs[j];
    }
    out[i] = std::move(acc);
  }
  return out;
}

std::vector<NodeState> dsgd_mix_step(std::span<const NodeState> states,
                                     std::span<const GradientSample> grads,
                                     const MixingMatrix& w, double alpha) {
  check_round_inputs(states.size(), grads.size(), w);
  const auto mixed = mix(w, thetas_of(states));
  std::vector<NodeState> out(states.begin(), states.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (grads[i].value.size() != out[i].theta.size()) {
      throw ValidationError("gradient dimension does not match iterate");
    }
    require_finite(grads[i].value, out[i].node, "gradient");
    out[i].theta = mixed[i] - alpha * grads[i].value;
  }
  return out;
}

std::vector<Vector> dsgt_next_iterates(std::span<const NodeState> states,
                                       const MixingMatrix& w, double alpha) {
  for (const auto& s : states) {
    if (!s.has_tracker()) {
      throw ValidationError("tracker not initialized at node " + std::to_string(s.node));
    }
  }
  auto mixed = mix(w, thetas_of(states));
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] -= alpha * states[i].tracker;
  return mixed;
}

std::vector<NodeState> dsgt_mix_step(std::span<const NodeState> states,
                                     std::span<const GradientSample> fresh_grads,
                                     const MixingMatrix& w, double alpha) {
  check_round_inputs(states.size(), fresh_grads.size(), w);
  auto next = dsgt_next_iterates(states, w, alpha);
  std::vector<Vector> trackers;
  trackers.reserve(states.size());
  for (const auto& s : states) trackers.push_back(s.tracker);
  const auto mixed_trackers = mix(w, trackers);

  std::vector<NodeState> out(states.begin(), states.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vector& fresh = fresh_grads[i].value;
    if (fresh.size() != out[i].theta.size()) {
      throw ValidationError("gradient dimension does not match iterate");
    }
    require_finite(fresh, out[i].node, "gradient");
    out[i].theta = std::move(next[i]);
    out[i].tracker = mixed_trackers[i] + (fresh - out[i].last_comm_gradient);
    out[i].last_comm_gradient = fresh;
  }
  return out;
}

GradientSample draw_gradient(const RunConfig& cfg, const ProblemInstance& p, int node,
                             const Vector& theta, int round) {
  auto rng = make_stream(cfg.seed, StreamPurpose::minibatch, node, round);
  return stochastic_gradient(p, node, theta, cfg.minibatch, rng);
}

std::vector<NodeState> initialize_states(const RunConfig& cfg, const ProblemInstance& p) {
  const int n = p.node_count();
  const int d = p.dimension();
  std::vector<NodeState> states(n);
  std::normal_distribution<double> normal;
  for (int i = 0; i < n; ++i) {
    states[i].node = i;
    if (cfg.initial_theta) {
      if (cfg.initial_theta->size() != d) {
        throw ValidationError("initial_theta has dimension " +
                              std::to_string(cfg.initial_theta->size()) + ", expected " +
                              std::to_string(d));
      }
      states[i].theta = *cfg.initial_theta;
    } else {
      const int stream_node = cfg.init_policy == InitPolicy::identical ? 0 : i;
      auto rng = make_stream(cfg.seed, StreamPurpose::initialization, stream_node);
      states[i].theta.resize(d);
      for (int k = 0; k < d; ++k) states[i].theta(k) = cfg.init_scale * normal(rng);
    }
  }
  if (cfg.algorithm == Algorithm::dsgt) {
    for (auto& s : states) {
      GradientSample g = draw_gradient(cfg, p, s.node, s.theta, 0);
      s.tracker = g.value;
      s.last_comm_gradient = std::move(g.value);
    }
  }
  return states;
}

TrajectoryLog run(const RunConfig& cfg, const ProblemInstance& p, const MixingMatrix& w,
                  const RunHooks& hooks) {
  validate(cfg);
  const int n = p.node_count();
  if (w.node_count() != n) {
    throw ValidationError("mixing matrix has " + std::to_string(w.node_count()) +
                          " nodes, problem has " + std::to_string(n));
  }
  for (int i = 0; i < n; ++i) {
    const int available = p.sample_count(i);
    if (available > 0 && cfg.minibatch > available) {
      throw ValidationError("minibatch (m) " + std::to_string(cfg.minibatch) +
                            " exceeds node " + std::to_string(i) + "'s " +
                            std::to_string(available) + " samples");
    }
  }
  const int every = effective_metric_every(cfg, p.dimension());
  const bool tracking = cfg.algorithm == Algorithm::dsgt;
  const auto started = std::chrono::steady_clock::now();

  TrajectoryLog log;
  RunningAverage running;
  std::vector<NodeState> states = initialize_states(cfg, p);
  std::vector<GradientSample> grads(n);
  std::vector<Vector> thetas(n);
  std::vector<Vector> node_full_grads(n);
  std::vector<double> node_losses(n);

  const auto draw_all = [&](int round, std::span<const Vector> at) {
    for_each_node(n, cfg.threads,
                  [&](int i) { grads[i] = draw_gradient(cfg, p, i, at[i], round); });
  };

  for (int i = 0; i < n; ++i) thetas[i] = states[i].theta;
  draw_all(0, thetas);

  int round = 0;
  try {
    for (round = 1; round <= cfg.total_rounds; ++round) {
      const double alpha = step_size(cfg.schedule, round, n);
      if (round % cfg.comm_period == 0) {
        if (tracking) {
          const auto next = dsgt_next_iterates(states, w, alpha);
          draw_all(round, next);
          states = dsgt_mix_step(states, grads, w, alpha);
        } else {
          states = dsgd_mix_step(states, grads, w, alpha);
          for (int i = 0; i < n; ++i) thetas[i] = states[i].theta;
          draw_all(round, thetas);
        }
        ++log.comm_rounds;
      } else {
        for_each_node(n, cfg.threads, [&](int i) {
          if (tracking && cfg.local_direction == LocalDirection::tracker) {
            require_finite(states[i].tracker, i, "tracker");
            states[i].theta -= alpha * states[i].tracker;
          } else {
            states[i] = local_step(std::move(states[i]), grads[i], alpha);
          }
          grads[i] = draw_gradient(cfg, p, i, states[i].theta, round);
        });
      }

      for (int i = 0; i < n; ++i) {
        const Vector& t = states[i].theta;
        if (!t.allFinite() || t.cwiseAbs().maxCoeff() > kDivergenceThreshold) {
          throw NumericalError("iterate at node " + std::to_string(i) + " exceeded " +
                               std::to_string(kDivergenceThreshold));
        }
        thetas[i] = t;
      }
      log.rounds_completed = round;
      if (hooks.on_round) hooks.on_round(round, states);

      if (round % every == 0 || round == cfg.total_rounds) {
        for_each_node(n, cfg.threads, [&](int i) {
          node_full_grads[i] = full_gradient(p, i, thetas[i]);
          node_losses[i] = loss_eval(p, i, thetas[i]);
        });
        Vector avg = Vector::Zero(p.dimension());
        double loss = 0.0;
        for (int i = 0; i < n; ++i) {
          avg += node_full_grads[i];
          loss += node_losses[i];
        }
        avg /= static_cast<double>(n);

        MetricRecord rec;
        rec.round = round;
        rec.comm_rounds = log.comm_rounds;
        rec.alpha = alpha;
        rec.stationarity_gap = avg.squaredNorm();
        rec.consensus_violation = consensus_violation(thetas);
        rec.global_loss = loss / n;
        running.add(rec.stationarity_gap + rec.consensus_violation);
        rec.running_average_metric = running.value();
        if (cfg.record_wall_time) {
          rec.wall_time_ms = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - started)
                                 .count();
        }
        log.records.push_back(rec);
        if (hooks.on_record) hooks.on_record(rec);
      }
    }
  } catch (const NumericalError& e) {
    throw DivergenceError(round, "round " + std::to_string(round) + ": " + e.what(),
                          std::move(log));
  }
  return log;
}

}  // namespace decfl
