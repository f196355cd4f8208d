#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "decfl/metrics.hpp"
#include "decfl/problems.hpp"
#include "decfl/topology.hpp"

namespace decfl {

enum class Algorithm { dsgd, dsgt };
enum class InitPolicy { identical, per_node };
/// What DSGT descends along between communications. `gradient` takes plain
/// local steps with fresh stochastic gradients; `tracker` reuses the frozen
/// tracker direction instead.
enum class LocalDirection { gradient, tracker };

Algorithm parse_algorithm(std::string_view name);
InitPolicy parse_init_policy(std::string_view name);
LocalDirection parse_local_direction(std::string_view name);
std::string_view to_string(Algorithm a);
std::string_view to_string(InitPolicy p);
std::string_view to_string(LocalDirection d);

struct StepSchedule {
  enum class Kind { constant, inverse_sqrt, theorem1 };
  Kind kind = Kind::inverse_sqrt;
  double c = 0.02;
};

StepSchedule::Kind parse_schedule_kind(std::string_view name);
std::string_view to_string(StepSchedule::Kind k);

/// constant: c; inverse_sqrt: c / sqrt(r); theorem1: c sqrt(N) / sqrt(r).
double step_size(const StepSchedule& s, int round, int n_nodes);

struct NodeState {
  int node = 0;
  Vector theta;
  /// DSGT only; empty until initialized.
  Vector tracker;
  /// Gradient used by the most recent tracker update (DSGT only).
  Vector last_comm_gradient;

  bool has_tracker() const { return tracker.size() > 0 && last_comm_gradient.size() > 0; }
};

struct RunConfig {
  std::string name;
  Algorithm algorithm = Algorithm::dsgd;
  /// Q: mix every Q rounds; Q = 1 is classic DSGD / DSGT.
  int comm_period = 1;
  /// m.
  int minibatch = 1;
  StepSchedule schedule;
  /// T.
  int total_rounds = 1;
  InitPolicy init_policy = InitPolicy::identical;
  /// Standard deviation of the random initial iterate; 0 starts at the origin.
  double init_scale = 0.1;
  /// Overrides the random initial iterate for every node when set.
  std::optional<Vector> initial_theta;
  LocalDirection local_direction = LocalDirection::gradient;
  std::uint64_t seed = 0;
  /// Metric cadence in rounds; 0 picks every round for d <= 100, else 10.
  int metric_every = 0;
  /// Record wall-clock time in the log. Off by default so logs are
  /// reproducible byte for byte.
  bool record_wall_time = false;
  /// Worker threads for per-node work (requires OpenMP; results do not
  /// depend on this value).
  int threads = 1;
};

void validate(const RunConfig& cfg);
int effective_metric_every(const RunConfig& cfg, int dimension);

/// Raised when an iterate leaves [-1e8, 1e8] or a gradient is not finite.
/// Carries the metrics recorded before the failure.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int round, std::string what, TrajectoryLog partial)
      : std::runtime_error(std::move(what)), round_(round), partial_(std::move(partial)) {}
  int round() const { return round_; }
  const TrajectoryLog& partial_log() const { return partial_; }

 private:
  int round_;
  TrajectoryLog partial_;
};

inline constexpr double kDivergenceThreshold = 1e8;

/// theta <- theta - alpha * grad.
NodeState local_step(NodeState state, const GradientSample& grad, double alpha);

/// sum_j W_ij x_j for every i, summed in increasing j.
std::vector<Vector> mix(const MixingMatrix& w, std::span<const Vector> xs);

/// theta_i <- sum_j W_ij theta_j - alpha g_i, from the pre-update iterates.
std::vector<NodeState> dsgd_mix_step(std::span<const NodeState> states,
                                     std::span<const GradientSample> grads,
                                     const MixingMatrix& w, double alpha);

/// The iterate half of a DSGT step: sum_j W_ij theta_j - alpha tracker_i.
std::vector<Vector> dsgt_next_iterates(std::span<const NodeState> states,
                                       const MixingMatrix& w, double alpha);

/// Full DSGT step. `fresh_grads` must be evaluated at dsgt_next_iterates().
/// tracker_i <- sum_j W_ij tracker_j + fresh_i - last_comm_gradient_i.
std::vector<NodeState> dsgt_mix_step(std::span<const NodeState> states,
                                     std::span<const GradientSample> fresh_grads,
                                     const MixingMatrix& w, double alpha);

/// Initial iterates per cfg.init_policy and, for DSGT, trackers set to the
/// round-0 stochastic gradients.
std::vector<NodeState> initialize_states(const RunConfig& cfg, const ProblemInstance& p);

/// The minibatch gradient of `node` at the iterate it holds after `round`
/// rounds. Every algorithm draws from the same (seed, node, round) stream.
GradientSample draw_gradient(const RunConfig& cfg, const ProblemInstance& p, int node,
                             const Vector& theta, int round);

struct RunHooks {
  /// After every round, with the post-update states.
  std::function<void(int round, std::span<const NodeState> states)> on_round;
  std::function<void(const MetricRecord&)> on_record;
};

/// Local steps every round, a mixing step (replacing the local step) on
/// rounds divisible by Q.
TrajectoryLog run(const RunConfig& cfg, const ProblemInstance& p, const MixingMatrix& w,
                  const RunHooks& hooks = {});

}  // namespace decfl
