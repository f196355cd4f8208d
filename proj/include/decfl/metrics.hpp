#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "decfl/problems.hpp"

namespace decfl {

/// Optimality quantities at one round, evaluated on the post-update iterates.
struct MetricRecord {
  int round = 0;
  int comm_rounds = 0;
  double alpha = 0.0;
  /// ||(1/N) sum_i grad f_i(theta_i)||^2 with full local gradients.
  double stationarity_gap = 0.0;
  /// (1/N) sum_i ||theta_i - mean||^2.
  double consensus_violation = 0.0;
  double global_loss = 0.0;
  /// Mean of (gap + violation) over every record up to and including this one.
  double running_average_metric = 0.0;
  double wall_time_ms = 0.0;
};

struct TrajectoryLog {
  std::vector<MetricRecord> records;
  int comm_rounds = 0;
  int rounds_completed = 0;

  bool empty() const { return records.empty(); }
  const MetricRecord& final_record() const { return records.back(); }
};

Vector mean_iterate(std::span<const Vector> thetas);
double stationarity_gap(const ProblemInstance& p, std::span<const Vector> thetas);
double consensus_violation(std::span<const Vector> thetas);

/// c * sigma2 / (N sqrt(T)) at each T in `rounds`. A visual envelope only.
std::vector<double> theorem1_reference_curve(double sigma2, int n_nodes,
                                             std::span<const int> rounds,
                                             double constant = 1.0);
/// Least-squares constant c for theorem1_reference_curve against `observed`.
double fit_reference_constant(std::span<const double> observed, double sigma2, int n_nodes,
                              std::span<const int> rounds);

class RunningAverage {
 public:
  void add(double x) {
    ++count_;
    mean_ += (x - mean_) / static_cast<double>(count_);
  }
  double value() const { return mean_; }
  long long count() const { return count_; }

 private:
  double mean_ = 0.0;
  long long count_ = 0;
};

/// Per-round arithmetic mean of several logs recorded on the same cadence.
TrajectoryLog average_logs(std::span<const TrajectoryLog> logs);

/// Columns: round,comm_rounds,alpha,stationarity_gap,consensus_violation,
/// global_loss,wall_time_ms.
std::string trajectory_csv(const TrajectoryLog& log);
void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryLog& log);
TrajectoryLog parse_trajectory_csv(std::string_view text);

}  // namespace decfl
