#include "decfl/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "decfl/errors.hpp"

namespace decfl {

namespace {

constexpr const char* kCsvHeader =
    "round,comm_rounds,alpha,stationarity_gap,consensus_violation,global_loss,wall_time_ms";

void append_number(std::string& out, double v) {
  char buf[32];
  const int len = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, len);
}

}  // namespace

Vector mean_iterate(std::span<const Vector> thetas) {
  if (thetas.empty()) throw ValidationError("mean of zero iterates");
  Vector mean = Vector::Zero(thetas.front().size());
  for (const auto& t : thetas) mean += t;
  return mean / static_cast<double>(thetas.size());
}

double stationarity_gap(const ProblemInstance& p, std::span<const Vector> thetas) {
  if (static_cast<int>(thetas.size()) != p.node_count()) {
    throw ValidationError("expected one iterate per node");
  }
  Vector avg = Vector::Zero(p.dimension());
  for (int i = 0; i < p.node_count(); ++i) avg += full_gradient(p, i, thetas[i]);
  avg /= static_cast<double>(p.node_count());
  return avg.squaredNorm();
}

double consensus_violation(std::span<const Vector> thetas) {
  const Vector mean = mean_iterate(thetas);
  double total = 0.0;
  for (const auto& t : thetas) total += (t - mean).squaredNorm();
  return total / static_cast<double>(thetas.size());
}

std::vector<double> theorem1_reference_curve(double sigma2, int n_nodes,
                                             std::span<const int> rounds, double constant) {
  if (sigma2 < 0.0) throw ValidationError("sigma2 must be >= 0");
  if (n_nodes < 1) throw ValidationError("n_nodes must be >= 1");
  std::vector<double> out;
  out.reserve(rounds.size());
  for (int t : rounds) {
    if (t < 1) throw ValidationError("rounds must be >= 1");
    out.push_back(constant * sigma2 / (n_nodes * std::sqrt(static_cast<double>(t))));
  }
  return out;
}

double fit_reference_constant(std::span<const double> observed, double sigma2, int n_nodes,
                              std::span<const int> rounds) {
  if (observed.size() != rounds.size()) throw ValidationError("length mismatch");
  const auto basis = theorem1_reference_curve(sigma2, n_nodes, rounds);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < basis.size(); ++k) {
    num += basis[k] * observed[k];
    den += basis[k] * basis[k];
  }
  return den > 0.0 ? num / den : 0.0;
}

TrajectoryLog average_logs(std::span<const TrajectoryLog> logs) {
  if (logs.empty()) throw ValidationError("no logs to average");
  TrajectoryLog out = logs.front();
  const double k = static_cast<double>(logs.size());
  for (std::size_t r = 0; r < out.records.size(); ++r) {
    MetricRecord sum{};
    for (const auto& log : logs) {
      if (log.records.size() != out.records.size() ||
          log.records[r].round != out.records[r].round) {
        throw ValidationError("logs are not on a common round cadence");
      }
      const auto& rec = log.records[r];
      sum.alpha += rec.alpha;
      sum.stationarity_gap += rec.stationarity_gap;
      sum.consensus_violation += rec.consensus_violation;
      sum.global_loss += rec.global_loss;
      sum.running_average_metric += rec.running_average_metric;
      sum.wall_time_ms += rec.wall_time_ms;
    }
    auto& dst = out.records[r];
    dst.alpha = sum.alpha / k;
    dst.stationarity_gap = sum.stationarity_gap / k;
    dst.consensus_violation = sum.consensus_violation / k;
    dst.global_loss = sum.global_loss / k;
    dst.running_average_metric = sum.running_average_metric / k;
    dst.wall_time_ms = sum.wall_time_ms / k;
  }
  return out;
}

std::string trajectory_csv(const TrajectoryLog& log) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : log.records) {
    out += std::to_string(r.round);
    out += ',';
    out += std::to_string(r.comm_rounds);
    for (double v : {r.alpha, r.stationarity_gap, r.consensus_violation, r.global_loss,
                     r.wall_time_ms}) {
      out += ',';
      append_number(out, v);
    }
    out += '\n';
  }
  return out;
}

void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << trajectory_csv(log);
  if (!out) throw IoError("write failed for " + path.string());
}

TrajectoryLog parse_trajectory_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw ValidationError("not a trajectory CSV (header mismatch)");
  }
  TrajectoryLog log;
  RunningAverage avg;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricRecord r;
    char comma = 0;
    std::istringstream row(line);
    row >> r.round >> comma >> r.comm_rounds >> comma >> r.alpha >> comma >> r.stationarity_gap >>
        comma >> r.consensus_violation >> comma >> r.global_loss >> comma >> r.wall_time_ms;
    if (!row) throw ValidationError("malformed trajectory row: " + line);
    avg.add(r.stationarity_gap + r.consensus_violation);
    r.running_average_metric = avg.value();
    log.records.push_back(r);
  }
  if (!log.records.empty()) {
    log.comm_rounds = log.records.back().comm_rounds;
    log.rounds_completed = log.records.back().round;
  }
  return log;
}

}  // namespace decfl
