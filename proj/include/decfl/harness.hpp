#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "decfl/metrics.hpp"
#include "decfl/optimizers.hpp"
#include "decfl/problems.hpp"
#include "decfl/topology.hpp"

namespace decfl {

std::string_view library_version();

/// Environment variable that, when set, roots every relative output_dir.
inline constexpr const char* kOutputRootEnv = "DECFL_OUTPUT_ROOT";

struct TopologySpec {
  GraphKind kind = GraphKind::complete;
  int nodes = 0;
  double edge_prob = 0.0;
  std::uint64_t seed = 0;
  /// Replaces `kind` when set; resolved against the spec file's directory.
  std::optional<std::filesystem::path> edge_list;
};

struct DataSpec {
  enum class Source { synthetic, csv };
  Source source = Source::synthetic;
  int samples_per_node = 500;
  int feature_dim = 5;
  double heterogeneity = 1.0;
  std::filesystem::path csv_path;
  std::string label_column = "label";
  bool standardize = true;
  double concentration = 0.5;
  std::uint64_t seed = 0;
};

struct QuadraticSpec {
  int dimension = 10;
  double sigma2 = 1.0;
  double heterogeneity = 1.0;
  double center = 0.0;
  double hessian_spread = 0.0;
  std::uint64_t seed = 0;
};

struct ProblemSpec {
  ModelKind model = ModelKind::quadratic;
  int hidden = 6;
  DataSpec data;
  QuadraticSpec quadratic;
};

struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "results";
  int total_rounds = 1000;
  int metric_every = 0;
  /// Concurrent (run, seed) cells.
  int jobs = 1;
  TopologySpec topology;
  ProblemSpec problem;
  /// Every entry carries the shared T and metric cadence; `seed` is filled
  /// per cell.
  std::vector<RunConfig> runs;
  std::vector<int> sweep_nodes;
  /// Verbatim spec text, hashed into the manifest.
  std::string source_text;
  std::filesystem::path source_dir;
};

/// Raises ValidationError prefixed with the offending key, e.g.
/// "runs[1].algorithm: unknown algorithm 'sgd'".
ExperimentSpec parse_experiment_spec(std::string_view toml_text,
                                     const std::filesystem::path& source_dir = {});
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Checks everything that can fail before a run starts: graph
/// connectivity, data files, minibatch sizes against node data.
void validate_experiment(const ExperimentSpec& spec);

/// Problems and graphs are seeded by their own tables, never by the run
/// seed, so every run in an experiment sees the same instance.
ProblemInstance build_problem(const ExperimentSpec& spec, int n_nodes);
Graph build_topology(const ExperimentSpec& spec, int n_nodes);

std::uint64_t fnv1a64(std::string_view bytes);
std::filesystem::path resolve_output_dir(const ExperimentSpec& spec);

struct CellResult {
  std::string run;
  std::uint64_t seed = 0;
  TrajectoryLog log;
  bool diverged = false;
  int diverged_at = 0;
  std::string error;
};

struct ExperimentResult {
  std::filesystem::path output_dir;
  std::vector<CellResult> cells;
  /// Seed-averaged log per run, for runs where no seed diverged.
  std::map<std::string, TrajectoryLog> averaged;
  std::vector<std::filesystem::path> outputs;
  bool diverged() const;
};

using ProgressFn = std::function<void(std::string_view message)>;

/// Runs every (run, seed) cell and writes per-seed and seed-averaged CSVs,
/// SVG plots, summary.json and manifest.json. Outputs are written even if a
/// cell diverges; check ExperimentResult::diverged().
ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress = {});

struct SweepRow {
  std::string run;
  int nodes = 0;
  double metric_mean = 0.0;
  double metric_std = 0.0;
  int seeds = 0;
};

struct SweepResult {
  std::filesystem::path output_dir;
  std::vector<SweepRow> rows;
  /// Least-squares slope of log(metric) against log(N), per run. Empty
  /// optional with fewer than two distinct N.
  std::map<std::string, std::optional<double>> slopes;
  /// Set when sigma2 = 0: the bound has no stochastic term to speed up.
  bool noise_free = false;
  /// Diverged cells are left out of the table and listed in the manifest.
  bool diverged = false;
  std::vector<std::filesystem::path> outputs;
};

/// Final running_average_metric per N in spec.sweep_nodes, averaged over
/// seeds. Quadratic problems only.
SweepResult speedup_sweep(const ExperimentSpec& spec, const ProgressFn& progress = {});

double log_log_slope(const std::vector<double>& xs, const std::vector<double>& ys);

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = true;
  std::vector<PlotSeries> series;
};

/// Static line chart. Non-positive values are dropped on log axes.
std::string render_svg(const PlotSpec& plot);
void write_svg(const std::filesystem::path& path, const PlotSpec& plot);

}  // namespace decfl
