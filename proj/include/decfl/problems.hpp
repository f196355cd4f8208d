#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "decfl/rng.hpp"

namespace decfl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Row-per-sample features with one label per row.
struct SampleSet {
  Matrix features;
  Vector labels;

  int size() const { return static_cast<int>(features.rows()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
};

enum class ModelKind { quadratic, logistic, shallow_nn };

ModelKind parse_model_kind(std::string_view name);
std::string_view to_string(ModelKind kind);

/// f_i(theta) = 1/2 ||A_i theta - b_i||^2.
struct QuadraticNode {
  Matrix a;
  Vector b;
};

/// inputs -> hidden (tanh, with biases) -> 1 sigmoid output without bias.
/// The default 5 -> 6 -> 1 shape has 5*6 + 6 + 6 = 42 parameters.
struct ShallowNetShape {
  int inputs = 5;
  int hidden = 6;
  int parameter_count() const { return inputs * hidden + 2 * hidden; }
};

/// A stochastic gradient estimate: the mean of m per-sample gradients.
struct GradientSample {
  Vector value;
  int minibatch_size = 1;
  int node = 0;
};

/// Loss model plus per-node data. Immutable once built; safe to share
/// across threads.
class ProblemInstance {
 public:
  /// sigma2 is the total variance of the additive Gaussian gradient noise,
  /// split evenly across the d coordinates.
  static ProblemInstance quadratic(std::vector<QuadraticNode> nodes, double sigma2 = 0.0);
  static ProblemInstance logistic(std::vector<SampleSet> node_data);
  static ProblemInstance shallow_nn(std::vector<SampleSet> node_data, ShallowNetShape shape = {});

  ModelKind model() const { return model_; }
  int dimension() const { return dimension_; }
  int node_count() const { return node_count_; }
  /// Number of samples at a node; quadratic nodes have no samples and
  /// report 0 (any m >= 1 is accepted there).
  int sample_count(int node) const;

  /// Lipschitz constant of the gradients. Exact for quadratics (largest
  /// Hessian eigenvalue over nodes), the 1/4 lambda_max(X^T X / n) bound for
  /// logistic, and a sampled gradient-difference estimate for the network.
  double smoothness() const { return smoothness_; }
  /// Gradient noise variance, defined exactly only for quadratics.
  std::optional<double> noise_variance() const { return noise_variance_; }

  const SampleSet& node_data(int node) const { return data_.at(node); }
  const QuadraticNode& quadratic_node(int node) const { return quadratics_.at(node); }
  const ShallowNetShape& net_shape() const { return shape_; }

 private:
  ProblemInstance() = default;
  void check_node(int node) const;

  friend Vector full_gradient(const ProblemInstance&, int, const Vector&);
  friend GradientSample stochastic_gradient(const ProblemInstance&, int, const Vector&, int,
                                            RngEngine&);
  friend double loss_eval(const ProblemInstance&, int, const Vector&);

  ModelKind model_ = ModelKind::quadratic;
  int dimension_ = 0;
  int node_count_ = 0;
  double smoothness_ = 0.0;
  std::optional<double> noise_variance_;
  std::vector<SampleSet> data_;
  std::vector<QuadraticNode> quadratics_;
  ShallowNetShape shape_;
};

/// Per-node Gaussian features around node-specific means whose pairwise
/// distances scale with `heterogeneity`; binary labels from node-specific
/// linear rules. heterogeneity = 0 gives identically distributed nodes.
std::vector<SampleSet> generate_heterogeneous_data(int n_nodes, int samples_per_node,
                                                   int feature_dim, double heterogeneity,
                                                   std::uint64_t seed);

/// Quadratics f_i = 1/2 ||A_i theta - b_i||^2 with minimizers scattered
/// around `center` (mean exactly `center`, spread `heterogeneity`).
/// `hessian_spread` = 0 gives A_i = I; larger values draw diagonal A_i with
/// entries in [1/(1+s), 1+s] so the local Hessians differ across nodes.
std::vector<QuadraticNode> generate_quadratic_nodes(int n_nodes, int dimension,
                                                    double heterogeneity, double center,
                                                    double hessian_spread, std::uint64_t seed);

struct CsvOptions {
  std::string label_column = "label";
  bool standardize = true;
};

/// Numeric CSV with a header row. All columns except the label become
/// features, z-scored with global statistics when requested.
SampleSet load_csv_dataset(const std::filesystem::path& path, const CsvOptions& options = {});
SampleSet parse_csv_dataset(std::string_view text, const CsvOptions& options = {});

/// Writes features as x0..x{d-1} followed by `label_column`.
void write_csv_dataset(const std::filesystem::path& path, const SampleSet& data,
                       std::string_view label_column = "label");

/// Label-skewed split: each label's samples are dealt to nodes in proportions
/// drawn from Dirichlet(concentration). Resampled until every node is
/// nonempty, at most `max_retries` times.
std::vector<SampleSet> partition_dirichlet(const SampleSet& data, int n_nodes,
                                           double concentration, std::uint64_t seed,
                                           int max_retries = 100);

SampleSet concatenate(std::span<const SampleSet> parts);

/// Exact gradient of the node's empirical loss.
Vector full_gradient(const ProblemInstance& p, int node, const Vector& theta);

/// Mean gradient over m samples drawn without replacement. For quadratics,
/// the full gradient plus N(0, sigma2 / d) noise per coordinate.
GradientSample stochastic_gradient(const ProblemInstance& p, int node, const Vector& theta,
                                   int m, RngEngine& rng);

double loss_eval(const ProblemInstance& p, int node, const Vector& theta);
/// (1/N) sum_i f_i(theta_i).
double global_loss(const ProblemInstance& p, std::span<const Vector> thetas);

/// Empirical total variance of stochastic_gradient at theta.
double estimate_noise_variance(const ProblemInstance& p, const Vector& theta, int m, int draws,
                               std::uint64_t seed);

/// Largest ||grad f_i(x) - grad f_i(y)|| / ||x - y|| over random probe pairs.
double estimate_smoothness(const ProblemInstance& p, int probes, double radius,
                           std::uint64_t seed);

}  // namespace decfl
