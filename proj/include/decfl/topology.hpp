#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace decfl {

enum class GraphKind { complete, ring, path, star, erdos_renyi };

GraphKind parse_graph_kind(std::string_view name);
std::string_view to_string(GraphKind kind);

using Edge = std::pair<int, int>;

/// Undirected simple graph on nodes 0..N-1. Edges are stored normalized
/// (first < second), sorted and without duplicates; self-loops are rejected.
class Graph {
 public:
  Graph() = default;
  static Graph from_edges(int node_count, std::vector<Edge> edges);

  int node_count() const { return node_count_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<int>& neighbors(int node) const { return adjacency_.at(node); }
  int degree(int node) const { return static_cast<int>(adjacency_.at(node).size()); }
  bool has_edge(int a, int b) const;

  /// Breadth-first reachability from node 0 covers every node.
  bool is_connected() const;

 private:
  int node_count_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> adjacency_;
};

/// Builds a connected graph. Erdős–Rényi graphs are resampled until
/// connected, at most `max_retries` times.
Graph build_graph(GraphKind kind, int n, double edge_prob = 0.0,
                  std::uint64_t seed = 0, int max_retries = 1000);

/// Gossip weights W together with the magnitude of its second-largest
/// eigenvalue. Construct through metropolis_weights().
struct MixingMatrix {
  Eigen::MatrixXd weights;
  double lambda2 = 1.0;

  int node_count() const { return static_cast<int>(weights.rows()); }
  /// lambda2 < 1: mixing contracts toward consensus.
  bool contracts() const { return lambda2 < 1.0; }
};

/// W[i][j] = 1 / (1 + max(deg_i, deg_j)) on edges, the remainder of each row
/// on the diagonal, zero elsewhere. Throws ValidationError for disconnected
/// graphs.
MixingMatrix metropolis_weights(const Graph& g);

/// Largest eigenvalue magnitude of W - (1/N) 1 1^T, i.e. the second-largest
/// eigenvalue magnitude of a symmetric row-stochastic W. Dense symmetric
/// eigensolver for N <= 64, deflated power iteration above.
double spectral_gap(const Eigen::MatrixXd& w);
inline double spectral_gap(const MixingMatrix& w) { return spectral_gap(w.weights); }

/// Power-iteration route, exposed so it can be checked against the dense one.
double spectral_gap_power_iteration(const Eigen::MatrixXd& w,
                                    double tolerance = 1e-12,
                                    int max_iterations = 200000);

/// Edge-list text: one "i j" pair per line, 0-indexed. Blank lines and
/// lines starting with '#' are skipped. N is one past the largest index
/// unless a "# nodes: N" line says otherwise.
Graph read_edge_list(const std::filesystem::path& path);
Graph parse_edge_list(std::string_view text);
void write_edge_list(const std::filesystem::path& path, const Graph& g);

/// Row-major CSV, 17 significant digits.
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);

}  // namespace decfl
