#include "decfl/topology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>
#include <string>

#include "decfl/errors.hpp"
#include "decfl/rng.hpp"

namespace decfl {

namespace {

constexpr int kDenseEigenLimit = 64;
constexpr double kRowSumTolerance = 1e-12;

void check_symmetric_stochastic(const Eigen::MatrixXd& w) {
  if (w.rows() != w.cols() || w.rows() == 0) {
    throw ValidationError("mixing matrix must be square and nonempty");
  }
  const Eigen::Index n = w.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (std::abs(w(i, j) - w(j, i)) > kRowSumTolerance) {
        throw ValidationError("mixing matrix is not symmetric at (" + std::to_string(i) +
                              ", " + std::to_string(j) + ")");
      }
    }
    if (std::abs(w.row(i).sum() - 1.0) > kRowSumTolerance) {
      throw ValidationError("mixing matrix row " + std::to_string(i) + " does not sum to 1");
    }
  }
}

}  // namespace

GraphKind parse_graph_kind(std::string_view name) {
  if (name == "complete") return GraphKind::complete;
  if (name == "ring") return GraphKind::ring;
  if (name == "path") return GraphKind::path;
  if (name == "star") return GraphKind::star;
  if (name == "erdos_renyi") return GraphKind::erdos_renyi;
  throw ValidationError("unknown graph kind '" + std::string(name) +
                        "' (expected complete|ring|path|star|erdos_renyi)");
}

std::string_view to_string(GraphKind kind) {
  switch (kind) {
    case GraphKind::complete: return "complete";
    case GraphKind::ring: return "ring";
    case GraphKind::path: return "path";
    case GraphKind::star: return "star";
    case GraphKind::erdos_renyi: return "erdos_renyi";
  }
  return "?";
}

Graph Graph::from_edges(int node_count, std::vector<Edge> edges) {
  if (node_count < 1) throw ValidationError("graph needs at least one node");
  for (auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= node_count || b >= node_count) {
      throw ValidationError("edge (" + std::to_string(a) + ", " + std::to_string(b) +
                            ") out of range for " + std::to_string(node_count) + " nodes");
    }
    if (a == b) throw ValidationError("self-loop at node " + std::to_string(a));
    if (a > b) std::swap(a, b);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  Graph g;
  g.node_count_ = node_count;
  g.adjacency_.assign(node_count, {});
  for (const auto& [a, b] : edges) {
    g.adjacency_[a].push_back(b);
    g.adjacency_[b].push_back(a);
  }
  for (auto& list : g.adjacency_) std::sort(list.begin(), list.end());
  g.edges_ = std::move(edges);
  return g;
}

bool Graph::has_edge(int a, int b) const {
  if (a > b) std::swap(a, b);
  return std::binary_search(edges_.begin(), edges_.end(), Edge{a, b});
}

bool Graph::is_connected() const {
  if (node_count_ == 0) return false;
  std::vector<char> seen(node_count_, 0);
  std::queue<int> frontier;
  frontier.push(0);
  seen[0] = 1;
  int reached = 1;
  while (!frontier.empty()) {
    const int u = frontier.front();
    frontier.pop();
    for (int v : adjacency_[u]) {
      if (!seen[v]) {
        seen[v] = 1;
        ++reached;
        frontier.push(v);
      }
    }
  }
  return reached == node_count_;
}

Graph build_graph(GraphKind kind, int n, double edge_prob, std::uint64_t seed, int max_retries) {
  if (n < 2) throw ValidationError("graph needs n >= 2 nodes, got " + std::to_string(n));
  std::vector<Edge> edges;
  switch (kind) {
    case GraphKind::complete:
      for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) edges.emplace_back(i, j);
      break;
    case GraphKind::ring:
      for (int i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
      break;
    case GraphKind::path:
      for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
      break;
    case GraphKind::star:
      for (int i = 1; i < n; ++i) edges.emplace_back(0, i);
      break;
    case GraphKind::erdos_renyi: {
      if (!(edge_prob > 0.0 && edge_prob <= 1.0)) {
        throw ValidationError("erdos_renyi edge_prob must lie in (0, 1]");
      }
      for (int attempt = 0; attempt < max_retries; ++attempt) {
        auto rng = make_stream(seed, StreamPurpose::graph, 0, attempt);
        std::bernoulli_distribution coin(edge_prob);
        edges.clear();
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j)
            if (coin(rng)) edges.emplace_back(i, j);
        Graph g = Graph::from_edges(n, edges);
        if (g.is_connected()) return g;
      }
      throw NumericalError("no connected Erdos-Renyi sample (n=" + std::to_string(n) +
                           ", p=" + std::to_string(edge_prob) + ") within " +
                           std::to_string(max_retries) + " attempts");
    }
  }
  return Graph::from_edges(n, std::move(edges));
}

MixingMatrix metropolis_weights(const Graph& g) {
  if (!g.is_connected()) {
    throw ValidationError("graph is disconnected; mixing cannot reach consensus");
  }
  const int n = g.node_count();
  MixingMatrix mm;
  mm.weights = Eigen::MatrixXd::Zero(n, n);
  for (const auto& [a, b] : g.edges()) {
    const double w = 1.0 / (1.0 + std::max(g.degree(a), g.degree(b)));
    mm.weights(a, b) = w;
    mm.weights(b, a) = w;
  }
  for (int i = 0; i < n; ++i) {
    // Summed in index order so the diagonal is reproducible.
    double off = 0.0;
    for (int j : g.neighbors(i)) off += mm.weights(i, j);
    mm.weights(i, i) = 1.0 - off;
  }
  mm.lambda2 = spectral_gap(mm.weights);
  return mm;
}

double spectral_gap(const Eigen::MatrixXd& w) {
  check_symmetric_stochastic(w);
  const Eigen::Index n = w.rows();
  if (n > kDenseEigenLimit) return spectral_gap_power_iteration(w);
  Eigen::MatrixXd deflated = w.array() - 1.0 / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(deflated, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalError("symmetric eigensolver failed");
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_gap_power_iteration(const Eigen::MatrixXd& w, double tolerance,
                                    int max_iterations) {
  check_symmetric_stochastic(w);
  const Eigen::Index n = w.rows();
  if (n == 1) return 0.0;

  // B = W - (1/N) 1 1^T applied without forming it; iterate on B^2 so that
  // a +/- eigenvalue pair of equal magnitude cannot stall convergence.
  const auto apply = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out = w * v;
    out.array() -= v.mean();
    return out;
  };

  // Fixed deterministic start vector with no component along 1.
  auto rng = make_stream(0x5eed, StreamPurpose::probe);
  std::normal_distribution<double> normal;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
  v.array() -= v.mean();
  v.normalize();

  double estimate = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::VectorXd bv = apply(v);
    Eigen::VectorXd bbv = apply(bv);
    const double mu = bv.squaredNorm();  // v^T B^2 v with ||v|| = 1
    const double residual = (bbv - mu * v).norm();
    estimate = std::sqrt(std::max(mu, 0.0));
    if (residual <= tolerance * std::max(1.0, mu)) return estimate;
    const double norm = bbv.norm();
    if (norm == 0.0) return 0.0;
    v = bbv / norm;
    v.array() -= v.mean();
    v.normalize();
  }
  throw NumericalError("power iteration did not converge; last estimate " +
                       std::to_string(estimate));
}

Graph parse_edge_list(std::string_view text) {
  std::vector<Edge> edges;
  int declared_nodes = -1;
  int max_index = -1;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') {
      const auto pos = line.find("nodes:");
      if (pos != std::string::npos) {
        std::istringstream num(line.substr(pos + 6));
        if (!(num >> declared_nodes)) {
          throw ValidationError("edge list line " + std::to_string(line_no) +
                                ": bad node-count directive");
        }
      }
      continue;
    }
    std::istringstream fields(line);
    long long a = 0, b = 0;
    std::string rest;
    if (!(fields >> a >> b) || (fields >> rest)) {
      throw ValidationError("edge list line " + std::to_string(line_no) +
                            ": expected two integers \"i j\"");
    }
    if (a < 0 || b < 0) {
      throw ValidationError("edge list line " + std::to_string(line_no) + ": negative index");
    }
    edges.emplace_back(static_cast<int>(a), static_cast<int>(b));
    max_index = std::max<int>(max_index, static_cast<int>(std::max(a, b)));
  }
  const int n = declared_nodes > 0 ? declared_nodes : max_index + 1;
  if (n < 1) throw ValidationError("edge list has no edges");
  return Graph::from_edges(n, std::move(edges));
}

Graph read_edge_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open edge list " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_edge_list(buffer.str());
}

void write_edge_list(const std::filesystem::path& path, const Graph& g) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# nodes: " << g.node_count() << "\n";
  for (const auto& [a, b] : g.edges()) out << a << ' ' << b << '\n';
}

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

}  // namespace decfl
