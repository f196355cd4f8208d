#include "decfl/problems.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "decfl/errors.hpp"

namespace decfl {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct NetView {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w1;
  Eigen::Map<const Vector> b1;
  Eigen::Map<const Vector> w2;

  NetView(const ShallowNetShape& s, const Vector& theta)
      : w1(theta.data(), s.hidden, s.inputs),
        b1(theta.data() + s.hidden * s.inputs, s.hidden),
        w2(theta.data() + s.hidden * s.inputs + s.hidden, s.hidden) {}
};

// Mean loss and (optionally) gradient of the network over rows of x.
double net_loss_grad(const ShallowNetShape& shape, const Vector& theta, const Matrix& x,
                     const Vector& y, Vector* grad) {
  const NetView net(shape, theta);
  const double n = static_cast<double>(x.rows());
  Matrix hidden = (x * net.w1.transpose()).rowwise() + net.b1.transpose();
  hidden = hidden.array().tanh().matrix();
  const Vector z = hidden * net.w2;

  double loss = 0.0;
  Vector dz(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    loss += softplus(z(k)) - y(k) * z(k);
    dz(k) = (sigmoid(z(k)) - y(k)) / n;
  }
  if (grad) {
    grad->resize(shape.parameter_count());
    const Matrix dpre =
        ((dz * net.w2.transpose()).array() * (1.0 - hidden.array().square())).matrix();
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gw1(
        grad->data(), shape.hidden, shape.inputs);
    gw1 = dpre.transpose() * x;
    grad->segment(shape.hidden * shape.inputs, shape.hidden) = dpre.colwise().sum().transpose();
    grad->tail(shape.hidden) = hidden.transpose() * dz;
  }
  return loss / n;
}

double logistic_loss_grad(const Vector& theta, const Matrix& x, const Vector& y, Vector* grad) {
  const double n = static_cast<double>(x.rows());
  const Vector z = x * theta;
  double loss = 0.0;
  Vector residual(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    loss += softplus(z(k)) - y(k) * z(k);
    residual(k) = sigmoid(z(k)) - y(k);
  }
  if (grad) *grad = x.transpose() * residual / n;
  return loss / n;
}

Vector quadratic_gradient(const QuadraticNode& q, const Vector& theta) {
  return q.a.transpose() * (q.a * theta - q.b);
}

void check_samples(const std::vector<SampleSet>& node_data, int feature_dim) {
  if (node_data.empty()) throw ValidationError("problem needs at least one node");
  for (std::size_t i = 0; i < node_data.size(); ++i) {
    const auto& s = node_data[i];
    if (s.size() < 1) throw ValidationError("node " + std::to_string(i) + " has no samples");
    if (s.labels.size() != s.features.rows()) {
      throw ValidationError("node " + std::to_string(i) + ": label count mismatch");
    }
    if (s.feature_dim() != feature_dim) {
      throw ValidationError("node " + std::to_string(i) + ": expected " +
                            std::to_string(feature_dim) + " features, got " +
                            std::to_string(s.feature_dim()));
    }
    if ((s.labels.array() < 0.0).any() || (s.labels.array() > 1.0).any()) {
      throw ValidationError("node " + std::to_string(i) + ": labels must lie in [0, 1]");
    }
  }
}

Matrix gather_rows(const Matrix& m, std::span<const int> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(k) = m.row(rows[k]);
  return out;
}

Vector gather(const Vector& v, std::span<const int> rows) {
  Vector out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) out(k) = v(rows[k]);
  return out;
}

Vector random_unit_vector(int dim, RngEngine& rng) {
  std::normal_distribution<double> normal;
  Vector v(dim);
  do {
    for (int k = 0; k < dim; ++k) v(k) = normal(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace

ModelKind parse_model_kind(std::string_view name) {
  if (name == "quadratic") return ModelKind::quadratic;
  if (name == "logistic") return ModelKind::logistic;
  if (name == "shallow_nn") return ModelKind::shallow_nn;
  throw ValidationError("unknown model '" + std::string(name) +
                        "' (expected quadratic|logistic|shallow_nn)");
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::quadratic: return "quadratic";
    case ModelKind::logistic: return "logistic";
    case ModelKind::shallow_nn: return "shallow_nn";
  }
  return "?";
}

ProblemInstance ProblemInstance::quadratic(std::vector<QuadraticNode> nodes, double sigma2) {
  if (nodes.empty()) throw ValidationError("problem needs at least one node");
  if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) {
    throw ValidationError("sigma2 must be finite and >= 0");
  }
  const Eigen::Index d = nodes.front().a.cols();
  if (d < 1) throw ValidationError("quadratic dimension must be >= 1");
  ProblemInstance p;
  p.model_ = ModelKind::quadratic;
  p.dimension_ = static_cast<int>(d);
  p.node_count_ = static_cast<int>(nodes.size());
  p.noise_variance_ = sigma2;
  double lipschitz = 0.0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& q = nodes[i];
    if (q.a.cols() != d || q.b.size() != q.a.rows()) {
      throw ValidationError("quadratic node " + std::to_string(i) + ": shape mismatch");
    }
    const Matrix hessian = q.a.transpose() * q.a;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(hessian, Eigen::EigenvaluesOnly);
    lipschitz = std::max(lipschitz, solver.eigenvalues().maxCoeff());
  }
  p.smoothness_ = lipschitz;
  p.quadratics_ = std::move(nodes);
  return p;
}

ProblemInstance ProblemInstance::logistic(std::vector<SampleSet> node_data) {
  if (node_data.empty()) throw ValidationError("problem needs at least one node");
  const int d = node_data.front().feature_dim();
  if (d < 1) throw ValidationError("logistic model needs at least one feature");
  check_samples(node_data, d);
  ProblemInstance p;
  p.model_ = ModelKind::logistic;
  p.dimension_ = d;
  p.node_count_ = static_cast<int>(node_data.size());
  double lipschitz = 0.0;
  for (const auto& s : node_data) {
    const Matrix gram = s.features.transpose() * s.features / static_cast<double>(s.size());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(gram, Eigen::EigenvaluesOnly);
    lipschitz = std::max(lipschitz, 0.25 * solver.eigenvalues().maxCoeff());
  }
  p.smoothness_ = lipschitz;
  p.data_ = std::move(node_data);
  return p;
}

ProblemInstance ProblemInstance::shallow_nn(std::vector<SampleSet> node_data,
                                            ShallowNetShape shape) {
  if (shape.inputs < 1 || shape.hidden < 1) {
    throw ValidationError("network needs at least one input and one hidden unit");
  }
  check_samples(node_data, shape.inputs);
  ProblemInstance p;
  p.model_ = ModelKind::shallow_nn;
  p.shape_ = shape;
  p.dimension_ = shape.parameter_count();
  p.node_count_ = static_cast<int>(node_data.size());
  p.data_ = std::move(node_data);
  p.smoothness_ = estimate_smoothness(p, 16, 1.0, 0x4c);
  return p;
}

int ProblemInstance::sample_count(int node) const {
  check_node(node);
  return model_ == ModelKind::quadratic ? 0 : data_[node].size();
}

void ProblemInstance::check_node(int node) const {
  if (node < 0 || node >= node_count_) {
    throw ValidationError("node index " + std::to_string(node) + " out of range");
  }
}

Vector full_gradient(const ProblemInstance& p, int node, const Vector& theta) {
  p.check_node(node);
  if (theta.size() != p.dimension()) throw ValidationError("theta has wrong dimension");
  Vector grad;
  switch (p.model()) {
    case ModelKind::quadratic:
      return quadratic_gradient(p.quadratics_[node], theta);
    case ModelKind::logistic:
      logistic_loss_grad(theta, p.data_[node].features, p.data_[node].labels, &grad);
      return grad;
    case ModelKind::shallow_nn:
      net_loss_grad(p.shape_, theta, p.data_[node].features, p.data_[node].labels, &grad);
      return grad;
  }
  return grad;
}

GradientSample stochastic_gradient(const ProblemInstance& p, int node, const Vector& theta,
                                   int m, RngEngine& rng) {
  p.check_node(node);
  if (theta.size() != p.dimension()) throw ValidationError("theta has wrong dimension");
  if (m < 1) throw ValidationError("minibatch size must be >= 1");
  GradientSample out;
  out.minibatch_size = m;
  out.node = node;

  if (p.model() == ModelKind::quadratic) {
    out.value = quadratic_gradient(p.quadratics_[node], theta);
    const double sigma2 = p.noise_variance().value_or(0.0);
    if (sigma2 > 0.0) {
      std::normal_distribution<double> noise(0.0, std::sqrt(sigma2 / p.dimension()));
      for (Eigen::Index k = 0; k < out.value.size(); ++k) out.value(k) += noise(rng);
    }
    return out;
  }

  const SampleSet& data = p.data_[node];
  if (m > data.size()) {
    throw ValidationError("minibatch size " + std::to_string(m) + " exceeds node " +
                          std::to_string(node) + "'s " + std::to_string(data.size()) +
                          " samples");
  }
  if (m == data.size()) {
    out.value = full_gradient(p, node, theta);
    return out;
  }
  std::vector<int> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> picked;
  picked.reserve(m);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), m, rng);
  const Matrix x = gather_rows(data.features, picked);
  const Vector y = gather(data.labels, picked);
  if (p.model() == ModelKind::logistic) {
    logistic_loss_grad(theta, x, y, &out.value);
  } else {
    net_loss_grad(p.shape_, theta, x, y, &out.value);
  }
  return out;
}

double loss_eval(const ProblemInstance& p, int node, const Vector& theta) {
  p.check_node(node);
  if (theta.size() != p.dimension()) throw ValidationError("theta has wrong dimension");
  switch (p.model()) {
    case ModelKind::quadratic: {
      const auto& q = p.quadratics_[node];
      return 0.5 * (q.a * theta - q.b).squaredNorm();
    }
    case ModelKind::logistic:
      return logistic_loss_grad(theta, p.data_[node].features, p.data_[node].labels, nullptr);
    case ModelKind::shallow_nn:
      return net_loss_grad(p.shape_, theta, p.data_[node].features, p.data_[node].labels,
                           nullptr);
  }
  return 0.0;
}

double global_loss(const ProblemInstance& p, std::span<const Vector> thetas) {
  if (static_cast<int>(thetas.size()) != p.node_count()) {
    throw ValidationError("expected one iterate per node");
  }
  double total = 0.0;
  for (int i = 0; i < p.node_count(); ++i) total += loss_eval(p, i, thetas[i]);
  return total / p.node_count();
}

std::vector<SampleSet> generate_heterogeneous_data(int n_nodes, int samples_per_node,
                                                   int feature_dim, double heterogeneity,
                                                   std::uint64_t seed) {
  if (n_nodes < 1 || samples_per_node < 1 || feature_dim < 1) {
    throw ValidationError("node, sample and feature counts must be positive");
  }
  if (!(heterogeneity >= 0.0)) throw ValidationError("heterogeneity must be >= 0");

  auto shared = make_stream(seed, StreamPurpose::data, 0xFFFFFFFFULL);
  std::normal_distribution<double> normal;
  Vector rule(feature_dim);
  for (int k = 0; k < feature_dim; ++k) rule(k) = normal(shared);

  std::vector<SampleSet> out(n_nodes);
  for (int i = 0; i < n_nodes; ++i) {
    auto rng = make_stream(seed, StreamPurpose::data, i);
    const Vector mean = heterogeneity * random_unit_vector(feature_dim, rng);
    Vector node_rule = rule;
    for (int k = 0; k < feature_dim; ++k) node_rule(k) += 0.5 * heterogeneity * normal(rng);

    SampleSet& s = out[i];
    s.features.resize(samples_per_node, feature_dim);
    s.labels.resize(samples_per_node);
    for (int r = 0; r < samples_per_node; ++r) {
      for (int k = 0; k < feature_dim; ++k) s.features(r, k) = mean(k) + normal(rng);
      const double margin = node_rule.dot(s.features.row(r).transpose()) + 0.5 * normal(rng);
      s.labels(r) = margin > 0.0 ? 1.0 : 0.0;
    }
  }
  return out;
}

std::vector<QuadraticNode> generate_quadratic_nodes(int n_nodes, int dimension,
                                                    double heterogeneity, double center,
                                                    double hessian_spread,
                                                    std::uint64_t seed) {
  if (n_nodes < 1 || dimension < 1) throw ValidationError("node and dimension counts must be positive");
  if (!(heterogeneity >= 0.0) || !(hessian_spread >= 0.0)) {
    throw ValidationError("heterogeneity and hessian_spread must be >= 0");
  }
  std::normal_distribution<double> normal;
  Matrix offsets(n_nodes, dimension);
  Matrix diagonals = Matrix::Ones(n_nodes, dimension);
  const double log_range = std::log1p(hessian_spread);
  for (int i = 0; i < n_nodes; ++i) {
    auto rng = make_stream(seed, StreamPurpose::data, i);
    for (int k = 0; k < dimension; ++k) offsets(i, k) = normal(rng);
    if (hessian_spread > 0.0) {
      std::uniform_real_distribution<double> u(-log_range, log_range);
      for (int k = 0; k < dimension; ++k) diagonals(i, k) = std::exp(u(rng));
    }
  }
  const Eigen::RowVectorXd mean_offset = offsets.colwise().mean();

  std::vector<QuadraticNode> nodes(n_nodes);
  for (int i = 0; i < n_nodes; ++i) {
    const Vector minimizer =
        Vector::Constant(dimension, center) +
        heterogeneity * (offsets.row(i) - mean_offset).transpose();
    nodes[i].a = diagonals.row(i).transpose().asDiagonal();
    nodes[i].b = nodes[i].a * minimizer;
  }
  return nodes;
}

SampleSet parse_csv_dataset(std::string_view text, const CsvOptions& options) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    for (auto f : split_csv_line(line)) header.emplace_back(f);
    break;
  }
  if (header.empty()) throw ValidationError("CSV is empty");
  const auto label_it = std::find(header.begin(), header.end(), options.label_column);
  if (label_it == header.end()) {
    throw ValidationError("CSV has no label column '" + options.label_column + "'");
  }
  const std::size_t label_index = label_it - header.begin();
  const std::size_t columns = header.size();
  if (columns < 2) throw ValidationError("CSV needs at least one feature column");

  std::vector<double> values;
  std::vector<double> labels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != columns) {
      throw ValidationError("CSV line " + std::to_string(line_no) + ": expected " +
                            std::to_string(columns) + " fields, got " +
                            std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < columns; ++c) {
      double v = 0.0;
      const auto f = fields[c];
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc{} || ptr != f.data() + f.size() || f.empty()) {
        throw ValidationError("CSV line " + std::to_string(line_no) + ", column '" +
                              header[c] + "': not a number");
      }
      (c == label_index ? labels : values).push_back(v);
    }
  }
  if (labels.empty()) throw ValidationError("CSV has a header but no rows");

  SampleSet out;
  const Eigen::Index rows = static_cast<Eigen::Index>(labels.size());
  const Eigen::Index cols = static_cast<Eigen::Index>(columns - 1);
  out.features = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                          Eigen::RowMajor>>(values.data(), rows, cols);
  out.labels = Eigen::Map<Vector>(labels.data(), rows);
  if (options.standardize) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      auto col = out.features.col(c);
      const double mean = col.mean();
      col.array() -= mean;
      const double sd = std::sqrt(col.squaredNorm() / static_cast<double>(rows));
      if (sd > 0.0) col /= sd;
    }
  }
  return out;
}

SampleSet load_csv_dataset(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv_dataset(buffer.str(), options);
}

void write_csv_dataset(const std::filesystem::path& path, const SampleSet& data,
                       std::string_view label_column) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  for (int k = 0; k < data.feature_dim(); ++k) out << 'x' << k << ',';
  out << label_column << '\n';
  for (int r = 0; r < data.size(); ++r) {
    for (int k = 0; k < data.feature_dim(); ++k) out << data.features(r, k) << ',';
    out << data.labels(r) << '\n';
  }
}

SampleSet concatenate(std::span<const SampleSet> parts) {
  SampleSet out;
  if (parts.empty()) return out;
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.size();
  const Eigen::Index cols = parts.front().feature_dim();
  out.features.resize(rows, cols);
  out.labels.resize(rows);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    if (p.feature_dim() != cols) throw ValidationError("feature dimension mismatch");
    out.features.middleRows(at, p.size()) = p.features;
    out.labels.segment(at, p.size()) = p.labels;
    at += p.size();
  }
  return out;
}

std::vector<SampleSet> partition_dirichlet(const SampleSet& data, int n_nodes,
                                           double concentration, std::uint64_t seed,
                                           int max_retries) {
  if (n_nodes < 1) throw ValidationError("n_nodes must be >= 1");
  if (!(concentration > 0.0)) throw ValidationError("concentration must be > 0");
  if (data.size() < n_nodes) {
    throw ValidationError("cannot give " + std::to_string(n_nodes) + " nodes a sample each from " +
                          std::to_string(data.size()) + " samples");
  }
  std::map<double, std::vector<int>> by_label;
  for (int r = 0; r < data.size(); ++r) by_label[data.labels(r)].push_back(r);

  for (int attempt = 0; attempt < max_retries; ++attempt) {
    auto rng = make_stream(seed, StreamPurpose::partition, 0, attempt);
    std::gamma_distribution<double> gamma(concentration, 1.0);
    std::vector<std::vector<int>> assigned(n_nodes);
    bool degenerate = false;

    for (const auto& [label, rows] : by_label) {
      std::vector<double> shares(n_nodes);
      double total = 0.0;
      for (auto& s : shares) total += (s = gamma(rng));
      if (!(total > 0.0) || !std::isfinite(total)) {
        degenerate = true;
        break;
      }
      std::vector<int> order = rows;
      std::shuffle(order.begin(), order.end(), rng);

      // Largest-remainder apportionment of this label's samples.
      const double count = static_cast<double>(order.size());
      std::vector<int> counts(n_nodes);
      std::vector<std::pair<double, int>> remainders(n_nodes);
      int given = 0;
      for (int i = 0; i < n_nodes; ++i) {
        const double exact = shares[i] / total * count;
        counts[i] = static_cast<int>(std::floor(exact));
        given += counts[i];
        remainders[i] = {exact - counts[i], i};
      }
      std::stable_sort(remainders.begin(), remainders.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      for (int k = 0; given < static_cast<int>(order.size()); ++k, ++given) {
        ++counts[remainders[k % n_nodes].second];
      }
      std::size_t at = 0;
      for (int i = 0; i < n_nodes; ++i) {
        for (int c = 0; c < counts[i]; ++c) assigned[i].push_back(order[at++]);
      }
    }
    if (degenerate) continue;
    if (std::any_of(assigned.begin(), assigned.end(), [](const auto& a) { return a.empty(); })) {
      continue;
    }
    std::vector<SampleSet> out(n_nodes);
    for (int i = 0; i < n_nodes; ++i) {
      out[i].features = gather_rows(data.features, assigned[i]);
      out[i].labels = gather(data.labels, assigned[i]);
    }
    return out;
  }
  throw NumericalError("Dirichlet partition left a node empty in all " +
                       std::to_string(max_retries) + " attempts");
}

double estimate_noise_variance(const ProblemInstance& p, const Vector& theta, int m, int draws,
                               std::uint64_t seed) {
  if (draws < 2) throw ValidationError("need at least two draws");
  double worst = 0.0;
  for (int i = 0; i < p.node_count(); ++i) {
    const Vector truth = full_gradient(p, i, theta);
    double total = 0.0;
    for (int k = 0; k < draws; ++k) {
      auto rng = make_stream(seed, StreamPurpose::probe, i, k);
      total += (stochastic_gradient(p, i, theta, m, rng).value - truth).squaredNorm();
    }
    worst = std::max(worst, total / draws);
  }
  return worst;
}

double estimate_smoothness(const ProblemInstance& p, int probes, double radius,
                           std::uint64_t seed) {
  std::normal_distribution<double> normal;
  double best = 0.0;
  for (int k = 0; k < probes; ++k) {
    auto rng = make_stream(seed, StreamPurpose::probe, 0, k);
    Vector x(p.dimension()), dir(p.dimension());
    for (int c = 0; c < p.dimension(); ++c) x(c) = radius * normal(rng);
    for (int c = 0; c < p.dimension(); ++c) dir(c) = normal(rng);
    const Vector y = x + 1e-3 * dir.normalized();
    const double step = (y - x).norm();
    for (int i = 0; i < p.node_count(); ++i) {
      best = std::max(best, (full_gradient(p, i, x) - full_gradient(p, i, y)).norm() / step);
    }
  }
  return best;
}

}  // namespace decfl
