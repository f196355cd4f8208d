#include "decfl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <toml.hpp>

#include "decfl/errors.hpp"

#ifndef DECFL_VERSION
#define DECFL_VERSION "unknown"
#endif

namespace decfl {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string_view library_version() { return DECFL_VERSION; }

namespace {

[[noreturn]] void fail(const std::string& key, const std::string& message) {
  throw ValidationError(key + ": " + message);
}

/// A TOML table that remembers which keys were read, so leftovers can be
/// reported as unknown.
class Section {
 public:
  Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }
  bool has(std::string_view key) const { return table_ && table_->contains(key); }
  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  std::optional<std::string> string(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return std::nullopt;
    if (!n->is_string()) fail(key_path(key), "expected a string");
    return std::string(*n->value<std::string_view>());
  }

  std::optional<std::int64_t> integer(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return std::nullopt;
    if (!n->is_integer()) fail(key_path(key), "expected an integer");
    return *n->value<std::int64_t>();
  }

  std::optional<int> int32(std::string_view key, std::int64_t lo, std::int64_t hi) {
    auto v = integer(key);
    if (!v) return std::nullopt;
    if (*v < lo || *v > hi)
      fail(key_path(key), "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                              "], got " + std::to_string(*v));
    return static_cast<int>(*v);
  }

  std::optional<std::uint64_t> seed(std::string_view key) {
    auto v = integer(key);
    if (!v) return std::nullopt;
    if (*v < 0) fail(key_path(key), "seeds must be non-negative");
    return static_cast<std::uint64_t>(*v);
  }

  std::optional<double> number(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return std::nullopt;
    if (!n->is_number()) fail(key_path(key), "expected a number");
    const double v = *n->value<double>();
    if (!std::isfinite(v)) fail(key_path(key), "must be finite");
    return v;
  }

  std::optional<bool> boolean(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return std::nullopt;
    if (!n->is_boolean()) fail(key_path(key), "expected true or false");
    return *n->value<bool>();
  }

  std::optional<std::vector<std::int64_t>> integers(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return std::nullopt;
    const toml::array* arr = n->as_array();
    if (!arr) fail(key_path(key), "expected an array of integers");
    std::vector<std::int64_t> out;
    for (const auto& item : *arr) {
      if (!item.is_integer()) fail(key_path(key), "expected an array of integers");
      out.push_back(*item.value<std::int64_t>());
    }
    return out;
  }

  Section table(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return {nullptr, key_path(key)};
    if (!n->is_table()) fail(key_path(key), "expected a table");
    return {n->as_table(), key_path(key)};
  }

  const toml::array* array_of_tables(std::string_view key) {
    const toml::node* n = take(key);
    if (!n) return nullptr;
    if (!n->is_array_of_tables()) fail(key_path(key), "expected an array of tables ([[" +
                                                          std::string(key) + "]])");
    return n->as_array();
  }

  /// Rejects keys that were never read.
  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_) {
      if (!seen_.count(std::string(k.str()))) fail(key_path(k.str()), "unknown key");
    }
  }

 private:
  const toml::node* take(std::string_view key) {
    if (!table_) return nullptr;
    seen_.insert(std::string(key));
    return table_->get(key);
  }

  const toml::table* table_;
  std::string path_;
  std::set<std::string> seen_;
};

/// Calls a parse_* helper and prefixes its message with the key.
template <class F>
auto parse_field(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    fail(key, e.what());
  }
}

/// Optimizer keys accepted both in [optimizer] (defaults) and in [[runs]].
void read_optimizer_keys(Section& s, RunConfig& cfg) {
  if (auto v = s.string("algorithm"))
    cfg.algorithm = parse_field(s.key_path("algorithm"), [&] { return parse_algorithm(*v); });
  if (auto v = s.int32("comm_period", 1, 1'000'000'000)) cfg.comm_period = *v;
  if (auto v = s.int32("minibatch", 1, 1'000'000'000)) cfg.minibatch = *v;
  if (auto v = s.string("init"))
    cfg.init_policy = parse_field(s.key_path("init"), [&] { return parse_init_policy(*v); });
  if (auto v = s.number("init_scale")) {
    if (*v < 0.0) fail(s.key_path("init_scale"), "must be >= 0");
    cfg.init_scale = *v;
  }
  if (auto v = s.string("local_direction"))
    cfg.local_direction = parse_field(s.key_path("local_direction"),
                                      [&] { return parse_local_direction(*v); });
  Section sched = s.table("schedule");
  if (sched.present()) {
    if (auto v = sched.string("kind"))
      cfg.schedule.kind =
          parse_field(sched.key_path("kind"), [&] { return parse_schedule_kind(*v); });
    if (auto v = sched.number("c")) {
      if (*v < 0.0) fail(sched.key_path("c"), "must be >= 0");
      cfg.schedule.c = *v;
    }
    sched.finish();
  }
}

bool safe_name(std::string_view name) {
  if (name.empty() || name == "." || name == "..") return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

Json toml_to_json(const toml::node& node) {
  if (auto* t = node.as_table()) {
    Json out = Json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (auto* a = node.as_array()) {
    Json out = Json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (node.is_string()) return std::string(*node.value<std::string_view>());
  if (node.is_integer()) return *node.value<std::int64_t>();
  if (node.is_floating_point()) return *node.value<double>();
  if (node.is_boolean()) return *node.value<bool>();
  std::ostringstream os;
  node.visit([&](const auto& v) { os << v; });
  return os.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int min_samples(const ProblemInstance& p) {
  int least = p.sample_count(0);
  for (int i = 1; i < p.node_count(); ++i) least = std::min(least, p.sample_count(i));
  return least;
}

Json record_json(const MetricRecord& r) {
  return {{"round", r.round},
          {"comm_rounds", r.comm_rounds},
          {"alpha", r.alpha},
          {"stationarity_gap", r.stationarity_gap},
          {"consensus_violation", r.consensus_violation},
          {"global_loss", r.global_loss},
          {"running_average_metric", r.running_average_metric}};
}

Json run_json(const RunConfig& r) {
  return {{"name", r.name},
          {"algorithm", to_string(r.algorithm)},
          {"comm_period", r.comm_period},
          {"minibatch", r.minibatch},
          {"schedule", {{"kind", to_string(r.schedule.kind)}, {"c", r.schedule.c}}},
          {"init", to_string(r.init_policy)},
          {"init_scale", r.init_scale},
          {"local_direction", to_string(r.local_direction)}};
}

/// Runs `jobs` workers over [0, count). The first exception wins and is
/// rethrown after every worker has stopped.
void parallel_for(int count, int jobs, const std::function<void(int)>& body) {
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex guard;
  auto worker = [&] {
    for (int k = next++; k < count; k = next++) {
      try {
        body(k);
      } catch (...) {
        std::lock_guard lock(guard);
        if (!first) first = std::current_exception();
        next = count;
      }
    }
  };
  const int n = std::max(1, std::min(jobs, count));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (first) std::rethrow_exception(first);
}

CellResult run_cell(const RunConfig& base, std::uint64_t seed, const ProblemInstance& p,
                    const MixingMatrix& w) {
  RunConfig cfg = base;
  cfg.seed = seed;
  CellResult cell{cfg.name, seed, {}, false, 0, {}};
  try {
    cell.log = run(cfg, p, w);
  } catch (const DivergenceError& e) {
    cell.log = e.partial_log();
    cell.diverged = true;
    cell.diverged_at = e.round();
    cell.error = e.what();
  }
  return cell;
}

/// Output paths relative to the output directory, plus their FNV-1a digests.
class OutputSet {
 public:
  explicit OutputSet(fs::path root) : root_(std::move(root)) {}

  void write(const fs::path& rel, std::string_view text) {
    make_dirs((root_ / rel).parent_path());
    write_file(root_ / rel, text);
    entries_.push_back({rel.generic_string(), hex64(fnv1a64(text)), text.size()});
  }

  std::vector<fs::path> paths() const {
    std::vector<fs::path> out;
    for (const auto& e : entries_) out.push_back(root_ / e.rel);
    return out;
  }

  Json manifest_entries() const {
    Json arr = Json::array();
    for (const auto& e : entries_)
      arr.push_back({{"path", e.rel}, {"fnv1a64", e.digest}, {"bytes", e.bytes}});
    return arr;
  }

 private:
  struct Entry {
    std::string rel;
    std::string digest;
    std::size_t bytes;
  };
  fs::path root_;
  std::vector<Entry> entries_;
};

Json manifest_header(const ExperimentSpec& spec, std::string_view kind) {
  return {{"experiment", spec.name},
          {"kind", kind},
          {"library", "decfl"},
          {"library_version", library_version()},
          {"config_hash", hex64(fnv1a64(spec.source_text))},
          {"config_hash_algorithm", "fnv1a64"}};
}

void finish_manifest(OutputSet& outputs, Json manifest) {
  manifest["outputs"] = outputs.manifest_entries();
  outputs.write("manifest.json", manifest.dump(2) + "\n");
}

PlotSeries series_for(const std::string& label, const TrajectoryLog& log,
                      double (*metric)(const MetricRecord&)) {
  PlotSeries s{label, {}, {}};
  for (const auto& r : log.records) {
    s.x.push_back(r.comm_rounds);
    s.y.push_back(metric(r));
  }
  return s;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ExperimentSpec parse_experiment_spec(std::string_view toml_text, const fs::path& source_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "spec: line " << e.source().begin.line << ": " << e.description();
    throw ValidationError(os.str());
  }

  ExperimentSpec spec;
  spec.source_text = std::string(toml_text);
  spec.source_dir = source_dir;
  Section top(&root, "");

  Section exp = top.table("experiment");
  if (!exp.present()) fail("experiment", "missing table");
  if (auto v = exp.string("name")) {
    if (!safe_name(*v)) fail("experiment.name", "use letters, digits, '_', '-' or '.'");
    spec.name = *v;
  }
  if (auto v = exp.integers("seeds")) {
    if (v->empty()) fail("experiment.seeds", "must list at least one seed");
    spec.seeds.clear();
    std::set<std::int64_t> unique;
    for (auto s : *v) {
      if (s < 0) fail("experiment.seeds", "seeds must be non-negative");
      if (!unique.insert(s).second) fail("experiment.seeds", "duplicate seed " + std::to_string(s));
      spec.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (auto v = exp.string("output_dir")) {
    if (v->empty()) fail("experiment.output_dir", "must not be empty");
    spec.output_dir = *v;
  }
  if (auto v = exp.int32("total_rounds", 1, 1'000'000'000)) spec.total_rounds = *v;
  if (auto v = exp.int32("metric_every", 0, 1'000'000'000)) spec.metric_every = *v;
  if (auto v = exp.int32("jobs", 1, 1024)) spec.jobs = *v;
  int threads = 1;
  if (auto v = exp.int32("threads", 1, 1024)) threads = *v;
  exp.finish();

  Section topo = top.table("topology");
  if (topo.present()) {
    if (topo.has("edge_list") && topo.has("kind"))
      fail("topology.edge_list", "give either kind or edge_list, not both");
    if (auto v = topo.string("kind"))
      spec.topology.kind = parse_field("topology.kind", [&] { return parse_graph_kind(*v); });
    if (auto v = topo.int32("nodes", 2, 1'000'000)) spec.topology.nodes = *v;
    if (auto v = topo.number("edge_prob")) spec.topology.edge_prob = *v;
    if (auto v = topo.seed("seed")) spec.topology.seed = *v;
    if (auto v = topo.string("edge_list")) spec.topology.edge_list = source_dir / *v;
    topo.finish();
  }
  if (spec.topology.kind == GraphKind::erdos_renyi && !spec.topology.edge_list &&
      !(spec.topology.edge_prob > 0.0 && spec.topology.edge_prob <= 1.0))
    fail("topology.edge_prob", "erdos_renyi needs edge_prob in (0, 1]");

  Section prob = top.table("problem");
  if (!prob.present()) fail("problem", "missing table");
  auto& ps = spec.problem;
  if (auto v = prob.string("model"))
    ps.model = parse_field("problem.model", [&] { return parse_model_kind(*v); });
  else
    fail("problem.model", "missing key");
  if (auto v = prob.int32("hidden", 1, 100000)) {
    if (ps.model != ModelKind::shallow_nn) fail("problem.hidden", "only used by shallow_nn");
    ps.hidden = *v;
  }
  Section data = prob.table("data");
  Section quad = prob.table("quadratic");
  if (ps.model == ModelKind::quadratic) {
    if (data.present()) fail("problem.data", "not used by model 'quadratic'");
    if (quad.present()) {
      auto& q = ps.quadratic;
      if (auto v = quad.int32("dimension", 1, 1'000'000)) q.dimension = *v;
      if (auto v = quad.number("sigma2")) {
        if (*v < 0.0) fail("problem.quadratic.sigma2", "must be >= 0");
        q.sigma2 = *v;
      }
      if (auto v = quad.number("heterogeneity")) {
        if (*v < 0.0) fail("problem.quadratic.heterogeneity", "must be >= 0");
        q.heterogeneity = *v;
      }
      if (auto v = quad.number("center")) q.center = *v;
      if (auto v = quad.number("hessian_spread")) {
        if (*v < 0.0) fail("problem.quadratic.hessian_spread", "must be >= 0");
        q.hessian_spread = *v;
      }
      if (auto v = quad.seed("seed")) q.seed = *v;
      quad.finish();
    }
  } else {
    if (quad.present()) fail("problem.quadratic", "only used by model 'quadratic'");
    auto& d = ps.data;
    if (data.present()) {
      if (auto v = data.string("source")) {
        if (*v == "synthetic")
          d.source = DataSpec::Source::synthetic;
        else if (*v == "csv")
          d.source = DataSpec::Source::csv;
        else
          fail("problem.data.source", "unknown source '" + *v + "' (expected synthetic|csv)");
      }
      if (d.source == DataSpec::Source::synthetic) {
        if (auto v = data.int32("samples_per_node", 1, 100'000'000)) d.samples_per_node = *v;
        if (auto v = data.int32("feature_dim", 1, 1'000'000)) d.feature_dim = *v;
        if (auto v = data.number("heterogeneity")) {
          if (*v < 0.0) fail("problem.data.heterogeneity", "must be >= 0");
          d.heterogeneity = *v;
        }
      } else {
        if (auto v = data.string("path"))
          d.csv_path = source_dir / *v;
        else
          fail("problem.data.path", "missing key (required for source = \"csv\")");
        if (auto v = data.string("label_column")) d.label_column = *v;
        if (auto v = data.boolean("standardize")) d.standardize = *v;
        if (auto v = data.number("concentration")) {
          if (*v <= 0.0) fail("problem.data.concentration", "must be > 0");
          d.concentration = *v;
        }
      }
      if (auto v = data.seed("seed")) d.seed = *v;
      data.finish();
    }
  }
  prob.finish();

  RunConfig defaults;
  defaults.schedule = {StepSchedule::Kind::inverse_sqrt, 0.02};
  Section opt = top.table("optimizer");
  if (opt.present()) {
    read_optimizer_keys(opt, defaults);
    opt.finish();
  }

  const toml::array* runs = top.array_of_tables("runs");
  if (!runs || runs->empty()) fail("runs", "define at least one [[runs]] entry");
  std::set<std::string> names;
  for (std::size_t k = 0; k < runs->size(); ++k) {
    const std::string path = "runs[" + std::to_string(k) + "]";
    Section s((*runs)[k].as_table(), path);
    RunConfig cfg = defaults;
    if (auto v = s.string("name"))
      cfg.name = *v;
    else
      fail(path + ".name", "missing key");
    if (!safe_name(cfg.name)) fail(path + ".name", "use letters, digits, '_', '-' or '.'");
    if (!names.insert(cfg.name).second) fail(path + ".name", "duplicate run name '" + cfg.name + "'");
    if (!s.has("algorithm") && !opt.has("algorithm")) fail(path + ".algorithm", "missing key");
    read_optimizer_keys(s, cfg);
    s.finish();
    cfg.total_rounds = spec.total_rounds;
    cfg.metric_every = spec.metric_every;
    cfg.threads = threads;
    parse_field(path, [&] {
      validate(cfg);
      return 0;
    });
    spec.runs.push_back(std::move(cfg));
  }

  Section sweep = top.table("sweep");
  if (sweep.present()) {
    if (auto v = sweep.integers("nodes")) {
      if (v->empty()) fail("sweep.nodes", "must list at least one node count");
      for (auto n : *v) {
        if (n < 2 || n > 1'000'000) fail("sweep.nodes", "node counts must lie in [2, 1000000]");
        spec.sweep_nodes.push_back(static_cast<int>(n));
      }
    } else {
      fail("sweep.nodes", "missing key");
    }
    sweep.finish();
  }
  top.finish();

  if (spec.topology.nodes == 0 && !spec.topology.edge_list && spec.sweep_nodes.empty())
    fail("topology.nodes", "missing key (or give topology.edge_list or sweep.nodes)");
  if (spec.topology.edge_list && !spec.sweep_nodes.empty())
    fail("sweep.nodes", "a sweep needs a generated topology, not an edge list");
  return spec;
}

ExperimentSpec load_experiment_spec(const fs::path& path) {
  return parse_experiment_spec(read_file(path), path.parent_path());
}

Graph build_topology(const ExperimentSpec& spec, int n_nodes) {
  const auto& t = spec.topology;
  if (t.edge_list) {
    Graph g = read_edge_list(*t.edge_list);
    if (n_nodes != g.node_count())
      fail("topology.nodes", "edge list has " + std::to_string(g.node_count()) + " nodes, expected " +
                                 std::to_string(n_nodes));
    return g;
  }
  return build_graph(t.kind, n_nodes, t.edge_prob, t.seed);
}

ProblemInstance build_problem(const ExperimentSpec& spec, int n_nodes) {
  const auto& ps = spec.problem;
  if (ps.model == ModelKind::quadratic) {
    const auto& q = ps.quadratic;
    return ProblemInstance::quadratic(
        generate_quadratic_nodes(n_nodes, q.dimension, q.heterogeneity, q.center,
                                 q.hessian_spread, q.seed),
        q.sigma2);
  }
  const auto& d = ps.data;
  std::vector<SampleSet> parts;
  if (d.source == DataSpec::Source::synthetic) {
    parts = generate_heterogeneous_data(n_nodes, d.samples_per_node, d.feature_dim,
                                        d.heterogeneity, d.seed);
  } else {
    const SampleSet all =
        parse_field("problem.data.path", [&] {
          return load_csv_dataset(d.csv_path, {d.label_column, d.standardize});
        });
    parts = partition_dirichlet(all, n_nodes, d.concentration, d.seed);
  }
  if (ps.model == ModelKind::logistic) return ProblemInstance::logistic(std::move(parts));
  const int inputs = static_cast<int>(parts.front().feature_dim());
  return ProblemInstance::shallow_nn(std::move(parts), ShallowNetShape{inputs, ps.hidden});
}

static int experiment_nodes(const ExperimentSpec& spec) {
  if (spec.topology.nodes > 0) return spec.topology.nodes;
  if (spec.topology.edge_list) return read_edge_list(*spec.topology.edge_list).node_count();
  return 0;
}

void validate_experiment(const ExperimentSpec& spec) {
  std::vector<int> counts = spec.sweep_nodes;
  if (const int n = experiment_nodes(spec); n > 0) counts.push_back(n);
  std::sort(counts.begin(), counts.end());
  counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
  for (int n : counts) {
    const Graph g = parse_field("topology", [&] { return build_topology(spec, n); });
    parse_field("topology", [&] { return metropolis_weights(g); });
    const ProblemInstance p = parse_field("problem", [&] { return build_problem(spec, n); });
    if (p.model() == ModelKind::quadratic) continue;
    const int least = min_samples(p);
    for (std::size_t k = 0; k < spec.runs.size(); ++k) {
      if (spec.runs[k].minibatch > least)
        fail("runs[" + std::to_string(k) + "].minibatch",
             std::to_string(spec.runs[k].minibatch) + " exceeds the smallest node's " +
                 std::to_string(least) + " samples");
    }
  }
}

fs::path resolve_output_dir(const ExperimentSpec& spec) {
  if (spec.output_dir.is_absolute()) return spec.output_dir;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root)
    return fs::path(root) / spec.output_dir;
  return spec.output_dir;
}

bool ExperimentResult::diverged() const {
  return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.diverged; });
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress) {
  validate_experiment(spec);
  const int n = experiment_nodes(spec);
  if (n == 0) fail("topology.nodes", "run needs topology.nodes or topology.edge_list");

  const ProblemInstance problem = build_problem(spec, n);
  const MixingMatrix w = metropolis_weights(build_topology(spec, n));
  if (progress) {
    std::ostringstream os;
    os << spec.name << ": N=" << n << " lambda2=" << w.lambda2 << " d=" << problem.dimension()
       << " cells=" << spec.runs.size() * spec.seeds.size();
    progress(os.str());
  }

  ExperimentResult result;
  result.output_dir = resolve_output_dir(spec);
  make_dirs(result.output_dir);

  const int cell_count = static_cast<int>(spec.runs.size() * spec.seeds.size());
  result.cells.resize(cell_count);
  std::mutex report;
  parallel_for(cell_count, spec.jobs, [&](int k) {
    const auto& cfg = spec.runs[k / spec.seeds.size()];
    const auto seed = spec.seeds[k % spec.seeds.size()];
    result.cells[k] = run_cell(cfg, seed, problem, w);
    if (progress) {
      const auto& c = result.cells[k];
      std::ostringstream os;
      os << "  " << c.run << " seed " << c.seed;
      if (c.diverged)
        os << ": diverged at round " << c.diverged_at << " (" << c.error << ")";
      else
        os << ": gap " << c.log.final_record().stationarity_gap << ", violation "
           << c.log.final_record().consensus_violation << ", loss "
           << c.log.final_record().global_loss;
      std::lock_guard lock(report);
      progress(os.str());
    }
  });

  OutputSet outputs(result.output_dir);
  Json runs_json = Json::array();
  for (std::size_t r = 0; r < spec.runs.size(); ++r) {
    const auto& cfg = spec.runs[r];
    std::vector<TrajectoryLog> logs;
    Json per_seed = Json::array();
    bool any_diverged = false;
    for (std::size_t s = 0; s < spec.seeds.size(); ++s) {
      const auto& c = result.cells[r * spec.seeds.size() + s];
      outputs.write(fs::path(cfg.name) / ("seed_" + std::to_string(c.seed) + ".csv"),
                    trajectory_csv(c.log));
      Json entry = {{"seed", c.seed}, {"diverged", c.diverged}};
      if (c.diverged) {
        entry["diverged_at_round"] = c.diverged_at;
        entry["error"] = c.error;
      }
      if (!c.log.empty()) entry["final"] = record_json(c.log.final_record());
      per_seed.push_back(std::move(entry));
      any_diverged = any_diverged || c.diverged;
      logs.push_back(c.log);
    }
    Json rj = run_json(cfg);
    rj["diverged"] = any_diverged;
    if (!any_diverged) {
      TrajectoryLog mean = average_logs(logs);
      outputs.write(fs::path(cfg.name) / "mean.csv", trajectory_csv(mean));
      rj["final_mean"] = record_json(mean.final_record());
      rj["comm_rounds"] = mean.comm_rounds;
      result.averaged.emplace(cfg.name, std::move(mean));
    }
    rj["seeds"] = std::move(per_seed);
    runs_json.push_back(std::move(rj));
  }

  struct MetricPlot {
    const char* file;
    const char* title;
    double (*value)(const MetricRecord&);
  };
  const MetricPlot plots[] = {
      {"stationarity_gap", "stationarity gap ||mean grad f_i(theta_i)||^2",
       [](const MetricRecord& r) { return r.stationarity_gap; }},
      {"consensus_violation", "consensus violation (1/N) sum ||theta_i - mean||^2",
       [](const MetricRecord& r) { return r.consensus_violation; }},
      {"optimality_gap", "stationarity gap + consensus violation",
       [](const MetricRecord& r) { return r.stationarity_gap + r.consensus_violation; }},
      {"global_loss", "global loss (1/N) sum f_i(theta_i)",
       [](const MetricRecord& r) { return r.global_loss; }},
  };
  for (const auto& mp : plots) {
    PlotSpec plot{spec.name + ": " + mp.title, "communication rounds", mp.file, true, true, {}};
    for (const auto& cfg : spec.runs) {
      auto it = result.averaged.find(cfg.name);
      if (it != result.averaged.end()) plot.series.push_back(series_for(cfg.name, it->second, mp.value));
    }
    outputs.write(fs::path("plots") / (std::string(mp.file) + ".svg"), render_svg(plot));
  }

  Json seeds = Json::array();
  for (auto s : spec.seeds) seeds.push_back(s);
  Json summary = {{"experiment", spec.name},
                  {"library_version", library_version()},
                  {"config_hash", hex64(fnv1a64(spec.source_text))},
                  {"nodes", n},
                  {"lambda2", w.lambda2},
                  {"dimension", problem.dimension()},
                  {"total_rounds", spec.total_rounds},
                  {"seeds", seeds},
                  {"runs", std::move(runs_json)},
                  {"config", toml_to_json(toml::parse(spec.source_text))}};
  outputs.write("summary.json", summary.dump(2) + "\n");

  Json manifest = manifest_header(spec, "run");
  manifest["diverged"] = result.diverged();
  finish_manifest(outputs, std::move(manifest));
  result.outputs = outputs.paths();
  return result;
}

double log_log_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw ValidationError("log_log_slope: need at least two paired points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (!(xs[k] > 0.0) || !(ys[k] > 0.0))
      throw ValidationError("log_log_slope: values must be positive");
    mx += std::log(xs[k]) / n;
    my += std::log(ys[k]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double dx = std::log(xs[k]) - mx;
    sxy += dx * (std::log(ys[k]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw ValidationError("log_log_slope: x values are all equal");
  return sxy / sxx;
}

SweepResult speedup_sweep(const ExperimentSpec& spec, const ProgressFn& progress) {
  if (spec.sweep_nodes.empty()) fail("sweep.nodes", "missing [sweep] table");
  if (spec.problem.model != ModelKind::quadratic)
    fail("problem.model", "speedup_sweep needs the quadratic-with-noise model");
  validate_experiment(spec);

  SweepResult result;
  result.output_dir = resolve_output_dir(spec);
  result.noise_free = spec.problem.quadratic.sigma2 == 0.0;
  if (progress && result.noise_free)
    progress("warning: sigma2 = 0, the metric is purely deterministic; linear speedup "
             "needs sigma2 > 0");
  make_dirs(result.output_dir);

  struct Cell {
    int nodes;
    std::size_t run;
    std::uint64_t seed;
    CellResult out;
  };
  std::vector<Cell> cells;
  for (int n : spec.sweep_nodes)
    for (std::size_t r = 0; r < spec.runs.size(); ++r)
      for (auto s : spec.seeds) cells.push_back({n, r, s, {}});

  std::map<int, ProblemInstance> problems;
  std::map<int, MixingMatrix> mixings;
  for (int n : spec.sweep_nodes) {
    if (problems.count(n)) continue;
    problems.emplace(n, build_problem(spec, n));
    mixings.emplace(n, metropolis_weights(build_topology(spec, n)));
  }

  std::mutex report;
  parallel_for(static_cast<int>(cells.size()), spec.jobs, [&](int k) {
    auto& c = cells[k];
    c.out = run_cell(spec.runs[c.run], c.seed, problems.at(c.nodes), mixings.at(c.nodes));
    if (progress) {
      std::ostringstream os;
      os << "  N=" << c.nodes << " " << c.out.run << " seed " << c.seed << ": ";
      if (c.out.diverged)
        os << "diverged at round " << c.out.diverged_at;
      else
        os << "metric " << c.out.log.final_record().running_average_metric;
      std::lock_guard lock(report);
      progress(os.str());
    }
  });

  OutputSet outputs(result.output_dir);
  std::ostringstream per_seed;
  per_seed << "run,nodes,seed,running_average_metric\n";
  char buf[64];
  bool diverged = false;
  for (const auto& c : cells) {
    if (c.out.diverged) {
      diverged = true;
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.17g", c.out.log.final_record().running_average_metric);
    per_seed << c.out.run << ',' << c.nodes << ',' << c.seed << ',' << buf << '\n';
  }
  outputs.write("speedup_per_seed.csv", per_seed.str());

  std::vector<int> ordered = spec.sweep_nodes;
  std::sort(ordered.begin(), ordered.end());
  ordered.erase(std::unique(ordered.begin(), ordered.end()), ordered.end());
  std::ostringstream table;
  table << "run,nodes,seeds,metric_mean,metric_std\n";
  PlotSpec plot{spec.name + ": time-averaged metric at T = " + std::to_string(spec.total_rounds),
                "nodes N", "running average of gap + violation", true, true, {}};
  for (std::size_t r = 0; r < spec.runs.size(); ++r) {
    PlotSeries series{spec.runs[r].name, {}, {}};
    for (int n : ordered) {
      std::vector<double> vals;
      for (const auto& c : cells)
        if (c.nodes == n && c.run == r && !c.out.diverged)
          vals.push_back(c.out.log.final_record().running_average_metric);
      if (vals.empty()) continue;
      const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      const double sd = vals.size() > 1 ? std::sqrt(var / (vals.size() - 1)) : 0.0;
      result.rows.push_back({spec.runs[r].name, n, mean, sd, static_cast<int>(vals.size())});
      char line[160];
      std::snprintf(line, sizeof line, "%d,%zu,%.17g,%.17g\n", n, vals.size(), mean, sd);
      table << spec.runs[r].name << ',' << line;
      series.x.push_back(n);
      series.y.push_back(mean);
    }
    std::optional<double> slope;
    if (series.x.size() >= 2 && std::all_of(series.y.begin(), series.y.end(),
                                            [](double y) { return y > 0.0; }))
      slope = log_log_slope(series.x, series.y);
    result.slopes[spec.runs[r].name] = slope;
    plot.series.push_back(std::move(series));
  }
  outputs.write("speedup.csv", table.str());
  outputs.write("speedup.svg", render_svg(plot));

  Json manifest = manifest_header(spec, "sweep");
  manifest["noise_free"] = result.noise_free;
  if (result.noise_free)
    manifest["note"] = "sigma2 = 0: no stochastic term, speedup in N is not expected";
  manifest["diverged"] = diverged;
  Json slopes = Json::object();
  for (const auto& [name, s] : result.slopes) slopes[name] = s ? Json(*s) : Json(nullptr);
  manifest["log_log_slope"] = slopes;
  finish_manifest(outputs, std::move(manifest));
  result.outputs = outputs.paths();
  result.diverged = diverged;
  return result;
}

}  // namespace decfl
