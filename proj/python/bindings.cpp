#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "decfl/errors.hpp"
#include "decfl/harness.hpp"

namespace py = pybind11;
using namespace decfl;

namespace {

std::vector<Vector> rows_of(const Matrix& x) {
  std::vector<Vector> out;
  out.reserve(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.emplace_back(x.row(i).transpose());
  return out;
}

Matrix stack(std::span<const Vector> xs) {
  if (xs.empty()) return {};
  Matrix out(xs.size(), xs.front().size());
  for (std::size_t i = 0; i < xs.size(); ++i) out.row(i) = xs[i].transpose();
  return out;
}

std::vector<SampleSet> to_samples(const std::vector<std::pair<Matrix, Vector>>& parts) {
  std::vector<SampleSet> out;
  for (const auto& [x, y] : parts) out.push_back({x, y});
  return out;
}

py::dict log_to_dict(const TrajectoryLog& log) {
  const auto n = static_cast<Eigen::Index>(log.records.size());
  Eigen::VectorXi round(n), comm(n);
  Vector alpha(n), gap(n), viol(n), loss(n), avg(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = log.records[k];
    round(k) = r.round;
    comm(k) = r.comm_rounds;
    alpha(k) = r.alpha;
    gap(k) = r.stationarity_gap;
    viol(k) = r.consensus_violation;
    loss(k) = r.global_loss;
    avg(k) = r.running_average_metric;
  }
  py::dict d;
  d["round"] = round;
  d["comm_rounds"] = comm;
  d["alpha"] = alpha;
  d["stationarity_gap"] = gap;
  d["consensus_violation"] = viol;
  d["global_loss"] = loss;
  d["running_average_metric"] = avg;
  d["total_comm_rounds"] = log.comm_rounds;
  d["rounds_completed"] = log.rounds_completed;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Decentralized federated learning: DSGD, DSGT and their local-step variants";
  m.attr("__version__") = std::string(library_version());

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> divergence;
  divergence.call_once_and_store_result([&] {
    return py::object(py::exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError));
  });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DivergenceError& e) {
      py::object type = divergence.get_stored();
      py::object err = type(e.what());
      err.attr("round") = e.round();
      err.attr("partial_log") = log_to_dict(e.partial_log());
      PyErr_SetObject(type.ptr(), err.ptr());
    }
  });

  py::class_<Graph>(m, "Graph")
      .def_static("from_edges", &Graph::from_edges, py::arg("nodes"), py::arg("edges"))
      .def_property_readonly("node_count", &Graph::node_count)
      .def_property_readonly("edges", &Graph::edges)
      .def("neighbors", &Graph::neighbors)
      .def("degree", &Graph::degree)
      .def("has_edge", &Graph::has_edge)
      .def("is_connected", &Graph::is_connected)
      .def("__repr__", [](const Graph& g) {
        return "<Graph nodes=" + std::to_string(g.node_count()) +
               " edges=" + std::to_string(g.edges().size()) + ">";
      });

  m.def(
      "build_graph",
      [](std::string_view kind, int n, double edge_prob, std::uint64_t seed) {
        return build_graph(parse_graph_kind(kind), n, edge_prob, seed);
      },
      py::arg("kind"), py::arg("nodes"), py::arg("edge_prob") = 0.0, py::arg("seed") = 0,
      "kind: complete | ring | path | star | erdos_renyi");
  m.def("read_edge_list", &read_edge_list);

  py::class_<MixingMatrix>(m, "MixingMatrix")
      .def_readonly("weights", &MixingMatrix::weights)
      .def_readonly("lambda2", &MixingMatrix::lambda2)
      .def_property_readonly("node_count", &MixingMatrix::node_count);
  m.def("metropolis_weights", &metropolis_weights, py::arg("graph"));
  m.def("spectral_gap", py::overload_cast<const Eigen::MatrixXd&>(&spectral_gap), py::arg("w"),
        "Largest |eigenvalue| of W - 11^T/N.");

  py::class_<ProblemInstance>(m, "Problem")
      .def_property_readonly(
          "model", [](const ProblemInstance& p) { return std::string(to_string(p.model())); })
      .def_property_readonly("dimension", &ProblemInstance::dimension)
      .def_property_readonly("node_count", &ProblemInstance::node_count)
      .def_property_readonly("smoothness", &ProblemInstance::smoothness)
      .def("sample_count", &ProblemInstance::sample_count);

  m.def(
      "quadratic_problem",
      [](const std::vector<Matrix>& as, const std::vector<Vector>& bs, double sigma2) {
        if (as.size() != bs.size()) throw ValidationError("need one b per A");
        std::vector<QuadraticNode> nodes;
        for (std::size_t i = 0; i < as.size(); ++i) nodes.push_back({as[i], bs[i]});
        return ProblemInstance::quadratic(std::move(nodes), sigma2);
      },
      py::arg("a"), py::arg("b"), py::arg("sigma2") = 0.0,
      "f_i = 1/2 ||A_i theta - b_i||^2 with N(0, sigma2/d) gradient noise per coordinate.");
  m.def(
      "random_quadratic_problem",
      [](int n, int d, double heterogeneity, double center, double hessian_spread,
         std::uint64_t seed, double sigma2) {
        return ProblemInstance::quadratic(
            generate_quadratic_nodes(n, d, heterogeneity, center, hessian_spread, seed), sigma2);
      },
      py::arg("nodes"), py::arg("dimension"), py::arg("heterogeneity") = 1.0,
      py::arg("center") = 0.0, py::arg("hessian_spread") = 0.0, py::arg("seed") = 0,
      py::arg("sigma2") = 0.0);
  m.def(
      "logistic_problem",
      [](const std::vector<std::pair<Matrix, Vector>>& parts) {
        return ProblemInstance::logistic(to_samples(parts));
      },
      py::arg("node_data"), "node_data: list of (features, labels) per node.");
  m.def(
      "shallow_nn_problem",
      [](const std::vector<std::pair<Matrix, Vector>>& parts, int hidden) {
        auto samples = to_samples(parts);
        const int inputs = samples.empty() ? 0 : static_cast<int>(samples.front().feature_dim());
        return ProblemInstance::shallow_nn(std::move(samples), ShallowNetShape{inputs, hidden});
      },
      py::arg("node_data"), py::arg("hidden") = 6);
  m.def(
      "heterogeneous_data",
      [](int n, int samples, int dim, double heterogeneity, std::uint64_t seed) {
        std::vector<std::pair<Matrix, Vector>> out;
        for (auto& s : generate_heterogeneous_data(n, samples, dim, heterogeneity, seed))
          out.emplace_back(std::move(s.features), std::move(s.labels));
        return out;
      },
      py::arg("nodes"), py::arg("samples_per_node"), py::arg("feature_dim"),
      py::arg("heterogeneity") = 1.0, py::arg("seed") = 0);

  m.def("full_gradient", &full_gradient, py::arg("problem"), py::arg("node"), py::arg("theta"));
  m.def("loss", &loss_eval, py::arg("problem"), py::arg("node"), py::arg("theta"));
  m.def(
      "stationarity_gap",
      [](const ProblemInstance& p, const Matrix& thetas) {
        return stationarity_gap(p, rows_of(thetas));
      },
      py::arg("problem"), py::arg("thetas"), "thetas: one row per node.");
  m.def(
      "consensus_violation",
      [](const Matrix& thetas) { return consensus_violation(rows_of(thetas)); },
      py::arg("thetas"));
  m.def(
      "global_loss",
      [](const ProblemInstance& p, const Matrix& thetas) { return global_loss(p, rows_of(thetas)); },
      py::arg("problem"), py::arg("thetas"));
  m.def(
      "mix",
      [](const MixingMatrix& w, const Matrix& xs) {
        const auto rows = rows_of(xs);
        return stack(mix(w, rows));
      },
      py::arg("w"), py::arg("xs"), "Rows of W @ xs, summed in increasing neighbor order.");
  m.def(
      "step_size",
      [](std::string_view kind, double c, int round, int n) {
        return step_size({parse_schedule_kind(kind), c}, round, n);
      },
      py::arg("kind"), py::arg("c"), py::arg("round"), py::arg("nodes"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init([](std::string_view algorithm, int comm_period, int minibatch,
                       std::string_view schedule, double c, int total_rounds, std::uint64_t seed,
                       std::string_view init, double init_scale, std::string_view local_direction,
                       int metric_every, int threads) {
             RunConfig cfg;
             cfg.algorithm = parse_algorithm(algorithm);
             cfg.comm_period = comm_period;
             cfg.minibatch = minibatch;
             cfg.schedule = {parse_schedule_kind(schedule), c};
             cfg.total_rounds = total_rounds;
             cfg.seed = seed;
             cfg.init_policy = parse_init_policy(init);
             cfg.init_scale = init_scale;
             cfg.local_direction = parse_local_direction(local_direction);
             cfg.metric_every = metric_every;
             cfg.threads = threads;
             validate(cfg);
             return cfg;
           }),
           py::arg("algorithm") = "dsgd", py::arg("comm_period") = 1, py::arg("minibatch") = 1,
           py::arg("schedule") = "inverse_sqrt", py::arg("c") = 0.02,
           py::arg("total_rounds") = 1000, py::arg("seed") = 0, py::arg("init") = "identical",
           py::arg("init_scale") = 0.1, py::arg("local_direction") = "gradient",
           py::arg("metric_every") = 0, py::arg("threads") = 1)
      .def_property_readonly("algorithm",
                             [](const RunConfig& c) { return std::string(to_string(c.algorithm)); })
      .def_readonly("comm_period", &RunConfig::comm_period)
      .def_readonly("minibatch", &RunConfig::minibatch)
      .def_readonly("total_rounds", &RunConfig::total_rounds)
      .def_readonly("seed", &RunConfig::seed);

  m.def(
      "run",
      [](const RunConfig& cfg, const ProblemInstance& p, const MixingMatrix& w,
         bool return_iterates) {
        Matrix final_thetas;
        RunHooks hooks;
        if (return_iterates)
          hooks.on_round = [&](int r, std::span<const NodeState> states) {
            if (r != cfg.total_rounds) return;
            std::vector<Vector> xs;
            for (const auto& s : states) xs.push_back(s.theta);
            final_thetas = stack(xs);
          };
        TrajectoryLog log;
        {
          py::gil_scoped_release release;
          log = run(cfg, p, w, hooks);
        }
        py::dict out = log_to_dict(log);
        if (return_iterates) out["thetas"] = final_thetas;
        return out;
      },
      py::arg("config"), py::arg("problem"), py::arg("w"), py::arg("return_iterates") = false,
      "Returns the metric log as numpy arrays (and the final iterates, one row per node).");

  m.def(
      "validate_spec",
      [](const std::filesystem::path& path) {
        const auto spec = load_experiment_spec(path);
        validate_experiment(spec);
        return spec.name;
      },
      py::arg("path"));
  m.def(
      "run_experiment",
      [](const std::filesystem::path& path) {
        const auto spec = load_experiment_spec(path);
        ExperimentResult result;
        {
          py::gil_scoped_release release;
          result = run_experiment(spec);
        }
        py::dict out;
        out["output_dir"] = result.output_dir;
        out["outputs"] = result.outputs;
        out["diverged"] = result.diverged();
        py::dict averaged;
        for (const auto& [name, log] : result.averaged) averaged[py::str(name)] = log_to_dict(log);
        out["averaged"] = averaged;
        return out;
      },
      py::arg("path"), "Runs an experiment spec file and writes its outputs.");
  m.def(
      "speedup_sweep",
      [](const std::filesystem::path& path) {
        const auto spec = load_experiment_spec(path);
        SweepResult result;
        {
          py::gil_scoped_release release;
          result = speedup_sweep(spec);
        }
        py::list rows;
        for (const auto& r : result.rows) {
          py::dict d;
          d["run"] = r.run;
          d["nodes"] = r.nodes;
          d["metric_mean"] = r.metric_mean;
          d["metric_std"] = r.metric_std;
          d["seeds"] = r.seeds;
          rows.append(d);
        }
        py::dict out;
        out["rows"] = rows;
        out["slopes"] = result.slopes;
        out["noise_free"] = result.noise_free;
        out["diverged"] = result.diverged;
        out["output_dir"] = result.output_dir;
        return out;
      },
      py::arg("path"));
}
