#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <unistd.h>

#include "decfl/errors.hpp"
#include "decfl/harness.hpp"

using namespace decfl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() /
                       ("decfl_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string quadratic_spec(const fs::path& out, const std::string& runs,
                           const std::string& extra = "") {
  return "[experiment]\nname = \"q\"\nseeds = [1, 2]\noutput_dir = \"" + out.string() +
         "\"\ntotal_rounds = 200\n" + extra +
         "\n[topology]\nkind = \"ring\"\nnodes = 6\n"
         "[problem]\nmodel = \"quadratic\"\n"
         "[problem.quadratic]\ndimension = 3\nsigma2 = 0.5\nheterogeneity = 2.0\nseed = 4\n"
         "[optimizer]\nschedule = { kind = \"constant\", c = 0.05 }\ninit = \"per_node\"\n" +
         runs;
}

const std::string kFourRunsQ1 =
    "[[runs]]\nname = \"DSGD\"\nalgorithm = \"dsgd\"\n"
    "[[runs]]\nname = \"FD-DSGD\"\nalgorithm = \"dsgd\"\ncomm_period = 1\n"
    "[[runs]]\nname = \"DSGT\"\nalgorithm = \"dsgt\"\n"
    "[[runs]]\nname = \"FD-DSGT\"\nalgorithm = \"dsgt\"\ncomm_period = 1\n";

std::string validation_message(const std::string& text) {
  try {
    parse_experiment_spec(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Spec, ParsesEverySymbol) {
  const auto spec = parse_experiment_spec(quadratic_spec(
      "out", "[[runs]]\nname = \"FD\"\nalgorithm = \"dsgt\"\ncomm_period = 25\nminibatch = 3\n"
             "local_direction = \"tracker\"\nschedule = { kind = \"inverse_sqrt\", c = 0.3 }\n"));
  EXPECT_EQ(spec.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(spec.topology.kind, GraphKind::ring);
  EXPECT_EQ(spec.topology.nodes, 6);
  ASSERT_EQ(spec.runs.size(), 1u);
  const auto& r = spec.runs[0];
  EXPECT_EQ(r.algorithm, Algorithm::dsgt);
  EXPECT_EQ(r.comm_period, 25);
  EXPECT_EQ(r.minibatch, 3);
  EXPECT_EQ(r.total_rounds, 200);
  EXPECT_EQ(r.local_direction, LocalDirection::tracker);
  EXPECT_EQ(r.schedule.kind, StepSchedule::Kind::inverse_sqrt);
  EXPECT_DOUBLE_EQ(r.schedule.c, 0.3);
  // Defaults from [optimizer] apply where the run is silent.
  EXPECT_EQ(r.init_policy, InitPolicy::per_node);
  EXPECT_DOUBLE_EQ(spec.problem.quadratic.sigma2, 0.5);
}

TEST(Spec, NamedFieldErrors) {
  const auto bad_algo = validation_message(
      quadratic_spec("out", "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\n"
                            "[[runs]]\nname = \"b\"\nalgorithm = \"sgd\"\n"));
  EXPECT_NE(bad_algo.find("runs[1].algorithm"), std::string::npos) << bad_algo;
  EXPECT_NE(bad_algo.find("sgd"), std::string::npos) << bad_algo;

  const auto unknown = validation_message(
      quadratic_spec("out", "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\nstep = 3\n"));
  EXPECT_NE(unknown.find("runs[0].step: unknown key"), std::string::npos) << unknown;

  const auto typed = validation_message(
      quadratic_spec("out", "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\ncomm_period = 1.5\n"));
  EXPECT_NE(typed.find("runs[0].comm_period"), std::string::npos) << typed;

  EXPECT_NE(validation_message(quadratic_spec("out", "")).find("runs"), std::string::npos);
  EXPECT_NE(validation_message("[experiment]\nseeds = []\n").find("experiment.seeds"),
            std::string::npos);
  EXPECT_NE(validation_message("[experiment\n").find("line 1"), std::string::npos);
  const auto dup = validation_message(quadratic_spec(
      "out", "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\n[[runs]]\nname = \"a\"\n"
             "algorithm = \"dsgt\"\n"));
  EXPECT_NE(dup.find("runs[1].name"), std::string::npos) << dup;
  const auto data_on_quadratic = validation_message(
      quadratic_spec("out", "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\n") +
      "[problem.data]\nsource = \"synthetic\"\n");
  EXPECT_FALSE(data_on_quadratic.empty());
}

TEST(Spec, UnknownAlgorithmWritesNothing) {
  const auto out = scratch("unknown_algo");
  EXPECT_THROW(
      {
        const auto spec = parse_experiment_spec(
            quadratic_spec(out, "[[runs]]\nname = \"a\"\nalgorithm = \"adam\"\n"));
        run_experiment(spec);
      },
      ValidationError);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Spec, RunTimeValidationWritesNothing) {
  const auto out = scratch("minibatch_too_big");
  const std::string text =
      "[experiment]\noutput_dir = \"" + out.string() +
      "\"\ntotal_rounds = 10\n[topology]\nkind = \"complete\"\nnodes = 3\n"
      "[problem]\nmodel = \"logistic\"\n[problem.data]\nsamples_per_node = 8\nfeature_dim = 2\n"
      "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\nminibatch = 9\n";
  const auto spec = parse_experiment_spec(text);
  try {
    run_experiment(spec);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("runs[0].minibatch"), std::string::npos) << e.what();
  }
  EXPECT_FALSE(fs::exists(out));
}

TEST(Experiment, OutputsAndManifest) {
  const auto out = scratch("outputs");
  const auto spec = parse_experiment_spec(quadratic_spec(out, kFourRunsQ1));
  const auto result = run_experiment(spec);
  EXPECT_FALSE(result.diverged());
  EXPECT_EQ(result.cells.size(), 8u);

  for (const char* run : {"DSGD", "FD-DSGD", "DSGT", "FD-DSGT"}) {
    EXPECT_TRUE(fs::exists(out / run / "seed_1.csv"));
    EXPECT_TRUE(fs::exists(out / run / "seed_2.csv"));
    EXPECT_TRUE(fs::exists(out / run / "mean.csv"));
  }
  for (const char* plot : {"stationarity_gap", "consensus_violation", "optimality_gap",
                           "global_loss"}) {
    const std::string svg = slurp(out / "plots" / (std::string(plot) + ".svg"));
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    std::size_t count = 0;
    for (auto pos = svg.find("<polyline"); pos != std::string::npos;
         pos = svg.find("<polyline", pos + 1))
      ++count;
    EXPECT_EQ(count, 4u) << plot;
  }

  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(spec.source_text)));
  EXPECT_EQ(manifest["config_hash"], hash);
  EXPECT_EQ(manifest["library_version"], std::string(library_version()));

  // Every file on disk except the manifest itself is listed, with its digest.
  std::set<std::string> listed;
  for (const auto& entry : manifest["outputs"]) {
    const std::string rel = entry["path"];
    listed.insert(rel);
    char digest[17];
    std::snprintf(digest, sizeof digest, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(slurp(out / rel))));
    EXPECT_EQ(entry["fnv1a64"], digest) << rel;
  }
  for (const auto& f : fs::recursive_directory_iterator(out)) {
    if (!f.is_regular_file()) continue;
    const auto rel = fs::relative(f.path(), out).generic_string();
    if (rel != "manifest.json") EXPECT_TRUE(listed.count(rel)) << rel;
  }

  const auto summary = nlohmann::json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary["seeds"], nlohmann::json({1, 2}));
  EXPECT_EQ(summary["runs"].size(), 4u);
  EXPECT_EQ(summary["config"]["topology"]["kind"], "ring");
}

TEST(Experiment, RerunsAreByteIdentical) {
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  const std::string runs =
      "[[runs]]\nname = \"DSGT\"\nalgorithm = \"dsgt\"\n"
      "[[runs]]\nname = \"FD-DSGD\"\nalgorithm = \"dsgd\"\ncomm_period = 7\n";
  // Same spec text, so the output directory is given through the env root.
  const std::string text = quadratic_spec("out", runs, "jobs = 3\n");
  ::setenv(kOutputRootEnv, a.c_str(), 1);
  run_experiment(parse_experiment_spec(text));
  ::setenv(kOutputRootEnv, b.c_str(), 1);
  run_experiment(parse_experiment_spec(text));
  ::unsetenv(kOutputRootEnv);

  std::size_t compared = 0;
  for (const auto& f : fs::recursive_directory_iterator(a / "out")) {
    if (!f.is_regular_file()) continue;
    const auto rel = fs::relative(f.path(), a / "out");
    ASSERT_TRUE(fs::exists(b / "out" / rel)) << rel;
    EXPECT_EQ(slurp(f.path()), slurp(b / "out" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 10u);
}

TEST(Experiment, QOneVariantsCoincide) {
  const auto out = scratch("q_one");
  run_experiment(parse_experiment_spec(quadratic_spec(out, kFourRunsQ1)));
  for (const char* seed : {"seed_1.csv", "seed_2.csv"}) {
    EXPECT_EQ(slurp(out / "DSGD" / seed), slurp(out / "FD-DSGD" / seed));
    EXPECT_EQ(slurp(out / "DSGT" / seed), slurp(out / "FD-DSGT" / seed));
    EXPECT_NE(slurp(out / "DSGD" / seed), slurp(out / "DSGT" / seed));
  }
}

TEST(Experiment, FederatedVariantsNeedFewerCommunications) {
  const auto out = scratch("fd_faster");
  const std::string text =
      "[experiment]\nseeds = [0, 1]\noutput_dir = \"" + out.string() +
      "\"\ntotal_rounds = 3000\nmetric_every = 10\n"
      "[topology]\nkind = \"erdos_renyi\"\nnodes = 8\nedge_prob = 0.4\nseed = 2\n"
      "[problem]\nmodel = \"shallow_nn\"\n"
      "[problem.data]\nsamples_per_node = 100\nfeature_dim = 5\nheterogeneity = 1.0\nseed = 3\n"
      "[optimizer]\nminibatch = 10\nschedule = { kind = \"inverse_sqrt\", c = 0.05 }\n"
      "init_scale = 0.5\n"
      "[[runs]]\nname = \"DSGD\"\nalgorithm = \"dsgd\"\n"
      "[[runs]]\nname = \"DSGT\"\nalgorithm = \"dsgt\"\n"
      "[[runs]]\nname = \"FD-DSGD\"\nalgorithm = \"dsgd\"\ncomm_period = 20\n"
      "[[runs]]\nname = \"FD-DSGT\"\nalgorithm = \"dsgt\"\ncomm_period = 20\n";
  const auto result = run_experiment(parse_experiment_spec(text));
  const auto comms_to_reach = [](const TrajectoryLog& log, double level) {
    for (const auto& r : log.records)
      if (r.global_loss <= level) return r.comm_rounds;
    return -1;
  };
  for (auto [classic, fd] : {std::pair{"DSGD", "FD-DSGD"}, std::pair{"DSGT", "FD-DSGT"}}) {
    const auto& c = result.averaged.at(classic);
    const auto& f = result.averaged.at(fd);
    // Several loss levels along the classic curve.
    for (double frac : {0.25, 0.5, 1.0}) {
      const auto& rec = c.records[static_cast<std::size_t>(frac * (c.records.size() - 1))];
      const int needed = comms_to_reach(f, rec.global_loss);
      ASSERT_GE(needed, 0) << fd << " never reached " << rec.global_loss;
      EXPECT_LT(needed, rec.comm_rounds) << fd << " vs " << classic << " at " << frac;
    }
  }
}

TEST(Experiment, DivergenceKeepsPartialLogs) {
  const auto out = scratch("diverge");
  std::string text = quadratic_spec(
      out, "[[runs]]\nname = \"hot\"\nalgorithm = \"dsgd\"\n"
           "schedule = { kind = \"constant\", c = 5.0 }\n"
           "[[runs]]\nname = \"calm\"\nalgorithm = \"dsgd\"\n");
  const auto result = run_experiment(parse_experiment_spec(text));
  EXPECT_TRUE(result.diverged());
  EXPECT_TRUE(fs::exists(out / "hot" / "seed_1.csv"));
  EXPECT_FALSE(fs::exists(out / "hot" / "mean.csv"));
  EXPECT_TRUE(fs::exists(out / "calm" / "mean.csv"));
  const auto partial = parse_trajectory_csv(slurp(out / "hot" / "seed_1.csv"));
  EXPECT_FALSE(partial.records.empty());
  EXPECT_LT(partial.records.back().round, 200);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_TRUE(manifest["diverged"].get<bool>());
}

TEST(Experiment, OutputRootOverride) {
  const auto root = scratch("root");
  ::setenv(kOutputRootEnv, root.c_str(), 1);
  auto spec = parse_experiment_spec(quadratic_spec("rel/dir", kFourRunsQ1));
  EXPECT_EQ(resolve_output_dir(spec), root / "rel/dir");
  spec.output_dir = "/abs/elsewhere";
  EXPECT_EQ(resolve_output_dir(spec), fs::path("/abs/elsewhere"));
  ::unsetenv(kOutputRootEnv);
  spec.output_dir = "rel/dir";
  EXPECT_EQ(resolve_output_dir(spec), fs::path("rel/dir"));
}

TEST(Experiment, EdgeListAndCsvSources) {
  const auto dir = scratch("sources");
  fs::create_directories(dir);
  write_edge_list(dir / "g.txt", build_graph(GraphKind::path, 4));
  auto parts = generate_heterogeneous_data(1, 60, 3, 0.0, 9);
  write_csv_dataset(dir / "data.csv", parts[0], "y");
  std::ofstream(dir / "spec.toml")
      << "[experiment]\noutput_dir = \"" << (dir / "out").string()
      << "\"\ntotal_rounds = 50\n[topology]\nedge_list = \"g.txt\"\n"
         "[problem]\nmodel = \"logistic\"\n"
         "[problem.data]\nsource = \"csv\"\npath = \"data.csv\"\nlabel_column = \"y\"\n"
         "concentration = 5.0\n"
         "[[runs]]\nname = \"a\"\nalgorithm = \"dsgt\"\nminibatch = 2\n";
  const auto spec = load_experiment_spec(dir / "spec.toml");
  const auto p = build_problem(spec, 4);
  int total = 0;
  for (int i = 0; i < 4; ++i) total += p.sample_count(i);
  EXPECT_EQ(total, 60);
  const auto result = run_experiment(spec);
  EXPECT_FALSE(result.diverged());
  EXPECT_TRUE(fs::exists(dir / "out" / "a" / "mean.csv"));

  std::ofstream(dir / "missing.toml")
      << "[experiment]\ntotal_rounds = 5\n[topology]\nkind = \"ring\"\nnodes = 3\n"
         "[problem]\nmodel = \"logistic\"\n"
         "[problem.data]\nsource = \"csv\"\npath = \"nope.csv\"\n"
         "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\n";
  EXPECT_THROW(validate_experiment(load_experiment_spec(dir / "missing.toml")), IoError);
  EXPECT_THROW(load_experiment_spec(dir / "absent.toml"), IoError);
}

TEST(Sweep, NoiseFreeIsFlaggedAndFlat) {
  const auto out = scratch("sweep_flat");
  const std::string text =
      "[experiment]\nseeds = [0, 1]\noutput_dir = \"" + out.string() +
      "\"\ntotal_rounds = 400\n[topology]\nkind = \"complete\"\n"
      "[problem]\nmodel = \"quadratic\"\n"
      "[problem.quadratic]\ndimension = 4\nsigma2 = 0.0\nheterogeneity = 1.0\ncenter = 1.0\n"
      "[optimizer]\nschedule = { kind = \"constant\", c = 0.1 }\ninit_scale = 0.0\n"
      "[[runs]]\nname = \"DSGT\"\nalgorithm = \"dsgt\"\n[sweep]\nnodes = [4, 16]\n";
  const auto result = speedup_sweep(parse_experiment_spec(text));
  EXPECT_TRUE(result.noise_free);
  ASSERT_EQ(result.rows.size(), 2u);
  // Same start and same average minimizer at every N: the gap term is
  // exactly N-independent, only the small early consensus term follows the
  // per-N draw of centers.
  EXPECT_NEAR(result.rows[0].metric_mean / result.rows[1].metric_mean, 1.0, 1e-2);
  EXPECT_EQ(result.rows[0].metric_std, 0.0);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_TRUE(manifest["noise_free"].get<bool>());
  EXPECT_TRUE(fs::exists(out / "speedup.csv"));
  EXPECT_TRUE(fs::exists(out / "speedup.svg"));
}

TEST(Sweep, SingleNodeCountIsDegenerate) {
  const auto out = scratch("sweep_one");
  const std::string text =
      "[experiment]\nseeds = [3]\noutput_dir = \"" + out.string() +
      "\"\ntotal_rounds = 100\n[topology]\nkind = \"complete\"\n"
      "[problem]\nmodel = \"quadratic\"\n"
      "[[runs]]\nname = \"DSGD\"\nalgorithm = \"dsgd\"\n[sweep]\nnodes = [5]\n";
  const auto result = speedup_sweep(parse_experiment_spec(text));
  ASSERT_EQ(result.rows.size(), 1u);
  EXPECT_EQ(result.rows[0].nodes, 5);
  EXPECT_FALSE(result.slopes.at("DSGD").has_value());
  const std::string csv = slurp(out / "speedup.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(Sweep, RejectsNonQuadraticModels) {
  const std::string text =
      "[experiment]\n[topology]\nkind = \"complete\"\n[problem]\nmodel = \"logistic\"\n"
      "[[runs]]\nname = \"a\"\nalgorithm = \"dsgd\"\n[sweep]\nnodes = [2, 4]\n";
  EXPECT_THROW(speedup_sweep(parse_experiment_spec(text)), ValidationError);
}

TEST(Slope, RecoversPowerLaws) {
  const std::vector<double> n{2, 4, 8, 16};
  for (double k : {-1.0, -0.5, 0.0, 1.3}) {
    std::vector<double> y;
    for (double x : n) y.push_back(7.0 * std::pow(x, k));
    EXPECT_NEAR(log_log_slope(n, y), k, 1e-12);
  }
  EXPECT_THROW(log_log_slope({2}, {1}), ValidationError);
  EXPECT_THROW(log_log_slope({2, 4}, {1, 0}), ValidationError);
}

TEST(Plot, LogAxesDropNonPositivePoints) {
  PlotSpec plot{"t <&>", "x", "y", true, true, {{"a", {0, 1, 10, 100}, {1, -1, 0.1, 0.01}}}};
  const std::string svg = render_svg(plot);
  EXPECT_NE(svg.find("t &lt;&amp;&gt;"), std::string::npos);
  const auto start = svg.find("points=\"") + 8;
  const std::string points = svg.substr(start, svg.find('"', start) - start);
  EXPECT_EQ(std::count(points.begin(), points.end(), ','), 2);
  EXPECT_EQ(svg.substr(svg.size() - 7), "</svg>\n");
}
