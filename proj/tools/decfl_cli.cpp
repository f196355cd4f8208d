// decfl: run, sweep and validate experiment specs; inspect graphs.
//
// Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "decfl/errors.hpp"
#include "decfl/harness.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kDivergence = 2, kIo = 3 };

void print_progress(std::string_view line) { std::cerr << line << '\n'; }

int cmd_run(const std::string& spec_path, bool quiet) {
  const auto spec = decfl::load_experiment_spec(spec_path);
  const auto result = decfl::run_experiment(spec, quiet ? decfl::ProgressFn{} : print_progress);
  std::cout << "wrote " << result.outputs.size() << " files to " << result.output_dir.string()
            << '\n';
  if (result.diverged()) {
    for (const auto& c : result.cells)
      if (c.diverged)
        std::cerr << "divergence: " << c.run << " seed " << c.seed << " at round "
                  << c.diverged_at << ": " << c.error << '\n';
    return kDivergence;
  }
  return kOk;
}

int cmd_sweep(const std::string& spec_path, bool quiet) {
  const auto spec = decfl::load_experiment_spec(spec_path);
  const auto result = decfl::speedup_sweep(spec, quiet ? decfl::ProgressFn{} : print_progress);
  std::printf("%-16s %6s %6s %14s %14s\n", "run", "N", "seeds", "metric", "std");
  for (const auto& row : result.rows)
    std::printf("%-16s %6d %6d %14.6e %14.6e\n", row.run.c_str(), row.nodes, row.seeds,
                row.metric_mean, row.metric_std);
  for (const auto& [name, slope] : result.slopes) {
    if (slope)
      std::printf("%s: log-log slope %.4f\n", name.c_str(), *slope);
    else
      std::printf("%s: log-log slope n/a (fewer than two node counts)\n", name.c_str());
  }
  if (result.noise_free)
    std::printf("note: sigma2 = 0, so there is no stochastic term and no speedup in N is "
                "expected\n");
  std::cout << "wrote " << result.outputs.size() << " files to " << result.output_dir.string()
            << '\n';
  return result.diverged ? kDivergence : kOk;
}

int cmd_validate(const std::string& spec_path) {
  const auto spec = decfl::load_experiment_spec(spec_path);
  decfl::validate_experiment(spec);
  std::cout << spec_path << ": ok (" << spec.runs.size() << " runs, " << spec.seeds.size()
            << " seeds, T=" << spec.total_rounds << ")\n";
  return kOk;
}

int cmd_graph_info(const std::string& path) {
  const auto g = decfl::read_edge_list(path);
  const bool connected = g.is_connected();
  std::cout << "nodes: " << g.node_count() << '\n'
            << "edges: " << g.edges().size() << '\n'
            << "connected: " << (connected ? "yes" : "no") << '\n';
  if (!connected) {
    std::cout << "lambda2: n/a (Metropolis weights need a connected graph)\n";
    return kValidation;
  }
  const auto w = decfl::metropolis_weights(g);
  std::printf("lambda2: %.12g\n", w.lambda2);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized federated learning simulator"};
  app.set_version_flag("--version", std::string(decfl::library_version()));
  app.require_subcommand(1);

  std::string spec_path, edge_path;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run every (run, seed) cell of an experiment spec");
  run->add_option("spec", spec_path, "Experiment TOML file")->required();
  run->add_flag("-q,--quiet", quiet, "Suppress progress lines");
  auto* sweep = app.add_subcommand("sweep", "Node-count sweep on a quadratic spec");
  sweep->add_option("spec", spec_path, "Experiment TOML file")->required();
  sweep->add_flag("-q,--quiet", quiet, "Suppress progress lines");
  auto* validate = app.add_subcommand("validate", "Parse and check a spec without running it");
  validate->add_option("spec", spec_path, "Experiment TOML file")->required();
  auto* info = app.add_subcommand("graph-info", "Node count, connectivity and lambda2");
  info->add_option("edgelist", edge_path, "Edge list file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*run) return cmd_run(spec_path, quiet);
    if (*sweep) return cmd_sweep(spec_path, quiet);
    if (*validate) return cmd_validate(spec_path);
    return cmd_graph_info(edge_path);
  } catch (const decfl::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const decfl::DivergenceError& e) {
    std::cerr << "divergence at round " << e.round() << ": " << e.what() << '\n';
    return kDivergence;
  } catch (const decfl::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
}
