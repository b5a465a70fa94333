// gravel: command-line front end for dataset prep, experiment runs and reports.

#include "gravel/data_io.hpp"
#include "gravel/experiment.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <glob.h>

#include <cstdio>
#include <iostream>

namespace {

namespace fs = std::filesystem;
using namespace gravel;

std::vector<fs::path> expand_glob(const std::string& pattern) {
  glob_t matches{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &matches);
  std::vector<fs::path> out;
  if (rc == 0) {
    for (std::size_t k = 0; k < matches.gl_pathc; ++k) out.emplace_back(matches.gl_pathv[k]);
  }
  globfree(&matches);
  if (rc == GLOB_NOMATCH) throw DataError(fmt::format("no results file matches '{}'", pattern));
  if (rc != 0) throw RuntimeFailure(fmt::format("glob failed for '{}'", pattern));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gravel: graph recommender training and benchmarking"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run every model in an experiment config");
  std::string config_path;
  std::optional<std::string> dataset_override;
  std::optional<std::string> model_override;
  std::string results_root = "results";
  std::optional<std::string> stamp;
  bool per_user = false;
  run->add_option("--config", config_path, "Experiment YAML")->required();
  run->add_option("--dataset", dataset_override, "Dataset name substituted into {0}");
  run->add_option("--model", model_override, "Only run this model tag or name");
  run->add_option("--results-root", results_root, "Output root (GRAVEL_RESULTS_ROOT wins)");
  run->add_option("--timestamp", stamp, "Fixed YYYYMMDD_HHMMSS stamp for the results file");
  run->add_flag("--per-user", per_user, "Also write per-user metrics");

  auto* convert = app.add_subcommand("convert", "Write benchmark tsv files next to a dataset");
  std::string convert_dir;
  convert->add_option("--dataset", convert_dir, "Dataset directory")->required();

  auto* report = app.add_subcommand("report", "Render results files as a markdown table");
  std::vector<std::string> patterns;
  report->add_option("--results", patterns, "Glob(s) of results files")->required();

  auto* synth = app.add_subcommand("synth", "Generate a planted-block synthetic dataset");
  io::SyntheticSpec spec;
  std::string synth_out;
  synth->add_option("--users", spec.num_users)->required();
  synth->add_option("--items", spec.num_items)->required();
  synth->add_option("--seed", spec.seed)->required();
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--blocks", spec.blocks, "Number of planted blocks")->capture_default_str();
  synth->add_option("--in-density", spec.in_block_density)->capture_default_str();
  synth->add_option("--cross-density", spec.cross_density)->capture_default_str();
  synth->add_option("--test-fraction", spec.test_fraction)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      const auto config = exp::load_config(config_path);
      exp::RunOptions options;
      options.dataset = dataset_override;
      options.model = model_override;
      options.config_dir = fs::absolute(config_path).parent_path();
      options.results_root = exp::results_root_from_env(results_root);
      options.timestamp = stamp;
      options.per_user = per_user;
      const auto summary = exp::run_experiment(config, options);
      for (const auto& row : summary.rows) {
        fmt::print("{}\tRecall@{}={:.6f}\tnDCG@{}={:.6f}\n", row.model, config.top_k, row.recall, config.top_k,
                   row.ndcg);
      }
      fmt::print("results: {}\n", summary.results_file.string());
    } else if (*convert) {
      const auto dataset = io::read_dataset(convert_dir);
      for (const auto& path : io::convert_for_benchmark(dataset, convert_dir)) fmt::print("{}\n", path.string());
    } else if (*report) {
      std::vector<exp::ResultsFile> files;
      for (const auto& pattern : patterns) {
        for (const auto& path : expand_glob(pattern)) files.push_back(exp::read_results(path));
      }
      fmt::print("{}", exp::report_table(files));
    } else if (*synth) {
      const auto dataset = io::generate_synthetic(spec);
      io::write_dataset(synth_out, dataset);
      const auto stats = dataset_stats(dataset);
      fmt::print("users {} items {} interactions {} sparsity {}\n", stats.users, stats.items,
                 stats.interactions, stats.sparsity_text());
    }
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 2;
  } catch (const DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 4;
  }
  return 0;
}
