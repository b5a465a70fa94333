#include "support.hpp"

#include "gravel/data_io.hpp"
#include "gravel/experiment.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

using namespace gravel;
using namespace gravel::exp;
using gravel::testing::kGowallaListing;
using gravel::testing::scratch_dir;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
  const auto at = text.find(from);
  REQUIRE(at != std::string::npos);
  return text.replace(at, from.size(), to);
}

/// Writes a synthetic dataset plus converted files; returns a config text
/// pointing at them with the given models block.
std::string prepare_run(const fs::path& root, const std::string& models) {
  io::SyntheticSpec spec;
  spec.num_users = 10;
  spec.num_items = 16;
  spec.blocks = 2;
  spec.in_block_density = 0.5;
  spec.seed = 3;
  const auto ds = io::generate_synthetic(spec);
  io::write_dataset(root / "data" / "tiny", ds);
  io::convert_for_benchmark(ds, root / "data" / "tiny");
  return "experiment:\n"
         "  data_config:\n"
         "    strategy: fixed\n"
         "    train_path: data/{0}/train_elliot.tsv\n"
         "    test_path: data/{0}/test_elliot.tsv\n"
         "  dataset: tiny\n"
         "  models:\n" +
         models;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(GRAVEL_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("reference listing parses to the documented hyperparameters") {
  const auto config = parse_config(kGowallaListing);
  CHECK(config.dataset == "gowalla");
  CHECK(config.backend == "pytorch");
  CHECK(config.train_path == "../data/{0}/train_elliot.tsv");
  REQUIRE(config.models.size() == 1);
  const auto runs = expand_grid(config.models[0]);
  REQUIRE(runs.size() == 1);
  const TrainConfig& t = runs[0].train;
  CHECK(t.lr == 0.001);
  CHECK(t.epochs == 20);
  CHECK(t.factors == 128);
  CHECK(t.batch_size == 128);
  CHECK(t.n_layers == 4);
  CHECK(t.aggr == "sum");
  CHECK(t.channels == 128);
  CHECK(t.max_steps == 2000);
  CHECK(t.neigh == std::vector<Index>{16, 16, 16, 16});
  CHECK(t.seed == 42);
  CHECK(runs[0].meta.verbose);
  CHECK_FALSE(runs[0].meta.save_weights);
  CHECK(t.validation_rate == 20);
  CHECK(t.validation_metric.str() == "Recall@20");
}

TEST_CASE("list-valued hyperparameters expand into a grid") {
  const auto text = replace(kGowallaListing, "lr: 0.001", "lr: [0.001, 0.01]");
  const auto runs = expand_grid(parse_config(text).models[0]);
  REQUIRE(runs.size() == 2);
  CHECK(runs[0].train.lr == 0.001);
  CHECK(runs[1].train.lr == 0.01);
  CHECK(runs[0].label == "ContextGNN_grid0");

  const auto two = replace(text, "neigh: (16,16,16,16)", "neigh: [(16,16,16,16), (8,8,8,8)]");
  const auto grid = expand_grid(parse_config(two).models[0]);
  REQUIRE(grid.size() == 4);
  CHECK(grid[1].train.neigh == std::vector<Index>{8, 8, 8, 8});
  CHECK(grid[2].train.lr == 0.01);
}

TEST_CASE("config errors carry line numbers") {
  CHECK(error_of(replace(kGowallaListing, "neigh: (16,16,16,16)", "neigh: (16,16,16)")).find("neigh has 3") !=
        std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "external.ContextGNN:", "external.Mystery:")).find("line 9:") !=
        std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "neigh: (16,16,16,16)", "neigh: (16,16")).find("line 25:") !=
        std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "seed: 42", "sede: 42")).find("line 26: unknown key 'sede'") !=
        std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "strategy: fixed", "strategy: random")).find("line 4:") !=
        std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "epochs: 20", "epochs: twenty")).find("line 18:") != std::string::npos);
  CHECK(error_of(replace(kGowallaListing, "factors: 128", "factors: 64")).find("must equal channels") !=
        std::string::npos);
  CHECK_FALSE(error_of("experiment:\n  dataset: x\n   bad: indent\n").empty());
}

TEST_CASE("render and parse are inverse") {
  const auto config = parse_config(kGowallaListing);
  const auto text = render_config(config);
  CHECK(parse_config(text) == config);
  CHECK(render_config(parse_config(text)) == text);

  auto richer = replace(kGowallaListing, "lr: 0.001", "lr: [0.001, 0.01]  # sweep");
  richer += "    ItemFilter:\n      smoothing: [0.3, 0.5]\n    BPRMF:\n      factors: 64\n";
  const auto c2 = parse_config(richer);
  CHECK(c2.models.size() == 3);
  CHECK(parse_config(render_config(c2)) == c2);
}

TEST_CASE("yaml subset handles sequences, quotes and comments") {
  const auto root = parse_yaml("a:\n  - 1\n  - \"two # not a comment\"\nb: [x, (1,2)]  # trailing\n");
  REQUIRE(root.find("a") != nullptr);
  CHECK(root.find("a")->items.size() == 2);
  CHECK(root.find("a")->items[1].scalar == "two # not a comment");
  CHECK(root.find("b")->items[1].kind == YamlNode::Kind::Tuple);
  CHECK_THROWS_AS(parse_yaml("a: 1\na: 2\n"), ConfigError);
}

TEST_CASE("results file naming and path templates") {
  const std::regex pattern(R"(rec_cutoff_20_relthreshold_0_\d{8}_\d{6}\.tsv)");
  CHECK(std::regex_match(results_file_name(20, current_timestamp()), pattern));
  CHECK(resolve_path_template("../data/{0}/train_elliot.tsv", "yelp") == "../data/yelp/train_elliot.tsv");
}

TEST_CASE("report table marks best and runner-up and fills gaps") {
  ResultsFile gowalla{"g", "gowalla", {{"A", 0.2, 0.1}, {"B", 0.1, 0.3}}};
  ResultsFile yelp{"y", "yelp", {{"B", 0.05, 0.04}}};
  const auto table = report_table({gowalla, yelp});
  CHECK(table.find("| Model | gowalla Recall | gowalla nDCG | yelp Recall | yelp nDCG |") != std::string::npos);
  CHECK(table.find("| A | **0.2000** | <u>0.1000</u> | --- | --- |") != std::string::npos);
  CHECK(table.find("| B | <u>0.1000</u> | **0.3000** | **0.0500** | **0.0400** |") != std::string::npos);

  ResultsFile published{"p", "gowalla", {{"ContextGNN", 0.1712, 0.1285}}};
  CHECK(report_table({published}).find("| ContextGNN | **0.1712** | **0.1285** |") != std::string::npos);
}

TEST_CASE("training-free run writes one row and no training log") {
  const auto root = scratch_dir("run_filter");
  const auto text = prepare_run(root, "    ItemFilter:\n      smoothing: 0.5\n");
  RunOptions opts;
  opts.config_dir = root;
  opts.results_root = root / "results";
  opts.timestamp = "20250101_120000";
  const auto summary = run_experiment(parse_config(text), opts);
  CHECK(summary.rows.size() == 1);
  CHECK(summary.logs.empty());
  CHECK(summary.results_file == root / "results" / "tiny" / "performance" /
                                    "rec_cutoff_20_relthreshold_0_20250101_120000.tsv");
  const auto back = read_results(summary.results_file);
  CHECK(back.dataset == "tiny");
  REQUIRE(back.rows.size() == 1);
  CHECK(back.rows[0].model == "ItemFilter");
  CHECK(back.rows[0].recall == doctest::Approx(summary.rows[0].recall).epsilon(1e-6));
}

TEST_CASE("end-to-end runs are reproducible") {
  const std::string models =
      "    BPRMF:\n"
      "      meta:\n"
      "        save_weights: True\n"
      "        validation_rate: 2\n"
      "      lr: 0.01\n"
      "      epochs: 4\n"
      "      factors: 8\n"
      "      batch_size: 16\n"
      "    external.ContextGNN:\n"
      "      meta:\n"
      "        save_weights: True\n"
      "        validation_rate: 2\n"
      "      lr: 0.01\n"
      "      epochs: 4\n"
      "      factors: 8\n"
      "      channels: 8\n"
      "      n_layers: 2\n"
      "      neigh: (4,4)\n"
      "      batch_size: 16\n";
  std::vector<std::string> results, weights;
  for (const char* name : {"rep_a", "rep_b"}) {
    const auto root = scratch_dir(name);
    RunOptions opts;
    opts.config_dir = root;
    opts.results_root = root / "results";
    const auto summary = run_experiment(parse_config(prepare_run(root, models)), opts);
    CHECK(summary.rows.size() == 2);
    CHECK(summary.logs.size() == 2);
    REQUIRE(summary.checkpoints.size() == 2);
    results.push_back(read_text(summary.results_file));
    weights.push_back(read_text(summary.checkpoints[0]) + read_text(summary.checkpoints[1]));
  }
  CHECK(results[0] == results[1]);
  CHECK(weights[0] == weights[1]);

  const auto root = scratch_dir("rep_filter");
  RunOptions opts;
  opts.config_dir = root;
  opts.results_root = root / "results";
  opts.model = "BPRMF";
  const auto only = run_experiment(parse_config(prepare_run(root, models)), opts);
  CHECK(only.rows.size() == 1);
  opts.model = "Nope";
  CHECK_THROWS_AS(run_experiment(parse_config(prepare_run(root, models)), opts), ConfigError);
}

TEST_CASE("cli exit codes follow the error category") {
  const auto root = scratch_dir("cli");
  const std::string text = prepare_run(root, "    ItemFilter:\n      smoothing: 0.5\n");
  {
    std::ofstream(root / "ok.yml") << text;
    std::ofstream(root / "bad.yml") << replace(text, "strategy: fixed", "strategy: nope");
    std::ofstream(root / "missing.yml") << replace(text, "dataset: tiny", "dataset: absent");
  }
  const std::string results = " --results-root '" + (root / "results").string() + "'";
  CHECK(run_cli("run --config '" + (root / "ok.yml").string() + "'" + results) == 0);
  CHECK(run_cli("run --config '" + (root / "bad.yml").string() + "'" + results) == 2);
  CHECK(run_cli("run --config '" + (root / "missing.yml").string() + "'" + results) == 3);
  CHECK(run_cli("run") == 2);
  CHECK(run_cli("report --results '" + (root / "results" / "*" / "performance" / "*.tsv").string() + "'") == 0);
  CHECK(run_cli("report --results '" + (root / "nothing*.tsv").string() + "'") == 3);
  CHECK(run_cli("synth --users 5 --items 5 --seed 1 --out '" + (root / "s").string() + "'") == 0);
  CHECK(fs::exists(root / "s" / "train.txt"));
  CHECK(run_cli("convert --dataset '" + (root / "s").string() + "'") == 0);
  CHECK(fs::exists(root / "s" / "target_table.tsv"));
  CHECK(run_cli("synth --users 5 --items 5 --seed 1 --in-density 2 --out '" + (root / "t").string() + "'") == 2);
}
