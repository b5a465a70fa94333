#pragma once

#include "gravel/eval.hpp"
#include "gravel/models.hpp"
#include "gravel/training.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gravel::exp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// YAML subset: block mappings, block sequences ("- x"), scalars, flow lists
// ("[a, b]") and tuples ("(16,16)"). Comments start with '#'.
// ---------------------------------------------------------------------------

struct YamlNode {
  enum class Kind { Scalar, Map, List, Tuple };
  Kind kind = Kind::Scalar;
  std::string scalar;
  std::vector<std::pair<std::string, YamlNode>> entries;  // Map
  std::vector<YamlNode> items;                            // List / Tuple
  int line = 0;

  const YamlNode* find(std::string_view key) const;
};

YamlNode parse_yaml(std::string_view text);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

inline const char* const kContextGNNTag = "external.ContextGNN";
inline const char* const kBPRMFTag = "BPRMF";
inline const char* const kLightGCNTag = "LightGCN";
inline const char* const kItemFilterTag = "ItemFilter";

struct MetaBlock {
  std::string hyper_opt_alg = "grid";
  bool verbose = false;
  bool save_weights = false;
  Index validation_rate = 20;
  std::string validation_metric = "Recall@20";
  bool restore = false;

  friend bool operator==(const MetaBlock&, const MetaBlock&) = default;
};

/// Raw hyperparameter value: a scalar, a tuple like "(16,16)", or a grid
/// (list of either).
struct HyperValue {
  std::vector<std::string> choices;  // one entry unless the config listed a grid
  bool grid = false;
  int line = 0;

  friend bool operator==(const HyperValue& a, const HyperValue& b) {
    return a.choices == b.choices && a.grid == b.grid;
  }
};

struct ModelSpec {
  std::string tag;
  MetaBlock meta;
  std::vector<std::pair<std::string, HyperValue>> hyper;  // declaration order
  int line = 0;

  friend bool operator==(const ModelSpec& a, const ModelSpec& b) {
    return a.tag == b.tag && a.meta == b.meta && a.hyper == b.hyper;
  }
};

struct ExperimentConfig {
  std::string backend = "pytorch";
  std::string strategy = "fixed";
  std::string train_path;
  std::string test_path;
  std::optional<std::string> validation_path;
  std::string dataset;
  Index top_k = 20;
  std::vector<ModelSpec> models;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// One concrete grid point of a model.
struct ModelRun {
  std::string tag;
  std::string label;  // display name plus grid index when the grid has > 1 point
  MetaBlock meta;
  TrainConfig train;
  Real smoothing = 0.5;
  Routing routing = Routing::Sampled;
  bool warm_start_q = false;
};

/// Parses and validates. Throws ConfigError with "line N: ..." on unknown
/// keys or model tags, malformed tuples, and TrainConfig violations.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const fs::path& path);

/// Canonical text form; parse_config(render_config(c)) == c.
std::string render_config(const ExperimentConfig& config);

/// Cartesian product of grid-valued hyperparameters in declaration order.
std::vector<ModelRun> expand_grid(const ModelSpec& spec);

/// Display name of a tag ("external.ContextGNN" -> "ContextGNN").
std::string model_display_name(const std::string& tag);

std::unique_ptr<Recommender> make_model(const ModelRun& run, std::shared_ptr<const BipartiteGraph> train_graph);

/// Trains an MF-BPR model with the run's settings and copies its item factors
/// into the ContextGNN two-tower matrix.
void warm_start_item_matrix(ContextGNNModel& model, const InteractionDataset& dataset, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Running and reporting
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string model;
  Real recall = 0.0;
  Real ndcg = 0.0;
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct RunOptions {
  std::optional<std::string> dataset;  // overrides config.dataset
  std::optional<std::string> model;    // restrict to one tag or display name
  fs::path config_dir = ".";           // base for relative data paths
  fs::path results_root = "results";
  std::optional<std::string> timestamp;  // YYYYMMDD_HHMMSS; now() when absent
  bool per_user = false;
};

struct RunSummary {
  fs::path results_file;
  std::vector<ResultRow> rows;
  std::vector<fs::path> logs;
  std::vector<fs::path> checkpoints;
};

/// `rec_cutoff_<K>_relthreshold_0_<stamp>.tsv`.
std::string results_file_name(Index cutoff, const std::string& stamp);
std::string current_timestamp();
/// Resolves "{0}" placeholders in a data path template.
std::string resolve_path_template(const std::string& templ, const std::string& dataset);

/// results_root from GRAVEL_RESULTS_ROOT when set, otherwise `fallback`.
fs::path results_root_from_env(const fs::path& fallback);

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options);

void write_results(std::ostream& out, const std::vector<ResultRow>& rows);

struct ResultsFile {
  fs::path path;
  std::string dataset;
  std::vector<ResultRow> rows;
};

/// Reads a results file; the dataset name comes from the
/// `<dataset>/performance/<file>` layout.
ResultsFile read_results(const fs::path& path);

/// Markdown table of models x (Recall, nDCG) per dataset with the best value
/// per column in bold, the runner-up underlined and missing cells as "---".
std::string report_table(const std::vector<ResultsFile>& results);

}  // namespace gravel::exp
