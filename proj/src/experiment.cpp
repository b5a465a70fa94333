#include "gravel/experiment.hpp"

#include "gravel/data_io.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

namespace gravel::exp {

std::unique_ptr<Recommender> make_model(const ModelRun& run, std::shared_ptr<const BipartiteGraph> train_graph) {
  const TrainConfig& t = run.train;
  if (run.tag == kContextGNNTag) {
    return std::make_unique<ContextGNNModel>(std::move(train_graph), t.channels, t.neigh, t.seed, run.routing);
  }
  if (run.tag == kBPRMFTag) {
    return std::make_unique<MFBPRModel>(train_graph->num_users(), train_graph->num_items(), t.factors, t.seed);
  }
  if (run.tag == kLightGCNTag) {
    return std::make_unique<LightGCNModel>(std::move(train_graph), t.factors, static_cast<int>(t.n_layers), t.seed);
  }
  if (run.tag == kItemFilterTag) return std::make_unique<ItemFilterModel>(std::move(train_graph), run.smoothing);
  throw ConfigError(fmt::format("unknown model tag '{}'", run.tag));
}

void warm_start_item_matrix(ContextGNNModel& model, const InteractionDataset& dataset, const TrainConfig& config) {
  TrainConfig mf_config = config;
  mf_config.seed = derive_seed(config.seed, 0x3a3aULL);
  MFBPRModel mf(dataset.num_users, dataset.num_items, config.channels, mf_config.seed);
  train(mf, dataset, mf_config);
  model.params().item_matrix.value = mf.item_factors().value;
}

std::string results_file_name(Index cutoff, const std::string& stamp) {
  return fmt::format("rec_cutoff_{}_relthreshold_0_{}.tsv", cutoff, stamp);
}

std::string current_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm local{};
  localtime_r(&now, &local);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d_%H%M%S", &local);
  return buf;
}

std::string resolve_path_template(const std::string& templ, const std::string& dataset) {
  std::string out;
  for (std::size_t k = 0; k < templ.size();) {
    if (templ.compare(k, 3, "{0}") == 0) {
      out += dataset;
      k += 3;
    } else {
      out += templ[k++];
    }
  }
  return out;
}

fs::path results_root_from_env(const fs::path& fallback) {
  const char* env = std::getenv("GRAVEL_RESULTS_ROOT");
  return env && *env ? fs::path(env) : fallback;
}

void write_results(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "model\tRecall\tnDCG\n";
  for (const ResultRow& r : rows) fmt::print(out, "{}\t{:.6f}\t{:.6f}\n", r.model, r.recall, r.ndcg);
}

namespace {

fs::path resolve_data_path(const std::string& templ, const std::string& dataset, const fs::path& base) {
  const fs::path p = resolve_path_template(templ, dataset);
  return p.is_absolute() ? p : base / p;
}

bool selects(const std::optional<std::string>& filter, const std::string& tag) {
  return !filter || *filter == tag || *filter == model_display_name(tag);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure(fmt::format("{}: cannot open for writing", path.string()));
  return out;
}

std::string partial_note(const std::exception& e, const RunSummary& summary) {
  return fmt::format("{} (partial results, {} rows, written to {})", e.what(), summary.rows.size(),
                     summary.results_file.string());
}

struct Trained {
  std::unique_ptr<Recommender> model;
  Real selection = 0.0;
};

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const std::string dataset_name = options.dataset.value_or(config.dataset);
  const fs::path train_path = resolve_data_path(config.train_path, dataset_name, options.config_dir);
  const fs::path test_path = resolve_data_path(config.test_path, dataset_name, options.config_dir);
  std::optional<fs::path> val_path;
  if (config.validation_path) val_path = resolve_data_path(*config.validation_path, dataset_name, options.config_dir);

  const InteractionDataset dataset = io::read_interaction_split(train_path, test_path, val_path);
  const auto graph = std::make_shared<const BipartiteGraph>(build_graph(dataset, Split::Train));
  const EvalSplit selection_split = dataset.val_edges ? EvalSplit::Validation : EvalSplit::Test;

  const bool any = std::any_of(config.models.begin(), config.models.end(),
                               [&](const ModelSpec& m) { return selects(options.model, m.tag); });
  if (!any) throw ConfigError(fmt::format("no model named '{}' in the config", options.model.value_or("")));

  const fs::path out_root = options.results_root / dataset_name;
  const fs::path perf_dir = out_root / "performance";
  const fs::path logs_dir = out_root / "logs";
  const fs::path weights_dir = out_root / "weights";
  fs::create_directories(perf_dir);
  fs::create_directories(logs_dir);

  {
    auto note = open_out(logs_dir / "experiment.txt");
    fmt::print(note, "dataset: {}\nbackend: {} (accepted and ignored; models run natively)\n", dataset_name,
               config.backend);
  }

  RunSummary summary;
  summary.results_file =
      perf_dir / results_file_name(config.top_k, options.timestamp.value_or(current_timestamp()));
  auto write_rows = [&] {
    auto out = open_out(summary.results_file);
    write_results(out, summary.rows);
  };
  try {
  for (const ModelSpec& spec : config.models) {
    if (!selects(options.model, spec.tag)) continue;
    std::optional<Trained> best;
    for (const ModelRun& run : expand_grid(spec)) {
      Trained current{make_model(run, graph), 0.0};
      if (current.model->trainable()) {
        if (run.warm_start_q) {
          warm_start_item_matrix(static_cast<ContextGNNModel&>(*current.model), dataset, run.train);
        }
        const TrainResult result = train(*current.model, dataset, run.train);
        current.selection = result.best_metric.value_or(0.0);
        const fs::path log_path = logs_dir / fmt::format("{}.tsv", run.label);
        auto log = open_out(log_path);
        write_train_log(log, result);
        summary.logs.push_back(log_path);
      } else {
        const MetricReport report =
            evaluate(*current.model, dataset, run.train.validation_metric.cutoff, selection_split);
        current.selection = run.train.validation_metric.kind == MetricKind::Recall ? report.recall : report.ndcg;
      }
      if (run.meta.verbose) {
        fmt::print("{} {}: {} = {:.6f}\n", dataset_name, run.label, run.train.validation_metric.str(),
                   current.selection);
      }
      if (!best || current.selection > best->selection) best = std::move(current);
    }

    const std::string display = model_display_name(spec.tag);
    const MetricReport test_report = evaluate(*best->model, dataset, config.top_k, EvalSplit::Test);
    summary.rows.push_back({display, test_report.recall, test_report.ndcg});
    if (options.per_user) {
      auto out = open_out(logs_dir / fmt::format("{}_per_user.tsv", display));
      write_per_user(out, test_report);
    }
    if (spec.meta.save_weights && best->model->trainable()) {
      fs::create_directories(weights_dir);
      const fs::path path = weights_dir / fmt::format("{}.grvl", display);
      const auto frozen = std::as_const(*best->model).frozen_parameters();
      save_checkpoint(path, frozen);
      summary.checkpoints.push_back(path);
    }
  }
  } catch (const ConfigError& e) {
    write_rows();
    throw ConfigError(partial_note(e, summary));
  } catch (const DataError& e) {
    write_rows();
    throw DataError(partial_note(e, summary));
  } catch (const std::exception& e) {
    write_rows();
    throw RuntimeFailure(partial_note(e, summary));
  }
  write_rows();
  return summary;
}

ResultsFile read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("{}: cannot open results file", path.string()));
  ResultsFile file;
  file.path = path;
  const fs::path parent = path.parent_path();
  file.dataset = parent.filename() == "performance" ? parent.parent_path().filename().string()
                                                     : parent.filename().string();
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (number == 1) {
      if (line != "model\tRecall\tnDCG") {
        throw DataError(fmt::format("{}:1: expected header 'model<TAB>Recall<TAB>nDCG'", path.string()));
      }
      continue;
    }
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string model, recall, ndcg, extra;
    if (!std::getline(fields, model, '\t') || !std::getline(fields, recall, '\t') ||
        !std::getline(fields, ndcg, '\t') || std::getline(fields, extra, '\t')) {
      throw DataError(fmt::format("{}:{}: expected 3 tab-separated fields", path.string(), number));
    }
    try {
      file.rows.push_back({model, std::stod(recall), std::stod(ndcg)});
    } catch (const std::exception&) {
      throw DataError(fmt::format("{}:{}: metric values must be numbers", path.string(), number));
    }
  }
  if (number == 0) throw DataError(fmt::format("{}:1: empty results file", path.string()));
  return file;
}

std::string report_table(const std::vector<ResultsFile>& results) {
  std::vector<std::string> datasets;
  std::vector<std::string> models;
  // Later files override earlier ones for the same (dataset, model).
  std::map<std::pair<std::string, std::string>, ResultRow> cells;
  for (const ResultsFile& file : results) {
    if (std::find(datasets.begin(), datasets.end(), file.dataset) == datasets.end()) datasets.push_back(file.dataset);
    for (const ResultRow& row : file.rows) {
      if (std::find(models.begin(), models.end(), row.model) == models.end()) models.push_back(row.model);
      cells[{file.dataset, row.model}] = row;
    }
  }

  std::string out = "| Model |";
  std::string rule = "|---|";
  for (const auto& ds : datasets) {
    out += fmt::format(" {} Recall | {} nDCG |", ds, ds);
    rule += "---|---|";
  }
  out += "\n" + rule + "\n";

  // Rank on the printed value so ties in the table are ties in emphasis.
  auto rounded = [](Real v) { return fmt::format("{:.4f}", v); };
  std::map<std::pair<std::string, int>, std::vector<std::string>> ranked;
  for (const auto& ds : datasets) {
    for (int col = 0; col < 2; ++col) {
      std::vector<std::string> values;
      for (const auto& m : models) {
        const auto it = cells.find({ds, m});
        if (it != cells.end()) values.push_back(rounded(col == 0 ? it->second.recall : it->second.ndcg));
      }
      std::sort(values.begin(), values.end(),
                [](const std::string& a, const std::string& b) { return std::stod(a) > std::stod(b); });
      values.erase(std::unique(values.begin(), values.end()), values.end());
      ranked[{ds, col}] = std::move(values);
    }
  }

  for (const auto& m : models) {
    out += fmt::format("| {} |", m);
    for (const auto& ds : datasets) {
      const auto it = cells.find({ds, m});
      for (int col = 0; col < 2; ++col) {
        if (it == cells.end()) {
          out += " --- |";
          continue;
        }
        const std::string text = rounded(col == 0 ? it->second.recall : it->second.ndcg);
        const auto& order = ranked[{ds, col}];
        if (!order.empty() && text == order[0]) {
          out += fmt::format(" **{}** |", text);
        } else if (order.size() > 1 && text == order[1]) {
          out += fmt::format(" <u>{}</u> |", text);
        } else {
          out += fmt::format(" {} |", text);
        }
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace gravel::exp
