#include "gravel/training.hpp"

#include "gravel/eval.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <unordered_set>

namespace gravel {

MetricTag MetricTag::parse(const std::string& text) {
  const auto at = text.find('@');
  if (at == std::string::npos) throw ConfigError(fmt::format("metric '{}' must look like Recall@20", text));
  const std::string name = text.substr(0, at);
  MetricTag tag;
  if (name == "Recall") {
    tag.kind = MetricKind::Recall;
  } else if (name == "nDCG") {
    tag.kind = MetricKind::NDCG;
  } else {
    throw ConfigError(fmt::format("unknown metric '{}' (expected Recall or nDCG)", name));
  }
  try {
    std::size_t used = 0;
    tag.cutoff = std::stoll(text.substr(at + 1), &used);
    if (used != text.size() - at - 1 || tag.cutoff < 1) throw std::invalid_argument("cutoff");
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("metric '{}' has an invalid cutoff", text));
  }
  return tag;
}

std::string MetricTag::str() const {
  return fmt::format("{}@{}", kind == MetricKind::Recall ? "Recall" : "nDCG", cutoff);
}

void TrainConfig::validate() const {
  auto positive = [](Index value, const char* key) {
    if (value < 1) throw ConfigError(fmt::format("{} must be >= 1, got {}", key, value));
  };
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError(fmt::format("lr must be > 0, got {}", lr));
  positive(epochs, "epochs");
  positive(batch_size, "batch_size");
  positive(max_steps, "max_steps");
  positive(validation_rate, "validation_rate");
  positive(factors, "factors");
  positive(channels, "channels");
  positive(n_layers, "n_layers");
  if (aggr != "sum") throw ConfigError(fmt::format("aggr '{}' is not supported (only sum)", aggr));
  if (static_cast<Index>(neigh.size()) != n_layers) {
    throw ConfigError(fmt::format("neigh has {} entries but n_layers is {}", neigh.size(), n_layers));
  }
  for (Index cap : neigh) positive(cap, "every neigh entry");
}

std::vector<Index> sample_negatives(const BipartiteGraph& graph, Index user, Index count, std::mt19937_64& rng) {
  const auto positives = graph.items_of(user);
  const Index n_items = graph.num_items();
  const Index available = n_items - static_cast<Index>(positives.size());
  if (available < count) {
    throw DataError(fmt::format("user {} has {} non-interacted items, {} negatives requested", user, available, count));
  }
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(count));
  if (2 * static_cast<Index>(positives.size()) < n_items && count * 4 < available) {
    while (static_cast<Index>(out.size()) < count) {
      const auto item = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(n_items)));
      if (std::binary_search(positives.begin(), positives.end(), item)) continue;
      if (std::find(out.begin(), out.end(), item) != out.end()) continue;
      out.push_back(item);
    }
    return out;
  }
  std::vector<Index> candidates;
  candidates.reserve(static_cast<std::size_t>(available));
  for (Index i = 0; i < n_items; ++i) {
    if (!std::binary_search(positives.begin(), positives.end(), i)) candidates.push_back(i);
  }
  for (Index s = 0; s < count; ++s) {
    const auto j = s + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(available - s)));
    std::swap(candidates[static_cast<std::size_t>(s)], candidates[static_cast<std::size_t>(j)]);
    out.push_back(candidates[static_cast<std::size_t>(s)]);
  }
  return out;
}

Real bpr_loss(std::span<const Real> pos_scores, std::span<const Real> neg_scores) {
  if (pos_scores.size() != neg_scores.size()) throw std::invalid_argument("bpr_loss: length mismatch");
  if (pos_scores.empty()) throw std::invalid_argument("bpr_loss: empty batch");
  Real total = 0.0;
  for (std::size_t i = 0; i < pos_scores.size(); ++i) total += nn::neg_log_sigmoid(pos_scores[i] - neg_scores[i]);
  return total / static_cast<Real>(pos_scores.size());
}

void adam_step(nn::ParamTensor& param, AdamState& state, const AdamOptions& options) {
  if (state.m.size() == 0) {
    state.m = Matrix::Zero(param.rows(), param.cols());
    state.v = Matrix::Zero(param.rows(), param.cols());
  }
  if (state.m.rows() != param.rows() || state.m.cols() != param.cols()) {
    throw std::invalid_argument(fmt::format("Adam state shape mismatch for '{}'", param.name));
  }
  if (!param.grad.allFinite()) {
    for (Index r = 0; r < param.rows(); ++r) {
      for (Index c = 0; c < param.cols(); ++c) {
        if (!std::isfinite(param.grad(r, c))) {
          throw RuntimeFailure(fmt::format("non-finite gradient {} in '{}' at ({}, {}) on Adam step {}",
                                           param.grad(r, c), param.name, r, c, state.step + 1));
        }
      }
    }
  }
  ++state.step;
  state.m = options.beta1 * state.m + (1.0 - options.beta1) * param.grad;
  state.v = options.beta2 * state.v + (1.0 - options.beta2) * param.grad.cwiseAbs2();
  const Real bias1 = 1.0 - std::pow(options.beta1, static_cast<Real>(state.step));
  const Real bias2 = 1.0 - std::pow(options.beta2, static_cast<Real>(state.step));
  param.value.array() -=
      options.lr * (state.m.array() / bias1) / ((state.v.array() / bias2).sqrt() + options.eps);
}

Adam::Adam(std::vector<nn::ParamTensor*> params, AdamOptions options)
    : params_(std::move(params)), states_(params_.size()), options_(options) {}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) adam_step(*params_[k], states_[k], options_);
  ++steps_;
}

namespace {

Real metric_value(const MetricReport& report, MetricKind kind) {
  return kind == MetricKind::Recall ? report.recall : report.ndcg;
}

}  // namespace

TrainResult train(Recommender& model, const InteractionDataset& dataset, const TrainConfig& config) {
  config.validate();
  if (!model.trainable()) throw std::logic_error(fmt::format("model '{}' is training-free", model.name()));
  if (dataset.train_edges.empty()) throw DataError("cannot train on an empty train split");

  const BipartiteGraph graph = build_graph(dataset, Split::Train);
  std::vector<Edge> positives;
  positives.reserve(static_cast<std::size_t>(graph.num_edges()));
  for (Index u = 0; u < graph.num_users(); ++u) {
    for (Index i : graph.items_of(u)) positives.push_back({u, i});
  }

  const EvalSplit val_split = dataset.val_edges ? EvalSplit::Validation : EvalSplit::Test;
  TrainResult result;
  result.validated_on_test = val_split == EvalSplit::Test;

  Adam optimizer(model.parameters(), AdamOptions{config.lr});
  std::mt19937_64 rng(derive_seed(config.seed, 0x7ea1ULL));
  std::vector<Matrix> best;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  bool capped = false;
  for (Index epoch = 1; epoch <= config.epochs && !capped; ++epoch) {
    // Fisher-Yates with the portable bounded draw.
    for (std::size_t k = positives.size(); k > 1; --k) {
      std::swap(positives[k - 1], positives[uniform_below(rng, k)]);
    }
    Real loss_sum = 0.0;
    Index loss_batches = 0;
    Index batch_index = 0;
    for (std::size_t begin = 0; begin < positives.size(); begin += batch, ++batch_index) {
      const std::size_t end = std::min(begin + batch, positives.size());
      std::vector<Triple> triples;
      triples.reserve(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const Edge& e = positives[k];
        triples.push_back({e.user, e.item, sample_negatives(graph, e.user, 1, rng).front()});
      }
      optimizer.zero_grad();
      nn::Tape tape;
      const auto [pos, neg] = model.score_triples(tape, triples, derive_seed(config.seed, epoch, batch_index));
      const nn::Var loss = nn::bpr_loss(tape, pos, neg);
      const Real loss_value = loss.value()(0, 0);
      if (!std::isfinite(loss_value)) {
        throw RuntimeFailure(fmt::format("loss became {} at step {} (epoch {})", loss_value, result.steps + 1, epoch));
      }
      tape.backward(loss);
      optimizer.step();
      ++result.steps;
      loss_sum += loss_value;
      ++loss_batches;
      if (result.steps >= config.max_steps) {
        capped = true;
        break;
      }
    }

    TrainLogRow row{result.steps, epoch, loss_sum / static_cast<Real>(loss_batches), "", std::nullopt};
    const bool last = capped || epoch == config.epochs;
    if (epoch % config.validation_rate == 0 || last) {
      const MetricReport report =
          evaluate(model, dataset, config.validation_metric.cutoff, val_split);
      const Real value = metric_value(report, config.validation_metric.kind);
      row.val_metric = config.validation_metric.str();
      row.val_value = value;
      if (!result.best_metric || value > *result.best_metric) {
        result.best_metric = value;
        result.best_epoch = epoch;
        best.clear();
        for (const auto* p : model.frozen_parameters()) best.push_back(p->value);
      }
    }
    result.log.push_back(std::move(row));
  }

  if (!best.empty()) {
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
  }
  return result;
}

void write_train_log(std::ostream& out, const TrainResult& result) {
  fmt::print(out, "# validation_split: {}\n", result.validated_on_test ? "test" : "val");
  out << "step\tepoch\tloss\tval_metric\tval_value\n";
  for (const TrainLogRow& row : result.log) {
    fmt::print(out, "{}\t{}\t{:.17g}\t{}\t{}\n", row.step, row.epoch, row.loss,
               row.val_metric.empty() ? "-" : row.val_metric,
               row.val_value ? fmt::format("{:.17g}", *row.val_value) : "-");
  }
}

}  // namespace gravel
