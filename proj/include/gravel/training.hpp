#pragma once

#include "gravel/graph.hpp"
#include "gravel/models.hpp"
#include "gravel/nn.hpp"

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace gravel {

enum class MetricKind { Recall, NDCG };

/// Parsed "Recall@20" / "nDCG@20" tag.
struct MetricTag {
  MetricKind kind = MetricKind::Recall;
  Index cutoff = 20;

  static MetricTag parse(const std::string& text);
  std::string str() const;
  friend bool operator==(const MetricTag&, const MetricTag&) = default;
};

struct TrainConfig {
  Real lr = 0.001;
  Index epochs = 20;
  Index batch_size = 128;
  Index max_steps = 2000;
  std::uint64_t seed = 42;
  Index validation_rate = 20;
  MetricTag validation_metric{};
  Index factors = 128;
  Index channels = 128;
  Index n_layers = 4;
  std::string aggr = "sum";
  std::vector<Index> neigh{16, 16, 16, 16};

  /// Throws ConfigError when a count is < 1, lr <= 0, aggr is not "sum", or
  /// len(neigh) != n_layers.
  void validate() const;
};

/// `count` distinct items uniformly from those the user has no train edge
/// with. Throws DataError if fewer than `count` candidates exist.
std::vector<Index> sample_negatives(const BipartiteGraph& graph, Index user, Index count,
                                    std::mt19937_64& rng);

/// Mean of -ln sigmoid(pos - neg).
Real bpr_loss(std::span<const Real> pos_scores, std::span<const Real> neg_scores);

struct AdamState {
  Matrix m;
  Matrix v;
  std::int64_t step = 0;
};

struct AdamOptions {
  Real lr = 0.001;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

/// Bias-corrected Adam on param.value using param.grad. Throws RuntimeFailure
/// naming the tensor and entry when a gradient is not finite.
void adam_step(nn::ParamTensor& param, AdamState& state, const AdamOptions& options);

class Adam {
 public:
  Adam(std::vector<nn::ParamTensor*> params, AdamOptions options);
  void zero_grad();
  void step();
  std::int64_t steps() const { return steps_; }

 private:
  std::vector<nn::ParamTensor*> params_;
  std::vector<AdamState> states_;
  AdamOptions options_;
  std::int64_t steps_ = 0;
};

struct TrainLogRow {
  Index step = 0;
  Index epoch = 0;
  Real loss = 0.0;
  std::string val_metric;  // empty when the row carries no validation
  std::optional<Real> val_value;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  Index steps = 0;
  std::optional<Real> best_metric;
  Index best_epoch = 0;
  bool validated_on_test = false;
};

/// BPR with one uniform negative per positive, Adam, global step cap and
/// periodic validation. The model is left holding its best-validation
/// parameters (or its final parameters if validation never ran).
TrainResult train(Recommender& model, const InteractionDataset& dataset, const TrainConfig& config);

/// Writes the log as tsv with header `step epoch loss val_metric val_value`,
/// preceded by a `# validation_split: <val|test>` comment line.
void write_train_log(std::ostream& out, const TrainResult& result);

}  // namespace gravel
