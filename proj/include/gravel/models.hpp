#pragma once

#include "gravel/graph.hpp"
#include "gravel/nn.hpp"

#include <Eigen/SparseCore>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gravel {

// ---------------------------------------------------------------------------
// Dense scoring kernels. Templated on the Eigen expression so callers can pass
// rows, blocks or maps without copies.
// ---------------------------------------------------------------------------

/// <h_u, h_i> for every row h_i of `item_rows`.
template <typename UserVec, typename ItemRows>
ColVector<typename UserVec::Scalar> pair_score(const Eigen::MatrixBase<UserVec>& h_u,
                                               const Eigen::MatrixBase<ItemRows>& item_rows) {
  eigen_assert(h_u.size() == item_rows.cols());
  return item_rows * h_u.reshaped();
}

/// <h_u, q_i> for every item, i.e. Q h_u.
template <typename UserVec, typename ItemMatrix>
ColVector<typename UserVec::Scalar> tower_score(const Eigen::MatrixBase<UserVec>& h_u,
                                                const Eigen::MatrixBase<ItemMatrix>& item_matrix) {
  eigen_assert(h_u.size() == item_matrix.cols());
  return item_matrix * h_u.reshaped();
}

/// One bipartite message-passing layer without a tape:
/// relu((h + incoming neighbor sum) W) over rows [local users; local items].
template <typename Derived, typename Weight>
RowMatrix<typename Derived::Scalar> propagate_layer(const Eigen::MatrixBase<Derived>& h,
                                                    Index num_local_users,
                                                    std::span<const LocalEdge> edges,
                                                    nn::Direction direction,
                                                    const Eigen::MatrixBase<Weight>& weight) {
  RowMatrix<typename Derived::Scalar> agg = h;
  for (const LocalEdge& e : edges) {
    const Index u = e.user;
    const Index i = num_local_users + e.item;
    if (direction == nn::Direction::ItemsToUsers) {
      agg.row(u) += h.row(i);
    } else {
      agg.row(i) += h.row(u);
    }
  }
  return (agg * weight).cwiseMax(typename Derived::Scalar(0));
}

/// Layer l of L sends messages from hop L - l toward hop L - l - 1; odd hops
/// hold items, so the last layer always delivers items to the seed user.
inline nn::Direction layer_direction(std::size_t layer, std::size_t num_layers) {
  const std::size_t sender_hop = num_layers - layer;
  return sender_hop % 2 == 1 ? nn::Direction::ItemsToUsers : nn::Direction::UsersToItems;
}

// ---------------------------------------------------------------------------
// ContextGNN
// ---------------------------------------------------------------------------

struct ContextGNNParams {
  nn::ParamTensor user_emb;               // |U| x d
  nn::ParamTensor item_emb;               // |I| x d, GNN input features
  std::vector<nn::ParamTensor> gnn_layers;  // one d x d weight per hop
  nn::ParamTensor item_matrix;            // Q, |I| x d
  nn::ParamTensor mlp_w1;                 // d x d
  nn::ParamTensor mlp_b1;                 // 1 x d
  nn::ParamTensor mlp_w2;                 // d x 1
  nn::ParamTensor mlp_b2;                 // 1 x 1

  Index channels() const { return user_emb.cols(); }
  Index hops() const { return static_cast<Index>(gnn_layers.size()); }

  /// Every tensor drawn from uniform(-1/sqrt(d), 1/sqrt(d)).
  static ContextGNNParams init(Index num_users, Index num_items, Index channels, Index hops,
                               std::uint64_t seed);

  std::vector<nn::ParamTensor*> tensors();
  std::vector<const nn::ParamTensor*> tensors() const;
  void validate() const;
};

struct GnnOutput {
  RowVector<Real> user;       // h_u
  Matrix items;               // one row per subgraph item, same order as subgraph.items
  std::vector<Index> item_ids;
};

GnnOutput gnn_forward(const SampledSubgraph& subgraph, const ContextGNNParams& params);

/// Scalar offset MLP_theta(h_u): relu(h_u W1 + b1) W2 + b2.
Real mlp_offset(const ContextGNNParams& params, const RowVector<Real>& h_u);

enum class Branch : std::uint8_t { Tower = 0, Pair = 1 };

struct ScoreVector {
  Index user = 0;
  Vector scores;
  std::vector<Branch> branch_mask;  // empty for single-branch scorers
};

/// Routing of the pair/tower decision: on the sampled subgraph's items, or on
/// the exact k-hop neighborhood (subgraph sampled with unlimited fanout).
enum class Routing { Sampled, Exact };

ScoreVector fused_scores(Index user, const BipartiteGraph& graph, const ContextGNNParams& params,
                         std::span<const Index> fanouts, std::uint64_t rng_seed,
                         Routing routing = Routing::Sampled);

/// Tape counterpart of gnn_forward + fusion for training. Returns a column of
/// fused scores for `items`, in order.
nn::Var fused_scores_on_tape(nn::Tape& tape, const SampledSubgraph& subgraph, ContextGNNParams& params,
                             std::span<const Index> items);

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Q p_u.
Vector mf_bpr_score(Index user, const Matrix& user_factors, const Matrix& item_factors);

/// Symmetrically normalized bipartite adjacency over [users; items].
Eigen::SparseMatrix<Real> normalized_adjacency(const BipartiteGraph& graph);

/// Mean of layers 0..L of e <- D^-1/2 A D^-1/2 e. Zero-degree nodes receive
/// nothing from propagation, so only their layer-0 term contributes.
std::pair<Matrix, Matrix> lightgcn_propagate(const BipartiteGraph& graph, const Matrix& user_emb,
                                             const Matrix& item_emb, int layers);

/// r_u C~ where C~_ji = C_ji / (deg_j^s deg_i^s) and C = R^T R.
Vector item_filter_score(const BipartiteGraph& graph, Index user, Real smoothing);

// ---------------------------------------------------------------------------
// Common interface used by training, evaluation and the experiment runner.
// ---------------------------------------------------------------------------

struct Triple {
  Index user = 0;
  Index pos = 0;
  Index neg = 0;
};

using UserScorer = std::function<ScoreVector(Index user)>;

class Recommender {
 public:
  virtual ~Recommender() = default;

  virtual std::string name() const = 0;
  virtual bool trainable() const { return true; }

  /// Snapshot scorer over frozen parameters. Pure in (params, graph, user).
  virtual UserScorer make_scorer() const = 0;
  ScoreVector score_user(Index user) const { return make_scorer()(user); }

  virtual std::vector<nn::ParamTensor*> parameters() { return {}; }
  std::vector<const nn::ParamTensor*> frozen_parameters() const;

  /// Records (positive, negative) score columns for a batch on the tape.
  virtual std::pair<nn::Var, nn::Var> score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                                    std::uint64_t batch_seed);
};

class ContextGNNModel final : public Recommender {
 public:
  ContextGNNModel(std::shared_ptr<const BipartiteGraph> train_graph, Index channels,
                  std::vector<Index> fanouts, std::uint64_t seed, Routing routing = Routing::Sampled);

  std::string name() const override { return "ContextGNN"; }
  UserScorer make_scorer() const override;
  std::vector<nn::ParamTensor*> parameters() override { return params_.tensors(); }
  std::pair<nn::Var, nn::Var> score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                            std::uint64_t batch_seed) override;

  ContextGNNParams& params() { return params_; }
  const ContextGNNParams& params() const { return params_; }
  std::span<const Index> fanouts() const { return fanouts_; }
  /// Seed used for evaluation-time subgraph sampling.
  std::uint64_t scoring_seed() const;

 private:
  std::shared_ptr<const BipartiteGraph> graph_;
  std::vector<Index> fanouts_;
  std::uint64_t seed_;
  Routing routing_;
  ContextGNNParams params_;
};

class MFBPRModel final : public Recommender {
 public:
  MFBPRModel(Index num_users, Index num_items, Index factors, std::uint64_t seed);

  std::string name() const override { return "BPRMF"; }
  UserScorer make_scorer() const override;
  std::vector<nn::ParamTensor*> parameters() override { return {&user_factors_, &item_factors_}; }
  std::pair<nn::Var, nn::Var> score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                            std::uint64_t batch_seed) override;

  const nn::ParamTensor& item_factors() const { return item_factors_; }
  nn::ParamTensor& user_factors() { return user_factors_; }

 private:
  nn::ParamTensor user_factors_;
  nn::ParamTensor item_factors_;
};

class LightGCNModel final : public Recommender {
 public:
  LightGCNModel(std::shared_ptr<const BipartiteGraph> train_graph, Index factors, int layers,
                std::uint64_t seed);

  std::string name() const override { return "LightGCN"; }
  UserScorer make_scorer() const override;
  std::vector<nn::ParamTensor*> parameters() override { return {&user_emb_, &item_emb_}; }
  std::pair<nn::Var, nn::Var> score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                            std::uint64_t batch_seed) override;

 private:
  std::shared_ptr<const BipartiteGraph> graph_;
  Eigen::SparseMatrix<Real> adjacency_;
  int layers_;
  nn::ParamTensor user_emb_;
  nn::ParamTensor item_emb_;
};

/// Training-free co-occurrence filter.
class ItemFilterModel final : public Recommender {
 public:
  ItemFilterModel(std::shared_ptr<const BipartiteGraph> train_graph, Real smoothing);

  std::string name() const override { return "ItemFilter"; }
  bool trainable() const override { return false; }
  UserScorer make_scorer() const override;

 private:
  std::shared_ptr<const BipartiteGraph> graph_;
  Real smoothing_;
};

/// uniform(-1/sqrt(fan), 1/sqrt(fan)) fill from a stream derived from (seed, salt).
Matrix uniform_init(Index rows, Index cols, Real bound, std::uint64_t seed, std::uint64_t salt);

// ---------------------------------------------------------------------------
// Checkpoints: "GRVL", version byte, u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, u64 dims, f64 values (row-major).
// Everything little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::string encode_checkpoint(std::span<const nn::ParamTensor* const> tensors);
std::vector<nn::ParamTensor> decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, std::span<const nn::ParamTensor* const> tensors);
std::vector<nn::ParamTensor> load_checkpoint(const std::filesystem::path& path);
/// Copies values by name into `targets`; throws DataError on missing names or
/// shape mismatches.
void restore_checkpoint(std::span<nn::ParamTensor* const> targets, const std::vector<nn::ParamTensor>& saved);

}  // namespace gravel
