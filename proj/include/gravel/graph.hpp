#pragma once

#include "gravel/core.hpp"

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gravel {

struct Edge {
  Index user = 0;
  Index item = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Bijection between opaque original IDs and dense indices 0..n-1.
class IdMap {
 public:
  IdMap() = default;
  explicit IdMap(std::vector<std::string> org_ids);

  /// Identity map "0".."n-1".
  static IdMap dense(Index n);

  Index size() const { return static_cast<Index>(org_ids_.size()); }
  const std::string& org_id(Index remap) const { return org_ids_.at(static_cast<std::size_t>(remap)); }
  std::optional<Index> remap_id(const std::string& org) const;
  const std::vector<std::string>& org_ids() const { return org_ids_; }

  friend bool operator==(const IdMap& a, const IdMap& b) { return a.org_ids_ == b.org_ids_; }

 private:
  std::vector<std::string> org_ids_;
  std::unordered_map<std::string, Index> index_;
};

struct InteractionDataset {
  Index num_users = 0;
  Index num_items = 0;
  std::vector<Edge> train_edges;
  std::vector<Edge> test_edges;
  std::optional<std::vector<Edge>> val_edges;
  IdMap user_ids;
  IdMap item_ids;

  /// Throws DataError on out-of-range indices, train/test overlap, or an
  /// ID map whose size disagrees with the counts.
  void validate() const;

  /// Per-user item lists for a split, sorted and deduplicated.
  std::vector<std::vector<Index>> items_by_user(std::span<const Edge> edges) const;

  friend bool operator==(const InteractionDataset&, const InteractionDataset&) = default;
};

enum class Split { Train, Test, TrainTest };

/// Immutable CSR adjacency over both sides of the bipartition. Neighbor lists
/// are sorted ascending and duplicate edges are collapsed.
class BipartiteGraph {
 public:
  BipartiteGraph() = default;
  BipartiteGraph(Index num_users, Index num_items, std::span<const Edge> edges);

  Index num_users() const { return num_users_; }
  Index num_items() const { return num_items_; }
  Index num_edges() const { return static_cast<Index>(user_items_.size()); }

  std::span<const Index> items_of(Index user) const;
  std::span<const Index> users_of(Index item) const;
  Index user_degree(Index user) const { return static_cast<Index>(items_of(user).size()); }
  Index item_degree(Index item) const { return static_cast<Index>(users_of(item).size()); }
  bool has_edge(Index user, Index item) const;

 private:
  Index num_users_ = 0;
  Index num_items_ = 0;
  std::vector<Index> user_offsets_{0};
  std::vector<Index> user_items_;
  std::vector<Index> item_offsets_{0};
  std::vector<Index> item_users_;
};

BipartiteGraph build_graph(const InteractionDataset& dataset, Split split);

struct Neighborhood {
  std::vector<Index> users;  // sorted, seed excluded
  std::vector<Index> items;  // sorted
};

/// Exact BFS: union of frontiers at hops 1..k. Odd hops reach items, even
/// hops reach users.
Neighborhood khop_neighborhood(const BipartiteGraph& graph, Index user, int k);

/// Local edge between side-local positions (index into SampledSubgraph::users
/// and SampledSubgraph::items).
struct LocalEdge {
  Index user = 0;
  Index item = 0;

  friend bool operator==(const LocalEdge&, const LocalEdge&) = default;
  friend auto operator<=>(const LocalEdge&, const LocalEdge&) = default;
};

/// Fanout-limited k-hop neighborhood around a seed user. `users` maps local
/// user positions to global ids (seed at 0, the rest ascending); `items` maps
/// local item positions to global ids in ascending order.
struct SampledSubgraph {
  Index seed_user = 0;
  int hops = 0;
  std::vector<Index> users;
  std::vector<Index> items;
  std::vector<std::vector<Index>> nodes_per_hop;  // global ids, hop 0 = {seed}
  std::vector<LocalEdge> local_edges;             // sorted, unique
  std::vector<Index> contained_items;             // sorted global item ids

  Index num_local_users() const { return static_cast<Index>(users.size()); }
  Index num_local_items() const { return static_cast<Index>(items.size()); }
  /// Local item position for a global item, or nullopt when absent.
  std::optional<Index> local_item(Index global_item) const;
  std::optional<Index> local_user(Index global_user) const;

  friend bool operator==(const SampledSubgraph&, const SampledSubgraph&) = default;
};

/// Fanout cap meaning "keep every neighbor".
inline constexpr Index kUnlimitedFanout = -1;

/// Expands hop h (1-based) by at most fanouts[h-1] neighbors per frontier
/// node, drawn uniformly without replacement. The RNG stream is derived from
/// (rng_seed, user), so results do not depend on call order.
SampledSubgraph sample_subgraph(const BipartiteGraph& graph, Index user,
                                std::span<const Index> fanouts, std::uint64_t rng_seed);

/// Mean over users with non-empty positives of the fraction of positives
/// inside the exact k-hop item neighborhood.
Real locality_score(const BipartiteGraph& graph,
                    std::span<const std::vector<Index>> test_positives, int k);

struct DatasetStats {
  Index users = 0;
  Index items = 0;
  Index interactions = 0;
  Real sparsity = 0.0;

  /// Sparsity rounded to four decimals, e.g. "0.9992".
  std::string sparsity_text() const;
};

DatasetStats dataset_stats(Index users, Index items, Index interactions);
DatasetStats dataset_stats(const InteractionDataset& dataset);

}  // namespace gravel
