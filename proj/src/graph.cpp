#include "gravel/graph.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace gravel {

IdMap::IdMap(std::vector<std::string> org_ids) : org_ids_(std::move(org_ids)) {
  index_.reserve(org_ids_.size());
  for (std::size_t i = 0; i < org_ids_.size(); ++i) {
    if (!index_.emplace(org_ids_[i], static_cast<Index>(i)).second) {
      throw DataError(fmt::format("duplicate org_id '{}'", org_ids_[i]));
    }
  }
}

IdMap IdMap::dense(Index n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids.push_back(std::to_string(i));
  return IdMap(std::move(ids));
}

std::optional<Index> IdMap::remap_id(const std::string& org) const {
  const auto it = index_.find(org);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void InteractionDataset::validate() const {
  if (num_users < 0 || num_items < 0) throw DataError("negative node count");
  if (user_ids.size() != num_users) {
    throw DataError(fmt::format("user id map has {} entries, expected {}", user_ids.size(), num_users));
  }
  if (item_ids.size() != num_items) {
    throw DataError(fmt::format("item id map has {} entries, expected {}", item_ids.size(), num_items));
  }
  auto check_range = [&](std::span<const Edge> edges, const char* split) {
    for (std::size_t row = 0; row < edges.size(); ++row) {
      const Edge& e = edges[row];
      if (e.user < 0 || e.user >= num_users || e.item < 0 || e.item >= num_items) {
        throw DataError(fmt::format("{} edge #{} ({}, {}) out of range for {} users x {} items",
                                    split, row, e.user, e.item, num_users, num_items));
      }
    }
  };
  check_range(train_edges, "train");
  check_range(test_edges, "test");
  if (val_edges) check_range(*val_edges, "validation");

  std::vector<Edge> train(train_edges);
  std::sort(train.begin(), train.end());
  for (const Edge& e : test_edges) {
    if (std::binary_search(train.begin(), train.end(), e)) {
      throw DataError(fmt::format("edge ({}, {}) appears in both train and test", e.user, e.item));
    }
  }
}

std::vector<std::vector<Index>> InteractionDataset::items_by_user(std::span<const Edge> edges) const {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(num_users));
  for (const Edge& e : edges) out[static_cast<std::size_t>(e.user)].push_back(e.item);
  for (auto& items : out) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }
  return out;
}

namespace {

void fill_csr(Index rows, const std::vector<std::pair<Index, Index>>& sorted_pairs,
              std::vector<Index>& offsets, std::vector<Index>& targets) {
  offsets.assign(static_cast<std::size_t>(rows) + 1, 0);
  targets.clear();
  targets.reserve(sorted_pairs.size());
  for (const auto& [row, col] : sorted_pairs) {
    ++offsets[static_cast<std::size_t>(row) + 1];
    targets.push_back(col);
  }
  for (std::size_t r = 1; r < offsets.size(); ++r) offsets[r] += offsets[r - 1];
}

}  // namespace

BipartiteGraph::BipartiteGraph(Index num_users, Index num_items, std::span<const Edge> edges)
    : num_users_(num_users), num_items_(num_items) {
  std::vector<std::pair<Index, Index>> forward;
  forward.reserve(edges.size());
  for (std::size_t row = 0; row < edges.size(); ++row) {
    const Edge& e = edges[row];
    if (e.user < 0 || e.user >= num_users || e.item < 0 || e.item >= num_items) {
      throw DataError(fmt::format("edge row {}: ({}, {}) out of range for {} users x {} items", row,
                                  e.user, e.item, num_users, num_items));
    }
    forward.emplace_back(e.user, e.item);
  }
  std::sort(forward.begin(), forward.end());
  forward.erase(std::unique(forward.begin(), forward.end()), forward.end());

  std::vector<std::pair<Index, Index>> backward;
  backward.reserve(forward.size());
  for (const auto& [u, i] : forward) backward.emplace_back(i, u);
  std::sort(backward.begin(), backward.end());

  fill_csr(num_users, forward, user_offsets_, user_items_);
  fill_csr(num_items, backward, item_offsets_, item_users_);
}

std::span<const Index> BipartiteGraph::items_of(Index user) const {
  const auto u = static_cast<std::size_t>(user);
  return {user_items_.data() + user_offsets_.at(u), user_items_.data() + user_offsets_.at(u + 1)};
}

std::span<const Index> BipartiteGraph::users_of(Index item) const {
  const auto i = static_cast<std::size_t>(item);
  return {item_users_.data() + item_offsets_.at(i), item_users_.data() + item_offsets_.at(i + 1)};
}

bool BipartiteGraph::has_edge(Index user, Index item) const {
  const auto items = items_of(user);
  return std::binary_search(items.begin(), items.end(), item);
}

BipartiteGraph build_graph(const InteractionDataset& dataset, Split split) {
  switch (split) {
    case Split::Train:
      return {dataset.num_users, dataset.num_items, dataset.train_edges};
    case Split::Test:
      return {dataset.num_users, dataset.num_items, dataset.test_edges};
    case Split::TrainTest: {
      std::vector<Edge> all(dataset.train_edges);
      all.insert(all.end(), dataset.test_edges.begin(), dataset.test_edges.end());
      return {dataset.num_users, dataset.num_items, all};
    }
  }
  throw std::logic_error("unknown split");
}

Neighborhood khop_neighborhood(const BipartiteGraph& graph, Index user, int k) {
  if (k < 0) throw std::invalid_argument("k must be non-negative");
  if (user < 0 || user >= graph.num_users()) throw std::out_of_range("user index out of range");

  std::vector<char> seen_user(static_cast<std::size_t>(graph.num_users()), 0);
  std::vector<char> seen_item(static_cast<std::size_t>(graph.num_items()), 0);
  seen_user[static_cast<std::size_t>(user)] = 1;
  std::vector<Index> frontier{user};
  Neighborhood out;

  for (int hop = 1; hop <= k && !frontier.empty(); ++hop) {
    const bool to_items = (hop % 2) == 1;
    std::vector<Index> next;
    for (Index node : frontier) {
      const auto nbrs = to_items ? graph.items_of(node) : graph.users_of(node);
      auto& seen = to_items ? seen_item : seen_user;
      for (Index n : nbrs) {
        if (!seen[static_cast<std::size_t>(n)]) {
          seen[static_cast<std::size_t>(n)] = 1;
          next.push_back(n);
        }
      }
    }
    auto& bucket = to_items ? out.items : out.users;
    bucket.insert(bucket.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  std::sort(out.users.begin(), out.users.end());
  std::sort(out.items.begin(), out.items.end());
  return out;
}

std::optional<Index> SampledSubgraph::local_item(Index global_item) const {
  const auto it = std::lower_bound(items.begin(), items.end(), global_item);
  if (it == items.end() || *it != global_item) return std::nullopt;
  return static_cast<Index>(it - items.begin());
}

std::optional<Index> SampledSubgraph::local_user(Index global_user) const {
  if (!users.empty() && users.front() == global_user) return 0;
  const auto it = std::lower_bound(users.begin() + (users.empty() ? 0 : 1), users.end(), global_user);
  if (it == users.end() || *it != global_user) return std::nullopt;
  return static_cast<Index>(it - users.begin());
}

SampledSubgraph sample_subgraph(const BipartiteGraph& graph, Index user,
                                std::span<const Index> fanouts, std::uint64_t rng_seed) {
  if (fanouts.empty()) throw std::invalid_argument("fanouts must be non-empty");
  for (Index cap : fanouts) {
    if (cap != kUnlimitedFanout && cap < 1) throw std::invalid_argument("fanout caps must be >= 1");
  }
  if (user < 0 || user >= graph.num_users()) throw std::out_of_range("user index out of range");

  std::mt19937_64 rng(derive_seed(rng_seed, user));
  SampledSubgraph sub;
  sub.seed_user = user;
  sub.hops = static_cast<int>(fanouts.size());
  sub.nodes_per_hop.push_back({user});

  std::set<Index> users{user};
  std::set<Index> items;
  std::set<std::pair<Index, Index>> global_edges;  // (user, item)
  std::vector<Index> frontier{user};
  std::vector<Index> scratch;

  for (std::size_t hop = 0; hop < fanouts.size(); ++hop) {
    const bool to_items = (hop % 2) == 0;
    const Index cap = fanouts[hop];
    std::vector<Index> next;
    for (Index node : frontier) {
      const auto nbrs = to_items ? graph.items_of(node) : graph.users_of(node);
      const auto degree = static_cast<Index>(nbrs.size());
      scratch.assign(nbrs.begin(), nbrs.end());
      Index take = degree;
      if (cap != kUnlimitedFanout && cap < degree) {
        // Partial Fisher-Yates: the first `cap` slots become the sample.
        for (Index s = 0; s < cap; ++s) {
          const auto j = s + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(degree - s)));
          std::swap(scratch[static_cast<std::size_t>(s)], scratch[static_cast<std::size_t>(j)]);
        }
        take = cap;
        std::sort(scratch.begin(), scratch.begin() + take);
      }
      for (Index s = 0; s < take; ++s) {
        const Index n = scratch[static_cast<std::size_t>(s)];
        if (to_items) {
          global_edges.emplace(node, n);
          if (items.insert(n).second) next.push_back(n);
        } else {
          global_edges.emplace(n, node);
          if (users.insert(n).second) next.push_back(n);
        }
      }
    }
    std::sort(next.begin(), next.end());
    sub.nodes_per_hop.push_back(next);
    frontier = std::move(next);
  }

  sub.users.push_back(user);
  for (Index u : users) {
    if (u != user) sub.users.push_back(u);
  }
  sub.items.assign(items.begin(), items.end());
  sub.contained_items = sub.items;
  sub.local_edges.reserve(global_edges.size());
  for (const auto& [u, i] : global_edges) {
    sub.local_edges.push_back({*sub.local_user(u), *sub.local_item(i)});
  }
  std::sort(sub.local_edges.begin(), sub.local_edges.end());
  return sub;
}

Real locality_score(const BipartiteGraph& graph, std::span<const std::vector<Index>> test_positives,
                    int k) {
  Real total = 0.0;
  Index counted = 0;
  for (std::size_t u = 0; u < test_positives.size(); ++u) {
    const auto& positives = test_positives[u];
    if (positives.empty()) continue;
    if (static_cast<Index>(u) >= graph.num_users()) {
      throw std::out_of_range(fmt::format("user {} has test positives but is not in the graph", u));
    }
    const Neighborhood hood = khop_neighborhood(graph, static_cast<Index>(u), k);
    std::vector<Index> unique_pos(positives);
    std::sort(unique_pos.begin(), unique_pos.end());
    unique_pos.erase(std::unique(unique_pos.begin(), unique_pos.end()), unique_pos.end());
    Index hits = 0;
    for (Index item : unique_pos) {
      if (std::binary_search(hood.items.begin(), hood.items.end(), item)) ++hits;
    }
    total += static_cast<Real>(hits) / static_cast<Real>(unique_pos.size());
    ++counted;
  }
  if (counted == 0) throw DataError("locality score is undefined: no user has test positives");
  return total / static_cast<Real>(counted);
}

std::string DatasetStats::sparsity_text() const { return fmt::format("{:.4f}", sparsity); }

DatasetStats dataset_stats(Index users, Index items, Index interactions) {
  if (users <= 0 || items <= 0) throw DataError("dataset statistics need at least one user and one item");
  DatasetStats stats{users, items, interactions, 0.0};
  stats.sparsity = 1.0 - static_cast<Real>(interactions) /
                             (static_cast<Real>(users) * static_cast<Real>(items));
  return stats;
}

DatasetStats dataset_stats(const InteractionDataset& dataset) {
  const BipartiteGraph all = build_graph(dataset, Split::TrainTest);
  return dataset_stats(dataset.num_users, dataset.num_items, all.num_edges());
}

}  // namespace gravel
