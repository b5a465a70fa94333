#pragma once

// Fixtures and independent reference implementations shared by the unit
// tests and the acceptance runner. Nothing here calls into the code under
// test beyond building inputs.

#include "gravel/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace gravel::testing {

inline const char* const kGowallaListing = R"(experiment:
  backend: pytorch
  data_config:
    strategy: fixed
    train_path: ../data/{0}/train_elliot.tsv
    test_path: ../data/{0}/test_elliot.tsv
  dataset: gowalla
  models:
    external.ContextGNN:
      meta:
        hyper_opt_alg: grid
        verbose: True
        save_weights: False
        validation_rate: 20
        validation_metric: Recall@20
        restore: False
      lr: 0.001
      epochs: 20
      factors: 128
      batch_size: 128
      n_layers: 4
      aggr: sum
      channels: 128
      max_steps: 2000
      neigh: (16,16,16,16)
      seed: 42
)";

struct RandomGraph {
  Index users = 0;
  Index items = 0;
  std::vector<Edge> edges;
};

/// Random bipartite graph with users + items <= max_nodes; may contain
/// isolated nodes.
inline RandomGraph random_graph(std::mt19937_64& rng, Index max_nodes, double density) {
  std::uniform_int_distribution<Index> side(1, max_nodes / 2);
  RandomGraph g;
  g.users = side(rng);
  g.items = std::min<Index>(side(rng), max_nodes - g.users);
  std::bernoulli_distribution coin(density);
  for (Index u = 0; u < g.users; ++u) {
    for (Index i = 0; i < g.items; ++i) {
      if (coin(rng)) g.edges.push_back({u, i});
    }
  }
  return g;
}

/// Hop distance from `user` to every node, on the (users + items) node set
/// with items offset by `users`. -1 for unreachable.
inline std::vector<int> bfs_distances(const RandomGraph& g, Index user) {
  const Index n = g.users + g.items;
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
  for (const Edge& e : g.edges) {
    adj[static_cast<std::size_t>(e.user)].push_back(g.users + e.item);
    adj[static_cast<std::size_t>(g.users + e.item)].push_back(e.user);
  }
  std::vector<int> dist(static_cast<std::size_t>(n), -1);
  std::deque<Index> queue{user};
  dist[static_cast<std::size_t>(user)] = 0;
  while (!queue.empty()) {
    const Index v = queue.front();
    queue.pop_front();
    for (Index w : adj[static_cast<std::size_t>(v)]) {
      if (dist[static_cast<std::size_t>(w)] < 0) {
        dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(v)] + 1;
        queue.push_back(w);
      }
    }
  }
  return dist;
}

/// Items within `k` hops of `user`.
inline std::set<Index> items_within(const RandomGraph& g, Index user, int k) {
  const auto dist = bfs_distances(g, user);
  std::set<Index> out;
  for (Index i = 0; i < g.items; ++i) {
    const int d = dist[static_cast<std::size_t>(g.users + i)];
    if (d >= 0 && d <= k) out.insert(i);
  }
  return out;
}

struct BruteMetrics {
  double recall = 0.0;
  double ndcg = 0.0;
};

/// Full sort of every unmasked item by (score desc, index asc), then the
/// textbook recall and nDCG formulas.
inline BruteMetrics brute_metrics(const std::vector<double>& scores, const std::set<Index>& train,
                                  const std::set<Index>& positives, Index k) {
  std::vector<Index> order;
  for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
    if (!train.count(i)) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  if (static_cast<Index>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
  double hits = 0.0;
  double dcg = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positives.count(order[r])) {
      hits += 1.0;
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  }
  double idcg = 0.0;
  const auto ideal = std::min<std::size_t>(static_cast<std::size_t>(k), positives.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return {hits / static_cast<double>(positives.size()), dcg / idcg};
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gravel_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// The six-user / eight-item fixture used by the gradient checks.
inline std::vector<Edge> small_fixture_edges() {
  return {{0, 0}, {0, 1}, {0, 4}, {1, 1}, {1, 2}, {2, 2}, {2, 3}, {2, 5},
          {3, 0}, {3, 6}, {4, 4}, {4, 5}, {4, 7}, {5, 3}, {5, 6}};
}

}  // namespace gravel::testing
