#pragma once

#include "gravel/graph.hpp"
#include "gravel/models.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace gravel {

/// Top-K list ordered by (score descending, item index ascending).
struct RankingResult {
  Index user = 0;
  Index cutoff = 0;
  std::vector<Index> topk_items;
  std::vector<Real> topk_scores;
};

/// Ranks every item not in `train_items` (sorted ascending) and keeps the
/// best `k`. Returns fewer than k items when fewer are unmasked.
RankingResult rank_topk(Index user, std::span<const Real> scores, std::span<const Index> train_items, Index k);
RankingResult rank_topk(const ScoreVector& scores, std::span<const Index> train_items, Index k);

/// |topk ∩ positives| / |positives|. `positives` must be non-empty.
Real recall_at_k(const RankingResult& result, std::span<const Index> positives);

/// Binary-relevance nDCG with discount 1/log2(rank + 1), ranks from 1, and
/// IDCG over min(cutoff, |positives|) ideal hits.
Real ndcg_at_k(const RankingResult& result, std::span<const Index> positives);

Index hit_count(const RankingResult& result, std::span<const Index> positives);

struct UserMetrics {
  Index user = 0;
  Real recall = 0.0;
  Real ndcg = 0.0;
  Index hits = 0;
  Index num_positives = 0;
};

struct MetricReport {
  Index cutoff = 20;
  Real recall = 0.0;
  Real ndcg = 0.0;
  Index users_evaluated = 0;
  std::vector<UserMetrics> per_user;
};

enum class EvalSplit { Validation, Test };

/// Averages Recall@K and nDCG@K with equal weight over users with non-empty
/// positives in `split`, masking each user's train items. Users are visited
/// in index order. Throws DataError when no user is evaluable.
MetricReport evaluate(const UserScorer& scorer, const InteractionDataset& dataset, Index k,
                      EvalSplit split = EvalSplit::Test);
MetricReport evaluate(const Recommender& model, const InteractionDataset& dataset, Index k,
                      EvalSplit split = EvalSplit::Test);

/// tsv: `user recall ndcg hits num_positives`.
void write_per_user(std::ostream& out, const MetricReport& report);

}  // namespace gravel
