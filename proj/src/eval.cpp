#include "gravel/eval.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace gravel {

RankingResult rank_topk(Index user, std::span<const Real> scores, std::span<const Index> train_items, Index k) {
  if (k < 1) throw std::invalid_argument("cutoff must be >= 1");
  std::vector<Index> candidates;
  candidates.reserve(scores.size());
  for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
    if (!std::binary_search(train_items.begin(), train_items.end(), i)) candidates.push_back(i);
  }
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
  const auto better = [&](Index a, Index b) {
    const Real sa = scores[static_cast<std::size_t>(a)];
    const Real sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                    better);

  RankingResult result{user, k, {}, {}};
  result.topk_items.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
  for (Index item : result.topk_items) result.topk_scores.push_back(scores[static_cast<std::size_t>(item)]);
  return result;
}

RankingResult rank_topk(const ScoreVector& scores, std::span<const Index> train_items, Index k) {
  return rank_topk(scores.user, std::span<const Real>(scores.scores.data(), static_cast<std::size_t>(scores.scores.size())),
                   train_items, k);
}

Index hit_count(const RankingResult& result, std::span<const Index> positives) {
  Index hits = 0;
  for (Index item : result.topk_items) {
    if (std::find(positives.begin(), positives.end(), item) != positives.end()) ++hits;
  }
  return hits;
}

Real recall_at_k(const RankingResult& result, std::span<const Index> positives) {
  if (positives.empty()) throw std::invalid_argument("recall needs at least one positive");
  return static_cast<Real>(hit_count(result, positives)) / static_cast<Real>(positives.size());
}

Real ndcg_at_k(const RankingResult& result, std::span<const Index> positives) {
  if (positives.empty()) throw std::invalid_argument("nDCG needs at least one positive");
  Real dcg = 0.0;
  for (std::size_t r = 0; r < result.topk_items.size(); ++r) {
    if (std::find(positives.begin(), positives.end(), result.topk_items[r]) != positives.end()) {
      dcg += 1.0 / std::log2(static_cast<Real>(r) + 2.0);
    }
  }
  const auto ideal = std::min<std::size_t>(static_cast<std::size_t>(result.cutoff), positives.size());
  Real idcg = 0.0;
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<Real>(r) + 2.0);
  return dcg / idcg;
}

MetricReport evaluate(const UserScorer& scorer, const InteractionDataset& dataset, Index k, EvalSplit split) {
  const std::vector<Edge>* target = &dataset.test_edges;
  if (split == EvalSplit::Validation) {
    if (!dataset.val_edges) throw DataError("dataset has no validation split");
    target = &*dataset.val_edges;
  }
  const auto train = dataset.items_by_user(dataset.train_edges);
  const auto positives = dataset.items_by_user(*target);

  MetricReport report;
  report.cutoff = k;
  Real recall_sum = 0.0;
  Real ndcg_sum = 0.0;
  for (Index u = 0; u < dataset.num_users; ++u) {
    const auto& pos = positives[static_cast<std::size_t>(u)];
    if (pos.empty()) continue;
    const ScoreVector scores = scorer(u);
    if (scores.scores.size() != dataset.num_items) {
      throw RuntimeFailure(fmt::format("scorer returned {} scores for {} items", scores.scores.size(),
                                       dataset.num_items));
    }
    const RankingResult ranking = rank_topk(scores, train[static_cast<std::size_t>(u)], k);
    UserMetrics m{u, recall_at_k(ranking, pos), ndcg_at_k(ranking, pos), hit_count(ranking, pos),
                  static_cast<Index>(pos.size())};
    recall_sum += m.recall;
    ndcg_sum += m.ndcg;
    report.per_user.push_back(m);
  }
  if (report.per_user.empty()) throw DataError("no user has positives in the evaluation split");
  report.users_evaluated = static_cast<Index>(report.per_user.size());
  report.recall = recall_sum / static_cast<Real>(report.users_evaluated);
  report.ndcg = ndcg_sum / static_cast<Real>(report.users_evaluated);
  return report;
}

MetricReport evaluate(const Recommender& model, const InteractionDataset& dataset, Index k, EvalSplit split) {
  return evaluate(model.make_scorer(), dataset, k, split);
}

void write_per_user(std::ostream& out, const MetricReport& report) {
  out << "user\trecall\tndcg\thits\tnum_positives\n";
  for (const UserMetrics& m : report.per_user) {
    fmt::print(out, "{}\t{:.6f}\t{:.6f}\t{}\t{}\n", m.user, m.recall, m.ndcg, m.hits, m.num_positives);
  }
}

}  // namespace gravel
