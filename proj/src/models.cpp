#include "gravel/models.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

namespace gravel {

Matrix uniform_init(Index rows, Index cols, Real bound, std::uint64_t seed, std::uint64_t salt) {
  std::mt19937_64 rng(derive_seed(seed, salt));
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = (2.0 * uniform_unit(rng) - 1.0) * bound;
  }
  return m;
}

// ---------------------------------------------------------------------------
// ContextGNN parameters and forward passes
// ---------------------------------------------------------------------------

ContextGNNParams ContextGNNParams::init(Index num_users, Index num_items, Index channels, Index hops,
                                        std::uint64_t seed) {
  if (channels < 1 || hops < 1) throw std::invalid_argument("channels and hops must be >= 1");
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(channels));
  std::uint64_t salt = 0;
  auto make = [&](std::string name, Index rows, Index cols) {
    return nn::ParamTensor(std::move(name), uniform_init(rows, cols, bound, seed, ++salt));
  };
  ContextGNNParams p;
  p.user_emb = make("user_emb", num_users, channels);
  p.item_emb = make("item_emb", num_items, channels);
  for (Index l = 0; l < hops; ++l) p.gnn_layers.push_back(make(fmt::format("gnn_layer_{}", l), channels, channels));
  p.item_matrix = make("item_matrix", num_items, channels);
  p.mlp_w1 = make("mlp_w1", channels, channels);
  p.mlp_b1 = make("mlp_b1", 1, channels);
  p.mlp_w2 = make("mlp_w2", channels, 1);
  p.mlp_b2 = make("mlp_b2", 1, 1);
  return p;
}

std::vector<nn::ParamTensor*> ContextGNNParams::tensors() {
  std::vector<nn::ParamTensor*> out{&user_emb, &item_emb};
  for (auto& w : gnn_layers) out.push_back(&w);
  out.insert(out.end(), {&item_matrix, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2});
  return out;
}

std::vector<const nn::ParamTensor*> ContextGNNParams::tensors() const {
  auto mutable_view = const_cast<ContextGNNParams*>(this)->tensors();
  return {mutable_view.begin(), mutable_view.end()};
}

void ContextGNNParams::validate() const {
  const Index d = channels();
  auto expect = [](const nn::ParamTensor& t, Index rows, Index cols) {
    if (t.rows() != rows || t.cols() != cols) {
      throw std::invalid_argument(fmt::format("tensor '{}' is {}x{}, expected {}x{}", t.name, t.rows(),
                                              t.cols(), rows, cols));
    }
  };
  expect(item_emb, item_emb.rows(), d);
  expect(item_matrix, item_emb.rows(), d);
  for (const auto& w : gnn_layers) expect(w, d, d);
  expect(mlp_w1, d, d);
  expect(mlp_b1, 1, d);
  expect(mlp_w2, d, 1);
  expect(mlp_b2, 1, 1);
}

GnnOutput gnn_forward(const SampledSubgraph& subgraph, const ContextGNNParams& params) {
  const auto num_layers = params.gnn_layers.size();
  if (static_cast<std::size_t>(subgraph.hops) > num_layers) {
    throw std::invalid_argument(fmt::format("subgraph depth {} exceeds {} GNN layers", subgraph.hops, num_layers));
  }
  const Index n_u = subgraph.num_local_users();
  const Index n_i = subgraph.num_local_items();
  Matrix h(n_u + n_i, params.channels());
  for (Index r = 0; r < n_u; ++r) h.row(r) = params.user_emb.value.row(subgraph.users[static_cast<std::size_t>(r)]);
  for (Index r = 0; r < n_i; ++r) {
    h.row(n_u + r) = params.item_emb.value.row(subgraph.items[static_cast<std::size_t>(r)]);
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    h = propagate_layer(h, n_u, subgraph.local_edges, layer_direction(l, num_layers), params.gnn_layers[l].value);
  }
  return {h.row(0), h.bottomRows(n_i), subgraph.items};
}

Real mlp_offset(const ContextGNNParams& params, const RowVector<Real>& h_u) {
  const RowVector<Real> hidden = (h_u * params.mlp_w1.value + params.mlp_b1.value).cwiseMax(0.0);
  return (hidden * params.mlp_w2.value)(0, 0) + params.mlp_b2.value(0, 0);
}

namespace {

std::vector<Index> routing_fanouts(std::span<const Index> fanouts, Routing routing) {
  if (routing == Routing::Exact) return std::vector<Index>(fanouts.size(), kUnlimitedFanout);
  return {fanouts.begin(), fanouts.end()};
}

}  // namespace

ScoreVector fused_scores(Index user, const BipartiteGraph& graph, const ContextGNNParams& params,
                         std::span<const Index> fanouts, std::uint64_t rng_seed, Routing routing) {
  const auto caps = routing_fanouts(fanouts, routing);
  const SampledSubgraph sub = sample_subgraph(graph, user, caps, rng_seed);
  const GnnOutput out = gnn_forward(sub, params);

  ScoreVector result;
  result.user = user;
  result.scores = tower_score(out.user, params.item_matrix.value);
  result.branch_mask.assign(static_cast<std::size_t>(graph.num_items()), Branch::Tower);
  if (!out.item_ids.empty()) {
    const Vector pair = pair_score(out.user, out.items);
    const Real offset = mlp_offset(params, out.user);
    for (std::size_t r = 0; r < out.item_ids.size(); ++r) {
      const Index item = out.item_ids[r];
      result.scores(item) = pair(static_cast<Index>(r)) + offset;
      result.branch_mask[static_cast<std::size_t>(item)] = Branch::Pair;
    }
  }
  return result;
}

nn::Var fused_scores_on_tape(nn::Tape& tape, const SampledSubgraph& subgraph, ContextGNNParams& params,
                             std::span<const Index> items) {
  using namespace nn;
  const auto num_layers = params.gnn_layers.size();
  if (static_cast<std::size_t>(subgraph.hops) > num_layers) {
    throw std::invalid_argument("subgraph depth exceeds the number of GNN layers");
  }
  const Index n_u = subgraph.num_local_users();
  Var h = concat_rows(tape, embedding_lookup(tape, params.user_emb, subgraph.users),
                      embedding_lookup(tape, params.item_emb, subgraph.items));
  for (std::size_t l = 0; l < num_layers; ++l) {
    h = message_pass_layer(tape, h, n_u, subgraph.local_edges, layer_direction(l, num_layers),
                           params.gnn_layers[l]);
  }
  const std::array<Index, 1> seed_row{0};
  const Var h_u = gather_rows(tape, h, seed_row);
  const Var hidden = affine(tape, h_u, params.mlp_w1, params.mlp_b1, Activation::Relu);
  const Var offset = affine(tape, hidden, params.mlp_w2, params.mlp_b2, Activation::None);

  // Row of the local item node, or -1 for tower routing.
  std::vector<Index> local_rows;
  local_rows.reserve(items.size());
  for (Index item : items) {
    const auto local = subgraph.local_item(item);
    local_rows.push_back(local ? n_u + *local : -1);
  }
  std::vector<Index> item_ids(items.begin(), items.end());

  const Matrix& hv = h.value();
  const Matrix& q = params.item_matrix.value;
  const Real off = offset.value()(0, 0);
  Matrix out(static_cast<Index>(items.size()), 1);
  for (std::size_t r = 0; r < items.size(); ++r) {
    const Index row = local_rows[r];
    out(static_cast<Index>(r), 0) =
        row >= 0 ? hv.row(row).dot(hv.row(0)) + off : q.row(item_ids[r]).dot(hv.row(0));
  }
  ParamTensor& item_matrix = params.item_matrix;
  return tape.push(std::move(out), [h, offset, &item_matrix, local_rows = std::move(local_rows),
                                    item_ids = std::move(item_ids)](const Matrix& up, const Matrix&, Tape& t) {
    const Matrix& hv = h.value();
    Matrix& g_h = t.grad_of(h);
    Matrix& g_off = t.grad_of(offset);
    for (std::size_t r = 0; r < local_rows.size(); ++r) {
      const Real g = up(static_cast<Index>(r), 0);
      if (g == 0.0) continue;
      const Index row = local_rows[r];
      if (row >= 0) {
        g_h.row(0) += g * hv.row(row);
        g_h.row(row) += g * hv.row(0);
        g_off(0, 0) += g;
      } else {
        g_h.row(0) += g * item_matrix.value.row(item_ids[r]);
        item_matrix.grad.row(item_ids[r]) += g * hv.row(0);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Baseline kernels
// ---------------------------------------------------------------------------

Vector mf_bpr_score(Index user, const Matrix& user_factors, const Matrix& item_factors) {
  return tower_score(user_factors.row(user), item_factors);
}

Eigen::SparseMatrix<Real> normalized_adjacency(const BipartiteGraph& graph) {
  const Index n_u = graph.num_users();
  const Index n = n_u + graph.num_items();
  std::vector<Eigen::Triplet<Real>> entries;
  entries.reserve(static_cast<std::size_t>(2 * graph.num_edges()));
  for (Index u = 0; u < n_u; ++u) {
    const Real du = static_cast<Real>(graph.user_degree(u));
    for (Index i : graph.items_of(u)) {
      const Real w = 1.0 / std::sqrt(du * static_cast<Real>(graph.item_degree(i)));
      entries.emplace_back(u, n_u + i, w);
      entries.emplace_back(n_u + i, u, w);
    }
  }
  Eigen::SparseMatrix<Real> adj(n, n);
  adj.setFromTriplets(entries.begin(), entries.end());
  return adj;
}

namespace {

Matrix layer_mean(const Eigen::SparseMatrix<Real>& adj, const Matrix& base, int layers) {
  Matrix acc = base;
  Matrix cur = base;
  for (int l = 0; l < layers; ++l) {
    cur = adj * cur;
    acc += cur;
  }
  return acc / static_cast<Real>(layers + 1);
}

}  // namespace

std::pair<Matrix, Matrix> lightgcn_propagate(const BipartiteGraph& graph, const Matrix& user_emb,
                                             const Matrix& item_emb, int layers) {
  if (layers < 0) throw std::invalid_argument("layers must be >= 0");
  const Index n_u = graph.num_users();
  Matrix base(n_u + graph.num_items(), user_emb.cols());
  base << user_emb, item_emb;
  if (layers == 0) return {user_emb, item_emb};
  const Matrix out = layer_mean(normalized_adjacency(graph), base, layers);
  return {out.topRows(n_u), out.bottomRows(graph.num_items())};
}

Vector item_filter_score(const BipartiteGraph& graph, Index user, Real smoothing) {
  Vector scores = Vector::Zero(graph.num_items());
  for (Index j : graph.items_of(user)) {
    const Real wj = std::pow(static_cast<Real>(graph.item_degree(j)), -smoothing);
    for (Index v : graph.users_of(j)) {
      for (Index i : graph.items_of(v)) scores(i) += wj;
    }
  }
  for (Index i = 0; i < graph.num_items(); ++i) {
    if (scores(i) != 0.0) scores(i) *= std::pow(static_cast<Real>(graph.item_degree(i)), -smoothing);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Recommender implementations
// ---------------------------------------------------------------------------

std::vector<const nn::ParamTensor*> Recommender::frozen_parameters() const {
  auto view = const_cast<Recommender*>(this)->parameters();
  return {view.begin(), view.end()};
}

std::pair<nn::Var, nn::Var> Recommender::score_triples(nn::Tape&, std::span<const Triple>, std::uint64_t) {
  throw std::logic_error(fmt::format("model '{}' is not trainable", name()));
}

ContextGNNModel::ContextGNNModel(std::shared_ptr<const BipartiteGraph> train_graph, Index channels,
                                 std::vector<Index> fanouts, std::uint64_t seed, Routing routing)
    : graph_(std::move(train_graph)),
      fanouts_(std::move(fanouts)),
      seed_(seed),
      routing_(routing),
      params_(ContextGNNParams::init(graph_->num_users(), graph_->num_items(), channels,
                                     static_cast<Index>(fanouts_.size()), seed)) {}

std::uint64_t ContextGNNModel::scoring_seed() const { return derive_seed(seed_, 0x5c0feULL); }

UserScorer ContextGNNModel::make_scorer() const {
  return [this, seed = scoring_seed()](Index user) {
    return fused_scores(user, *graph_, params_, fanouts_, seed, routing_);
  };
}

std::pair<nn::Var, nn::Var> ContextGNNModel::score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                                           std::uint64_t batch_seed) {
  // Group by user in first-appearance order so one subgraph serves all of a
  // user's triples.
  std::vector<Index> order;
  std::unordered_map<Index, std::vector<std::size_t>> by_user;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    auto [it, inserted] = by_user.try_emplace(batch[t].user);
    if (inserted) order.push_back(batch[t].user);
    it->second.push_back(t);
  }

  const auto caps = routing_fanouts(fanouts_, routing_);
  std::vector<Index> pos_rows(batch.size());
  std::vector<Index> neg_rows(batch.size());
  std::optional<nn::Var> all;
  Index offset = 0;
  for (Index user : order) {
    const auto& members = by_user[user];
    std::vector<Index> items;
    items.reserve(2 * members.size());
    for (std::size_t t : members) items.push_back(batch[t].pos);
    for (std::size_t t : members) items.push_back(batch[t].neg);
    const SampledSubgraph sub = sample_subgraph(*graph_, user, caps, batch_seed);
    const nn::Var scores = fused_scores_on_tape(tape, sub, params_, items);
    const auto m = static_cast<Index>(members.size());
    for (Index k = 0; k < m; ++k) {
      pos_rows[members[static_cast<std::size_t>(k)]] = offset + k;
      neg_rows[members[static_cast<std::size_t>(k)]] = offset + m + k;
    }
    offset += 2 * m;
    all = all ? nn::concat_rows(tape, *all, scores) : scores;
  }
  if (!all) throw std::invalid_argument("empty batch");
  return {nn::gather_rows(tape, *all, pos_rows), nn::gather_rows(tape, *all, neg_rows)};
}

MFBPRModel::MFBPRModel(Index num_users, Index num_items, Index factors, std::uint64_t seed) {
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(factors));
  user_factors_ = nn::ParamTensor("user_factors", uniform_init(num_users, factors, bound, seed, 101));
  item_factors_ = nn::ParamTensor("item_factors", uniform_init(num_items, factors, bound, seed, 102));
}

UserScorer MFBPRModel::make_scorer() const {
  return [this](Index user) {
    return ScoreVector{user, mf_bpr_score(user, user_factors_.value, item_factors_.value), {}};
  };
}

namespace {

struct TripleColumns {
  std::vector<Index> users, pos, neg;
};

TripleColumns split_columns(std::span<const Triple> batch) {
  TripleColumns c;
  for (const Triple& t : batch) {
    c.users.push_back(t.user);
    c.pos.push_back(t.pos);
    c.neg.push_back(t.neg);
  }
  return c;
}

}  // namespace

std::pair<nn::Var, nn::Var> MFBPRModel::score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                                      std::uint64_t) {
  const TripleColumns c = split_columns(batch);
  const nn::Var p = nn::embedding_lookup(tape, user_factors_, c.users);
  const nn::Var qp = nn::embedding_lookup(tape, item_factors_, c.pos);
  const nn::Var qn = nn::embedding_lookup(tape, item_factors_, c.neg);
  return {nn::rowwise_dot(tape, p, qp), nn::rowwise_dot(tape, p, qn)};
}

LightGCNModel::LightGCNModel(std::shared_ptr<const BipartiteGraph> train_graph, Index factors, int layers,
                             std::uint64_t seed)
    : graph_(std::move(train_graph)), adjacency_(normalized_adjacency(*graph_)), layers_(layers) {
  if (layers < 0) throw std::invalid_argument("layers must be >= 0");
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(factors));
  user_emb_ = nn::ParamTensor("user_emb", uniform_init(graph_->num_users(), factors, bound, seed, 201));
  item_emb_ = nn::ParamTensor("item_emb", uniform_init(graph_->num_items(), factors, bound, seed, 202));
}

UserScorer LightGCNModel::make_scorer() const {
  auto [users, items] = lightgcn_propagate(*graph_, user_emb_.value, item_emb_.value, layers_);
  return [users = std::move(users), items = std::move(items)](Index user) {
    return ScoreVector{user, tower_score(users.row(user), items), {}};
  };
}

std::pair<nn::Var, nn::Var> LightGCNModel::score_triples(nn::Tape& tape, std::span<const Triple> batch,
                                                         std::uint64_t) {
  const nn::Var base = nn::concat_rows(tape, nn::param(tape, user_emb_), nn::param(tape, item_emb_));
  const Eigen::SparseMatrix<Real>& adj = adjacency_;
  const int layers = layers_;
  // The normalized adjacency is symmetric, so the backward pass reuses it.
  const nn::Var propagated = tape.push(layer_mean(adj, base.value(), layers),
                                       [base, &adj, layers](const Matrix& up, const Matrix&, nn::Tape& t) {
                                         t.grad_of(base) += layer_mean(adj, up, layers);
                                       });
  TripleColumns c = split_columns(batch);
  const Index n_u = graph_->num_users();
  for (auto& i : c.pos) i += n_u;
  for (auto& i : c.neg) i += n_u;
  const nn::Var p = nn::gather_rows(tape, propagated, c.users);
  const nn::Var qp = nn::gather_rows(tape, propagated, c.pos);
  const nn::Var qn = nn::gather_rows(tape, propagated, c.neg);
  return {nn::rowwise_dot(tape, p, qp), nn::rowwise_dot(tape, p, qn)};
}

ItemFilterModel::ItemFilterModel(std::shared_ptr<const BipartiteGraph> train_graph, Real smoothing)
    : graph_(std::move(train_graph)), smoothing_(smoothing) {}

UserScorer ItemFilterModel::make_scorer() const {
  return [this](Index user) { return ScoreVector{user, item_filter_score(*graph_, user, smoothing_), {}}; };
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "GRVL";

template <typename UInt>
void put_le(std::string& out, UInt value) {
  for (std::size_t b = 0; b < sizeof(UInt); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xffU));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename UInt>
  UInt get() {
    need(sizeof(UInt));
    UInt value = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b) {
      value |= static_cast<UInt>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(UInt);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    const auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError(fmt::format("checkpoint truncated at byte {}", pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(std::span<const nn::ParamTensor* const> tensors) {
  std::string out(kMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const nn::ParamTensor* t : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->name.size()));
    out += t->name;
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t->rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t->cols()));
    for (Index r = 0; r < t->rows(); ++r) {
      for (Index c = 0; c < t->cols(); ++c) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(t->value(r, c)));
    }
  }
  return out;
}

std::vector<nn::ParamTensor> decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw DataError("not a checkpoint: bad magic");
  const auto version = in.get<std::uint8_t>();
  if (version != kCheckpointVersion) throw DataError(fmt::format("unsupported checkpoint version {}", version));
  const auto count = in.get<std::uint32_t>();
  std::vector<nn::ParamTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.take(name_len));
    const auto rank = in.get<std::uint32_t>();
    if (rank != 2) throw DataError(fmt::format("tensor '{}' has unsupported rank {}", name, rank));
    const auto rows = static_cast<Index>(in.get<std::uint64_t>());
    const auto cols = static_cast<Index>(in.get<std::uint64_t>());
    Matrix values(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) values(r, c) = std::bit_cast<double>(in.get<std::uint64_t>());
    }
    out.emplace_back(std::move(name), std::move(values));
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint tensors");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const nn::ParamTensor* const> tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure(fmt::format("{}: cannot open for writing", path.string()));
  const std::string bytes = encode_checkpoint(tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<nn::ParamTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("{}: cannot open checkpoint", path.string()));
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

void restore_checkpoint(std::span<nn::ParamTensor* const> targets, const std::vector<nn::ParamTensor>& saved) {
  std::map<std::string, const nn::ParamTensor*> by_name;
  for (const auto& t : saved) by_name[t.name] = &t;
  for (nn::ParamTensor* target : targets) {
    const auto it = by_name.find(target->name);
    if (it == by_name.end()) throw DataError(fmt::format("checkpoint has no tensor '{}'", target->name));
    if (it->second->rows() != target->rows() || it->second->cols() != target->cols()) {
      throw DataError(fmt::format("checkpoint tensor '{}' has shape {}x{}, expected {}x{}", target->name,
                                  it->second->rows(), it->second->cols(), target->rows(), target->cols()));
    }
    target->value = it->second->value;
  }
}

}  // namespace gravel
