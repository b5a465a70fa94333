#include "support.hpp"

#include "gravel/models.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace gravel;

namespace {

std::shared_ptr<const BipartiteGraph> fixture_graph() {
  const auto edges = gravel::testing::small_fixture_edges();
  return std::make_shared<const BipartiteGraph>(6, 8, edges);
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

/// Two layers written out with explicit loops: layer 0 moves users -> items
/// (sender hop 2), layer 1 moves items -> users (sender hop 1).
std::vector<double> unrolled_two_layer_user(const SampledSubgraph& sub, const ContextGNNParams& p) {
  const std::size_t nu = sub.users.size();
  const std::size_t ni = sub.items.size();
  const auto d = static_cast<std::size_t>(p.channels());
  std::vector<std::vector<double>> h(nu + ni, std::vector<double>(d));
  for (std::size_t r = 0; r < nu; ++r) {
    for (std::size_t c = 0; c < d; ++c) h[r][c] = p.user_emb.value(sub.users[r], static_cast<Index>(c));
  }
  for (std::size_t r = 0; r < ni; ++r) {
    for (std::size_t c = 0; c < d; ++c) h[nu + r][c] = p.item_emb.value(sub.items[r], static_cast<Index>(c));
  }
  for (int layer = 0; layer < 2; ++layer) {
    std::vector<std::vector<double>> agg = h;
    for (const LocalEdge& e : sub.local_edges) {
      const auto u = static_cast<std::size_t>(e.user);
      const auto i = nu + static_cast<std::size_t>(e.item);
      for (std::size_t c = 0; c < d; ++c) {
        if (layer == 0) {
          agg[i][c] += h[u][c];
        } else {
          agg[u][c] += h[i][c];
        }
      }
    }
    const Matrix& w = p.gnn_layers[static_cast<std::size_t>(layer)].value;
    for (std::size_t r = 0; r < nu + ni; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += agg[r][k] * w(static_cast<Index>(k), static_cast<Index>(c));
        h[r][c] = relu(acc);
      }
    }
  }
  return h[0];
}

}  // namespace

TEST_CASE("layer directions end with items delivering to the seed user") {
  CHECK(layer_direction(0, 1) == nn::Direction::ItemsToUsers);
  CHECK(layer_direction(0, 2) == nn::Direction::UsersToItems);
  CHECK(layer_direction(1, 2) == nn::Direction::ItemsToUsers);
  CHECK(layer_direction(3, 4) == nn::Direction::ItemsToUsers);
}

TEST_CASE("gnn_forward equals a hand-unrolled two-layer computation") {
  const auto g = fixture_graph();
  const auto params = ContextGNNParams::init(6, 8, 5, 2, 17);
  const std::vector<Index> fanouts(2, kUnlimitedFanout);
  for (Index u = 0; u < 6; ++u) {
    const auto sub = sample_subgraph(*g, u, fanouts, 3);
    const auto out = gnn_forward(sub, params);
    const auto want = unrolled_two_layer_user(sub, params);
    for (Index c = 0; c < 5; ++c) CHECK(out.user(c) == doctest::Approx(want[static_cast<std::size_t>(c)]).epsilon(1e-12));
  }
}

TEST_CASE("fused scores route contained items to the pair branch") {
  const auto g = fixture_graph();
  const auto params = ContextGNNParams::init(6, 8, 4, 2, 21);
  const std::vector<Index> fanouts{1, 1};
  const auto sv = fused_scores(0, *g, params, fanouts, 9);
  const auto sub = sample_subgraph(*g, 0, fanouts, 9);
  const auto out = gnn_forward(sub, params);
  const Real off = mlp_offset(params, out.user);
  for (Index i = 0; i < 8; ++i) {
    const auto local = sub.local_item(i);
    if (local) {
      CHECK(sv.branch_mask[static_cast<std::size_t>(i)] == Branch::Pair);
      CHECK(sv.scores(i) == doctest::Approx(out.items.row(*local).dot(out.user) + off));
    } else {
      CHECK(sv.branch_mask[static_cast<std::size_t>(i)] == Branch::Tower);
      CHECK(sv.scores(i) == doctest::Approx(params.item_matrix.value.row(i).dot(out.user)));
    }
  }
}

TEST_CASE("training scores on the tape agree with the frozen scorer") {
  const auto g = fixture_graph();
  ContextGNNModel model(g, 4, {2, 2}, 5);
  const std::vector<Triple> batch{{0, 1, 7}, {2, 3, 0}, {0, 4, 6}};
  nn::Tape tape;
  const auto [pos, neg] = model.score_triples(tape, batch, 77);
  for (std::size_t t = 0; t < batch.size(); ++t) {
    const auto sv = fused_scores(batch[t].user, *g, model.params(), model.fanouts(), 77);
    CHECK(pos.value()(static_cast<Index>(t), 0) == doctest::Approx(sv.scores(batch[t].pos)).epsilon(1e-12));
    CHECK(neg.value()(static_cast<Index>(t), 0) == doctest::Approx(sv.scores(batch[t].neg)).epsilon(1e-12));
  }
}

TEST_CASE("baseline models pass finite-difference checks") {
  const auto g = fixture_graph();
  const std::vector<Triple> batch{{0, 1, 7}, {3, 6, 2}, {4, 5, 0}};
  MFBPRModel mf(6, 8, 3, 1);
  LightGCNModel lg(g, 3, 2, 1);
  for (Recommender* m : std::vector<Recommender*>{&mf, &lg}) {
    auto params = m->parameters();
    const auto report = nn::grad_check(
        [&](nn::Tape& t) {
          auto [p, n] = m->score_triples(t, batch, 0);
          return nn::bpr_loss(t, p, n);
        },
        params, 1e-6, 1e-6);
    CHECK(report.passed());
  }
}

TEST_CASE("lightgcn propagation matches a dense reference") {
  const auto g = fixture_graph();
  const Matrix ue = uniform_init(6, 3, 1.0, 4, 1);
  const Matrix ie = uniform_init(8, 3, 1.0, 4, 2);
  const int layers = 3;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(14, 14);
  for (const Edge& e : gravel::testing::small_fixture_edges()) {
    const double w = 1.0 / std::sqrt(static_cast<double>(g->user_degree(e.user) * g->item_degree(e.item)));
    a(e.user, 6 + e.item) = w;
    a(6 + e.item, e.user) = w;
  }
  Eigen::MatrixXd e0(14, 3);
  e0 << ue, ie;
  Eigen::MatrixXd acc = e0, cur = e0;
  for (int l = 0; l < layers; ++l) {
    cur = a * cur;
    acc += cur;
  }
  acc /= layers + 1;
  const auto [u, i] = lightgcn_propagate(*g, ue, ie, layers);
  CHECK((u - acc.topRows(6)).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((i - acc.bottomRows(8)).cwiseAbs().maxCoeff() < 1e-13);
  const auto [u0, i0] = lightgcn_propagate(*g, ue, ie, 0);
  CHECK(u0 == ue);
}

TEST_CASE("item filter equals the normalized co-occurrence product") {
  const auto g = fixture_graph();
  const double s = 0.5;
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(6, 8);
  for (const Edge& e : gravel::testing::small_fixture_edges()) r(e.user, e.item) = 1.0;
  const Eigen::MatrixXd c = r.transpose() * r;
  for (Index u = 0; u < 6; ++u) {
    const Vector got = item_filter_score(*g, u, s);
    for (Index i = 0; i < 8; ++i) {
      double want = 0.0;
      for (Index j = 0; j < 8; ++j) {
        if (r(u, j) == 0.0 || c(j, i) == 0.0) continue;
        want += c(j, i) / (std::pow(c(j, j), s) * std::pow(c(i, i), s));
      }
      CHECK(got(i) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkpoint bytes round-trip and reject corruption") {
  const auto g = fixture_graph();
  ContextGNNModel model(g, 3, {2, 2}, 8);
  const auto frozen = std::as_const(model).frozen_parameters();
  const std::string bytes = encode_checkpoint(frozen);
  CHECK(bytes.substr(0, 4) == "GRVL");
  CHECK(static_cast<unsigned char>(bytes[4]) == kCheckpointVersion);
  const auto decoded = decode_checkpoint(bytes);
  REQUIRE(decoded.size() == frozen.size());
  for (std::size_t k = 0; k < frozen.size(); ++k) {
    CHECK(decoded[k].name == frozen[k]->name);
    CHECK(decoded[k].value == frozen[k]->value);
  }
  CHECK(encode_checkpoint(frozen) == bytes);

  ContextGNNModel other(g, 3, {2, 2}, 99);
  auto targets = other.parameters();
  restore_checkpoint(targets, decoded);
  CHECK(other.params().item_matrix.value == model.params().item_matrix.value);

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);

  ContextGNNModel wide(g, 4, {2, 2}, 1);
  auto wide_targets = wide.parameters();
  CHECK_THROWS_AS(restore_checkpoint(wide_targets, decoded), DataError);
}

TEST_CASE("initialization stays inside the uniform bound and varies by salt") {
  const Matrix a = uniform_init(50, 8, 0.25, 3, 1);
  const Matrix b = uniform_init(50, 8, 0.25, 3, 2);
  CHECK(a.cwiseAbs().maxCoeff() <= 0.25);
  CHECK(a != b);
  CHECK(a == uniform_init(50, 8, 0.25, 3, 1));
}
