#include "support.hpp"

#include "gravel/data_io.hpp"
#include "gravel/eval.hpp"
#include "gravel/training.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace gravel;

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.neigh = {16, 16, 16};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.aggr = "mean";
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("metric tags parse and print") {
  CHECK(MetricTag::parse("Recall@20").str() == "Recall@20");
  CHECK(MetricTag::parse("nDCG@10").kind == MetricKind::NDCG);
  CHECK_THROWS_AS(MetricTag::parse("MAP@10"), ConfigError);
  CHECK_THROWS_AS(MetricTag::parse("Recall@x"), ConfigError);
}

TEST_CASE("negatives avoid positives and are uniform over the rest") {
  const std::vector<Edge> edges{{0, 0}, {0, 3}, {0, 7}};
  const BipartiteGraph g(1, 10, edges);
  std::mt19937_64 rng(3);
  std::vector<int> counts(10, 0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) counts[static_cast<std::size_t>(sample_negatives(g, 0, 1, rng).front())]++;
  CHECK(counts[0] == 0);
  CHECK(counts[3] == 0);
  CHECK(counts[7] == 0);
  const double expected = draws / 7.0;
  double chi2 = 0.0;
  for (int i : {1, 2, 4, 5, 6, 8, 9}) chi2 += std::pow(counts[static_cast<std::size_t>(i)] - expected, 2) / expected;
  // 6 degrees of freedom; 22.46 is the 0.999 quantile.
  CHECK(chi2 < 22.46);

  const auto many = sample_negatives(g, 0, 7, rng);
  CHECK(std::set<Index>(many.begin(), many.end()).size() == 7);
  CHECK_THROWS_AS(sample_negatives(g, 0, 8, rng), DataError);
}

TEST_CASE("scalar bpr loss matches an extended-precision reference") {
  const std::vector<Real> pos{3.0, -2.0, 0.1, 40.0, -40.0};
  const std::vector<Real> neg{1.0, 2.5, 0.1, -1.0, 1.0};
  __float128 want = 0;
  for (std::size_t k = 0; k < pos.size(); ++k) {
    const long double x = static_cast<long double>(pos[k]) - static_cast<long double>(neg[k]);
    want += static_cast<__float128>(std::log1p(std::exp(-x)));
  }
  want /= pos.size();
  CHECK(std::abs(bpr_loss(pos, neg) - static_cast<double>(want)) < 1e-14);
}

TEST_CASE("adam step follows the bias-corrected update") {
  nn::ParamTensor p("w", Matrix::Constant(1, 2, 1.0));
  p.grad << 0.5, -2.0;
  AdamState s;
  const AdamOptions o{0.1};
  adam_step(p, s, o);
  // After one step m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps).
  CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(p.value(0, 1) == doctest::Approx(1.0 + 0.1 * 2.0 / (2.0 + 1e-8)));
  p.grad(0, 1) = std::nan("");
  CHECK_THROWS_AS(adam_step(p, s, o), RuntimeFailure);
}

namespace {

InteractionDataset tiny_dataset() {
  io::SyntheticSpec spec;
  spec.num_users = 40;
  spec.num_items = 60;
  spec.blocks = 2;
  spec.seed = 1;
  return io::generate_synthetic(spec);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.lr = 0.01;
  c.epochs = 4;
  c.batch_size = 32;
  c.max_steps = 1000;
  c.validation_rate = 2;
  c.factors = 8;
  c.channels = 8;
  c.n_layers = 2;
  c.neigh = {4, 4};
  return c;
}

}  // namespace

TEST_CASE("training is deterministic and respects the step cap") {
  const auto ds = tiny_dataset();
  const auto graph = std::make_shared<const BipartiteGraph>(build_graph(ds, Split::Train));
  auto config = tiny_config();

  ContextGNNModel a(graph, 8, config.neigh, config.seed);
  ContextGNNModel b(graph, 8, config.neigh, config.seed);
  const auto ra = train(a, ds, config);
  const auto rb = train(b, ds, config);
  std::ostringstream la, lb;
  write_train_log(la, ra);
  write_train_log(lb, rb);
  CHECK(la.str() == lb.str());
  CHECK(a.params().user_emb.value == b.params().user_emb.value);
  CHECK(la.str().rfind("# validation_split: test\nstep\tepoch\tloss\tval_metric\tval_value\n", 0) == 0);
  CHECK(ra.log.size() == 4);
  CHECK(ra.log[0].val_value == std::nullopt);
  CHECK(ra.log[1].val_value.has_value());
  CHECK(ra.validated_on_test);

  config.max_steps = 5;
  MFBPRModel mf(ds.num_users, ds.num_items, 8, 1);
  const auto rc = train(mf, ds, config);
  CHECK(rc.steps == 5);
  REQUIRE(rc.log.size() == 1);
  CHECK(rc.log.back().val_value.has_value());
}

TEST_CASE("training lowers the loss and keeps the best checkpoint") {
  const auto ds = tiny_dataset();
  auto config = tiny_config();
  config.epochs = 10;
  config.validation_rate = 1;
  MFBPRModel mf(ds.num_users, ds.num_items, 8, 2);
  const auto r = train(mf, ds, config);
  CHECK(r.log.back().loss < r.log.front().loss);
  REQUIRE(r.best_metric.has_value());
  const auto report = evaluate(mf, ds, 20);
  CHECK(report.recall == doctest::Approx(*r.best_metric).epsilon(1e-12));
}

TEST_CASE("training-free models are rejected by the trainer") {
  const auto ds = tiny_dataset();
  const auto graph = std::make_shared<const BipartiteGraph>(build_graph(ds, Split::Train));
  ItemFilterModel f(graph, 0.5);
  CHECK_THROWS_AS(train(f, ds, tiny_config()), std::logic_error);
}
