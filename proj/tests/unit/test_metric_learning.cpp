#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cfm/error.hpp"
#include "cfm/metric_learning.hpp"
#include "cfm/rng.hpp"

using namespace cfm;
using namespace cfm::ml;

namespace {

// Independent oracle: quadratic-count ranks over the x-sorted sequence.
double xicor_bruteforce(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
  std::vector<double> r(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (ys[j] < ys[i] || (ys[j] == ys[i] && j <= i)) r[i] += 1.0;
    }
  }
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) sum += std::fabs(r[i + 1] - r[i]);
  return 1.0 - 3.0 * sum / (static_cast<double>(n) * n - 1.0);
}

}  // namespace

TEST_CASE("huber loss values and knee") {
  CHECK(huber_loss(0.7, 0.7, 1.0) == 0.0);
  CHECK(huber_loss(1.0, 0.5, 1.0) == doctest::Approx(0.125));
  CHECK(huber_loss(3.0, 0.0, 1.0) == doctest::Approx(2.5));
  CHECK_THROWS_AS(huber_loss(1.0, 0.0, 0.0), NonpositiveDeltaError);
  CHECK_THROWS_AS(huber_loss(1.0, 0.0, -1.0), NonpositiveDeltaError);

  for (double pred : {0.3, 1.8, -2.4}) {
    const double h = 1e-7;
    const double fd =
        (huber_loss(pred + h, 0.5, 1.0) - huber_loss(pred - h, 0.5, 1.0)) / (2 * h);
    CHECK(huber_loss_grad(pred, 0.5, 1.0) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("contrastive loss cases") {
  CHECK(contrastive_loss(0.3, 0.0, 0.1) == doctest::Approx(0.3));
  CHECK(contrastive_loss(0.3, 1.0, 0.1) == doctest::Approx(0.0));
  CHECK(contrastive_loss(0.05, 1.0, 0.1) == doctest::Approx(0.05));
  CHECK_THROWS_AS(contrastive_loss(0.1, 1.0, -0.5), ConfigError);
}

TEST_CASE("triplet loss cases") {
  CHECK(triplet_loss(0.2, 0.5, 0.0) == 0.0);
  CHECK(triplet_loss(0.5, 0.2, 0.0) == doctest::Approx(0.3));
  CHECK(triplet_loss(0.4, 0.4, 0.0) == 0.0);
  CHECK(triplet_loss(0.2, 0.5, 0.4) == doctest::Approx(0.1));
}

TEST_CASE("xicor hand cases") {
  std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> inc = {10, 20, 30, 40, 50};
  CHECK(xicor(x, inc) == doctest::Approx(0.5));  // (n-2)/(n+1)
  std::vector<double> dec = {50, 40, 30, 20, 10};
  CHECK(xicor(x, dec) == doctest::Approx(0.5));
  // y ranks after x-sort: [2, 4, 1, 5, 3]
  std::vector<double> pattern = {20, 40, 10, 50, 30};
  CHECK(xicor(x, pattern) == doctest::Approx(-0.375));
}

TEST_CASE("xicor equals the brute-force oracle on random vectors") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(49));
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    const double fast = xicor(x, y);
    CHECK(std::fabs(fast - xicor_bruteforce(x, y)) <= 1e-12);
    CHECK(fast >= -0.5);
    CHECK(fast <= 1.0);

    // Rank statistic: invariant to strictly monotone transforms of x.
    std::vector<double> tx(n);
    for (int i = 0; i < n; ++i) tx[i] = std::exp(0.5 * x[i]) + 3.0;
    CHECK(xicor(tx, y) == doctest::Approx(fast).epsilon(1e-12));
  }
}

TEST_CASE("xicor input validation") {
  std::vector<double> x = {1, 2, 3};
  std::vector<double> y = {1, 2};
  CHECK_THROWS_AS(xicor(x, y), LengthMismatchError);
  std::vector<double> one = {1.0};
  CHECK_THROWS_AS(xicor(one, one), DegenerateBatchError);
}

TEST_CASE("decorrelation penalty conventions") {
  Rng rng(5);
  nn::Matrix single(8, 1);
  for (auto& v : single.data) v = rng.normal();
  CHECK(decorrelation_penalty(single, 1.0) == 0.0);

  // Duplicated coordinates are maximally dependent.
  nn::Matrix dup(64, 2);
  for (int i = 0; i < 64; ++i) {
    const double v = rng.normal();
    dup.at(i, 0) = v;
    dup.at(i, 1) = v;
  }
  const double dep = decorrelation_penalty(dup, 1.0);
  CHECK(dep > 1.2);
  CHECK(dep <= std::sqrt(2.0) + 1e-9);

  // Independent coordinates sit clearly below the dependent case.
  nn::Matrix indep(1000, 2);
  for (auto& v : indep.data) v = rng.normal();
  const double ind = decorrelation_penalty(indep, 1.0);
  CHECK(ind <= dep - 0.5);

  // A constant coordinate contributes 1 per off-diagonal entry.
  nn::Matrix constant(16, 2);
  for (int i = 0; i < 16; ++i) {
    constant.at(i, 0) = 2.5;
    constant.at(i, 1) = rng.normal();
  }
  CHECK(decorrelation_penalty(constant, 1.0) >= 1.0);

  nn::Matrix tiny(3, 2);
  CHECK_THROWS_AS(decorrelation_penalty(tiny, 1.0), DegenerateBatchError);
}

TEST_CASE("decorrelation gradient matches finite differences") {
  Rng rng(31);
  nn::Matrix e(10, 3);
  for (auto& v : e.data) v = rng.uniform(-1.0, 1.0);

  DecorrelationGrad res = decorrelation_penalty_with_grad(e, 1.0);
  CHECK(res.penalty == doctest::Approx(decorrelation_penalty(e, 1.0)));

  const double h = 1e-7;
  for (int i = 0; i < e.rows; ++i) {
    for (int j = 0; j < e.cols; ++j) {
      nn::Matrix ep = e, em = e;
      ep.at(i, j) += h;
      em.at(i, j) -= h;
      const double fd =
          (decorrelation_penalty(ep, 1.0) - decorrelation_penalty(em, 1.0)) / (2 * h);
      CHECK(res.grad.at(i, j) == doctest::Approx(fd).epsilon(5e-4).scale(1.0));
    }
  }
}

TEST_CASE("xicor matrix diagnostics") {
  Rng rng(7);
  nn::Matrix e(200, 2);
  for (int i = 0; i < e.rows; ++i) {
    e.at(i, 0) = rng.normal();
    e.at(i, 1) = e.at(i, 0) * e.at(i, 0);  // functionally dependent
  }
  nn::Matrix xi = xicor_matrix(e);
  CHECK(xi.at(0, 0) == 1.0);
  CHECK(xi.at(1, 1) == 1.0);
  CHECK(xi.at(0, 1) > 0.8);
}

TEST_CASE("build_pairs: balance, truthful tags and determinism") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  const double delta = 0.1;

  auto pairs = build_pairs(oracle, delta, 400, 3, false);
  REQUIRE(pairs.size() == 400);
  int inside = 0, zeros = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double d = oracle.distance(pairs[i].a, pairs[i].b);
    CHECK(pairs[i].tag == doctest::Approx(d).epsilon(1e-12));
    if (d <= delta) ++inside;
    if (d <= 1e-12) ++zeros;
    if (i % 2 == 0) {
      CHECK(d <= delta + 1e-12);
    } else {
      CHECK(d > delta);
    }
  }
  CHECK(inside == 200);
  CHECK(zeros >= 3);  // exact twins occur at roughly 10% of the positives

  auto labeled = build_pairs(oracle, delta, 400, 3, true);
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const double d = oracle.distance(labeled[i].a, labeled[i].b);
    CHECK(labeled[i].tag == (d > delta ? 1.0 : 0.0));
  }

  auto again = build_pairs(oracle, delta, 400, 3, false);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].a == again[i].a);
    CHECK(pairs[i].b == again[i].b);
    CHECK(pairs[i].tag == again[i].tag);
  }
  CHECK_THROWS_AS(build_pairs(oracle, delta, 1, 0, false), ConfigError);
}

TEST_CASE("build_triplets: generation invariant and ball monotonicity") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  auto triplets = build_triplets(oracle, 0.1, 1000, 11);
  REQUIRE(triplets.size() == 1000);
  for (const auto& t : triplets) {
    CHECK(oracle.distance(t.anchor, t.positive) <= 0.1 + 1e-12);
    CHECK(oracle.distance(t.anchor, t.negative) > 0.1);
    // A positive for radius 0.1 also lies inside the 0.2 ball.
    CHECK(oracle.distance(t.anchor, t.positive) <= 0.2 + 1e-12);
  }
}

TEST_CASE("train_metric: determinism and zero-epoch behaviour") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  MetricTrainConfig cfg;
  cfg.scenario = Scenario::Distance;
  cfg.delta = 0.1;
  cfg.epochs = 3;
  cfg.batch_size = 50;
  cfg.depth = 2;
  cfg.hidden_width = 16;
  cfg.seed = 4;
  MetricDataset data = build_dataset(oracle, cfg, 200);

  TrainedMetric a = train_metric(oracle, cfg, data);
  TrainedMetric b = train_metric(oracle, cfg, data);
  CHECK(a.metric.net.flat_params() == b.metric.net.flat_params());
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(a.epoch_loss.size() == 3);

  MetricTrainConfig zero = cfg;
  zero.epochs = 0;
  TrainedMetric init = train_metric(oracle, zero, data);
  Rng rng(cfg.seed);
  nn::FeedForwardNet fresh = nn::FeedForwardNet::init({3, 16, 16, 2}, rng);
  CHECK(init.metric.net.flat_params() == fresh.flat_params());
  CHECK(init.epoch_loss.empty());

  MetricDataset empty;
  CHECK_THROWS_AS(train_metric(oracle, cfg, empty), ConfigError);
}

TEST_CASE("train_metric learns the lin latent metric at small scale") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  MetricTrainConfig cfg;
  cfg.scenario = Scenario::Distance;
  cfg.delta = 0.1;
  cfg.epochs = 25;
  cfg.batch_size = 100;
  cfg.depth = 2;
  cfg.hidden_width = 32;
  cfg.seed = 0;
  MetricDataset data = build_dataset(oracle, cfg, 1000);
  TrainedMetric trained = train_metric(oracle, cfg, data);

  const auto test = build_pairs(oracle, cfg.delta, 400, 777, false);
  const LearnedMetric& lm = trained.metric;
  MetricReport rep = eval_metric(
      [&lm](const Instance& a, const Instance& b) { return lm.distance(a, b); }, oracle,
      cfg.delta, test);
  CHECK(rep.acc >= 0.85);
  CHECK(rep.mae <= 0.08);
}

TEST_CASE("learned metric is a pseudo-metric") {
  Rng rng(17);
  LearnedMetric lm{nn::FeedForwardNet::init({3, 8, 2}, rng), BaseMetric::euclidean()};
  Scm lin = make_lin_scm();
  auto draws = lin.sample(300, 23);
  for (int i = 0; i + 2 < 300; i += 3) {
    const Instance& a = draws[i].first;
    const Instance& b = draws[i + 1].first;
    const Instance& c = draws[i + 2].first;
    const double ab = lm.distance(a, b);
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(lm.distance(b, a)).epsilon(1e-12));
    CHECK(lm.distance(a, c) <= ab + lm.distance(b, c) + 1e-9);
  }
}

TEST_CASE("eval_metric: oracle self-evaluation and a hand confusion") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  const auto pairs = build_pairs(oracle, 0.1, 200, 5, false);

  MetricReport self = eval_metric(
      [&oracle](const Instance& a, const Instance& b) { return oracle.distance(a, b); },
      oracle, 0.1, pairs);
  CHECK(self.acc == 1.0);
  CHECK(self.mae == 0.0);
  CHECK(self.rmse == 0.0);
  CHECK(self.fn == 0.0);
  CHECK(self.fp == 0.0);
  CHECK(self.mcc == 1.0);

  // Scheduled predictions produce TP=45, TN=40, FP=10, FN=5.
  std::vector<PairExample> staged;
  const Instance v = {1, 2.5, -1.0};
  const Instance far = {1, 3.5, -1.0};  // oracle distance sqrt(2): true label 1
  for (int i = 0; i < 50; ++i) staged.push_back({v, far, 0.0});
  for (int i = 0; i < 50; ++i) staged.push_back({v, v, 0.0});
  int call = 0;
  auto scripted = [&call](const Instance&, const Instance&) {
    const int i = call++;
    if (i < 50) return i < 45 ? 1.0 : 0.0;  // 45 TP, 5 FN
    return i - 50 < 40 ? 0.0 : 1.0;         // 40 TN, 10 FP
  };
  MetricReport rep = eval_metric(scripted, oracle, 0.1, staged);
  CHECK(rep.acc == doctest::Approx(0.85));
  CHECK(rep.mcc == doctest::Approx(0.7035).epsilon(1e-3));
  CHECK(rep.fn == doctest::Approx(0.1));  // 5 / 50
  CHECK(rep.fp == doctest::Approx(0.2));  // 10 / 50

  MetricReport ones = eval_metric(
      [](const Instance&, const Instance&) { return 1.0; }, oracle, 0.1, staged);
  CHECK(ones.mcc == 0.0);

  CHECK_THROWS_AS(eval_metric(scripted, oracle, 0.1, {}), EmptyTestSetError);
}

TEST_CASE("label semantics: dissimilar pairs are the positive class") {
  OracleMetric oracle(make_lin_scm(), BaseMetric::euclidean());
  const Instance v = {1, 2.5, -1.0};
  const Instance w = {1, 3.5, -1.0};
  const double d = oracle.distance(v, w);
  CHECK(d == doctest::Approx(std::sqrt(2.0)));
  CHECK((d > 0.2 ? 1.0 : 0.0) == 1.0);

  Scm lin = make_lin_scm();
  const Instance twin = lin.twins(v, {{0.0}})[0];
  CHECK(oracle.distance(v, twin) <= 1e-9);           // distance tag 0
  CHECK((oracle.distance(v, twin) > 0.2) == false);  // label 0 for any delta > 0
}

TEST_CASE("config resolution: margins and embedding dims") {
  Scm lin = make_lin_scm();
  MetricTrainConfig cfg;
  cfg.delta = 0.15;
  cfg.scenario = Scenario::Label;
  CHECK(cfg.resolved_margin() == doctest::Approx(0.15));
  cfg.scenario = Scenario::Triplet;
  CHECK(cfg.resolved_margin() == 0.0);
  cfg.margin = 0.3;
  CHECK(cfg.resolved_margin() == doctest::Approx(0.3));

  cfg.knowledge = EmbeddingKnowledge::Known;
  CHECK(cfg.resolved_embedding_dim(lin) == 2);
  cfg.knowledge = EmbeddingKnowledge::Unknown;
  CHECK(cfg.resolved_embedding_dim(lin) == 2);  // ceil(3/2)

  CHECK(scenario_from_string("distance") == Scenario::Distance);
  CHECK(to_string(Scenario::Triplet) == "triplet");
  CHECK_THROWS_AS(scenario_from_string("nope"), ConfigError);
}
