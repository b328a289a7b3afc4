#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"
#include "cfm/scm.hpp"

using namespace cfm;

namespace {

void check_vec(const std::vector<double>& got, const std::vector<double>& want,
               double tol = 1e-9) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::fabs(got[i] - want[i]) <= tol);
  }
}

}  // namespace

TEST_CASE("dag validation") {
  Dag ok{3, {{}, {0}, {0, 1}}};
  CHECK(ok.topological_order().size() == 3);

  Dag cycle{2, {{1}, {0}}};
  CHECK_THROWS_AS(cycle.topological_order(), ConfigError);
  Dag self{1, {{0}}};
  CHECK_THROWS_AS(self.topological_order(), ConfigError);
  Dag bad{1, {{4}}};
  CHECK_THROWS_AS(bad.topological_order(), ConfigError);
}

TEST_CASE("lin reduce: hand values") {
  Scm lin = make_lin_scm();
  check_vec(lin.reduce({0, 0, 0}), {0, 0, 0});
  // s = 1, x1 = 2*1 + 0.5 = 2.5, x2 = 1 - 2.5 + 0.5 = -1.0
  check_vec(lin.reduce({1, 0.5, 0.5}), {1, 2.5, -1.0});
}

TEST_CASE("lin abduct: hand values") {
  Scm lin = make_lin_scm();
  check_vec(lin.abduct({1, 2.5, -1.0}), {1, 0.5, 0.5});
  check_vec(lin.abduct({0, 0, 0}), {0, 0, 0});
}

TEST_CASE("example1 abduct inverts g") {
  Scm ex1 = make_example1_scm();
  check_vec(ex1.abduct({1, 1}), {1, 1});
  check_vec(ex1.abduct({-1, 0}), {0, 0});
  CHECK_THROWS_AS(ex1.abduct({0, 0.5}), OutOfSupportError);
}

TEST_CASE("example2 reduce and counterfactual split the two variants") {
  Scm a = make_example2_scm(false);
  Scm b = make_example2_scm(true);
  check_vec(a.reduce({1, 1, 0}), {1, 0, 0});

  const Instance v = {1, 0, 0};
  const Intervention iv = Intervention::hard({0}, {0.0});
  check_vec(a.counterfactual(v, iv), {0, 0, 0});
  check_vec(b.counterfactual(v, iv), {0, 0, 2.0});

  Scm b5 = make_example2_scm(true, 5.0);
  check_vec(b5.counterfactual(v, iv), {0, 0, 5.0});
}

TEST_CASE("counterfactual hand cases") {
  Scm ex1 = make_example1_scm();
  check_vec(ex1.counterfactual({1, 1}, Intervention::hard({1}, {-1.0})), {1, -1});

  Scm lin = make_lin_scm();
  check_vec(lin.counterfactual({1, 2.5, -1.0}, Intervention::hard({0}, {0.0})),
            {0, 0.5, 0.0});
}

TEST_CASE("shift and noise-shift interventions") {
  Scm lin = make_lin_scm();
  const Instance v = {1, 2.5, -1.0};
  // Feature shift adds after the equation; noise shift adds inside.
  // For LIN both act additively on the own node but the shift on x1
  // propagates differently: NoiseShift(delta_x1) changes x2 via -x1.
  Instance shifted = lin.counterfactual(v, Intervention::shift({0, 1.0, 0}));
  CHECK(shifted[1] == doctest::Approx(3.5));
  CHECK(shifted[2] == doctest::Approx(-2.0));  // x2 = 1 - 3.5 + 0.5

  Instance nshift = lin.counterfactual(v, Intervention::noise_shift({0, 1.0, 0}));
  CHECK(nshift[1] == doctest::Approx(3.5));
  CHECK(nshift[2] == doctest::Approx(-2.0));

  // The two differ where noise enters non-additively: v2 = v1 * u2.
  Scm ex1 = make_example1_scm();
  const Instance w = {-1, -1};  // u = (0, 1)
  Instance s1 = ex1.counterfactual(w, Intervention::shift({0, 0.5}));
  Instance s2 = ex1.counterfactual(w, Intervention::noise_shift({0, 0.5}));
  CHECK(s1[1] == doctest::Approx(-0.5));  // v1*u2 + 0.5
  CHECK(s2[1] == doctest::Approx(-1.5));  // v1*(u2 + 0.5)
}

TEST_CASE("twins: hand cases and idempotence") {
  Scm lin = make_lin_scm();
  const Instance v = {1, 2.5, -1.0};
  auto tw = lin.twins(v, {{0.0}, {1.0}});
  REQUIRE(tw.size() == 2);
  check_vec(tw[0], {0, 0.5, 0.0});
  check_vec(tw[1], {1, 2.5, -1.0});

  Scm ex1 = make_example1_scm();
  auto tw1 = ex1.twins({1, 1}, {{-1.0}, {0.0}, {1.0}});
  REQUIRE(tw1.size() == 3);
  check_vec(tw1[0], {1, -1});
  check_vec(tw1[1], {1, 0});
  check_vec(tw1[2], {1, 1});

  // Twin at the own level is the identity.
  auto own = lin.twins(v, {{1.0}});
  check_vec(own[0], v);

  // Hard intervention is a projection: twins of a twin equal the twins.
  auto tw_again = lin.twins(tw[0]);
  auto tw_all = lin.twins(v);
  REQUIRE(tw_again.size() == tw_all.size());
  for (std::size_t i = 0; i < tw_all.size(); ++i) check_vec(tw_again[i], tw_all[i]);
}

TEST_CASE("semilatent: hand values and inverse") {
  Scm lin = make_lin_scm();
  SemiLatentPoint q = lin.to_semilatent({1, 2.5, -1.0});
  check_vec(q.sensitive, {1});
  check_vec(q.latent, {0.5, 0.5});

  SemiLatentPoint q0;
  q0.sensitive = {0.0};
  q0.latent = {0.5, 0.5};
  check_vec(lin.from_semilatent(q0), {0, 0.5, 0.0});

  SemiLatentPoint zq = lin.to_semilatent({0, 0, 0});
  check_vec(zq.sensitive, {0});
  check_vec(zq.latent, {0, 0});
  check_vec(lin.from_semilatent(zq), {0, 0, 0});
}

TEST_CASE("round trips on sampled instances for every builtin") {
  const std::vector<Scm> models = {make_lin_scm(), make_nlm_scm(), make_example1_scm(),
                                   make_example2_scm(false), make_example2_scm(true)};
  for (const Scm& scm : models) {
    auto draws = scm.sample(1000, 7);
    double worst = 0.0;
    for (const auto& [v, u] : draws) {
      const Instance v2 = scm.reduce(scm.abduct(v));
      const Instance v3 = scm.from_semilatent(scm.to_semilatent(v));
      for (std::size_t i = 0; i < v.size(); ++i) {
        worst = std::max(worst, std::fabs(v2[i] - v[i]));
        worst = std::max(worst, std::fabs(v3[i] - v[i]));
      }
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("sampling is deterministic per seed and matches the reduced form") {
  Scm lin = make_lin_scm();
  auto a = lin.sample(50, 123);
  auto b = lin.sample(50, 123);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    check_vec(lin.reduce(a[i].second), a[i].first, 1e-12);
  }
  CHECK_THROWS_AS(lin.sample(0, 1), ConfigError);
}

TEST_CASE("example1 support does not contain the cross-level twin") {
  Scm ex1 = make_example1_scm();
  std::set<std::pair<double, double>> support;
  for (double u1 : {0.0, 1.0}) {
    for (double u2 : {0.0, 1.0}) {
      const Instance v = ex1.reduce({u1, u2});
      support.insert({v[0], v[1]});
    }
  }
  CHECK(support == std::set<std::pair<double, double>>{{-1, 0}, {-1, -1}, {1, 0}, {1, 1}});

  const Instance twin = ex1.counterfactual({1, 1}, Intervention::hard({1}, {-1.0}));
  CHECK(support.count({twin[0], twin[1]}) == 0);
}

TEST_CASE("fit_linear_anm recovers lin coefficients") {
  Scm lin = make_lin_scm();
  auto draws = lin.sample(10000, 0);
  TabularData data;
  data.names = {"s", "x1", "x2"};
  for (const auto& [v, u] : draws) data.rows.push_back(v);

  Dag dag{3, {{}, {0}, {0, 1}}};
  Scm fit = fit_linear_anm(data, dag, {0});

  // Behavioral extraction: f(pa, 0) differences give the coefficients.
  const double c1 = fit.reduce({0, 0, 0})[1];
  const double b_s = fit.reduce_with({0, 0, 0}, Intervention::hard({0}, {1.0}))[1] - c1;
  CHECK(b_s == doctest::Approx(2.0).epsilon(0.025));

  // x2 on (s, x1): force parents with hard interventions.
  auto x2_at = [&fit](double s, double x1) {
    return fit.reduce_with({0, 0, 0}, Intervention::hard({0, 1}, {s, x1}))[2];
  };
  const double c2 = x2_at(0, 0);
  CHECK(x2_at(1, 0) - c2 == doctest::Approx(1.0).epsilon(0.025));
  CHECK(x2_at(0, 1) - c2 == doctest::Approx(-1.0).epsilon(0.025));

  // Root Bernoulli column detected.
  CHECK(fit.noise_dists()[0].kind == NoiseDist::Kind::Bernoulli);
  CHECK(fit.noise_dists()[0].a == doctest::Approx(0.5).epsilon(0.05));
  CHECK(fit.noise_dists()[1].kind == NoiseDist::Kind::Normal);
  CHECK(fit.noise_dists()[1].b == doctest::Approx(1.0).epsilon(0.06));
}

TEST_CASE("fit_linear_anm rejects rank-deficient designs") {
  TabularData data;
  data.names = {"a", "b"};
  data.rows = {{1.0, 2.0}, {1.0, 2.0}};
  Dag dag{2, {{}, {0}}};
  CHECK_THROWS_AS(fit_linear_anm(data, dag, {0}), SingularDesignError);
}

TEST_CASE("fit_linear_anm on a parentless noise column") {
  Rng rng(0);
  TabularData data;
  data.names = {"z"};
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < 5000; ++i) {
    const double x = rng.normal(0.0, 1.3);
    data.rows.push_back({x});
    sum += x;
    sq += x * x;
  }
  const double mean = sum / 5000.0;
  const double var = sq / 5000.0 - mean * mean;

  Dag dag{1, {{}}};
  Scm fit = fit_linear_anm(data, dag, {});
  CHECK(std::fabs(fit.reduce({0})[0]) <= 0.05);  // deterministic part ~ 0
  CHECK(fit.noise_dists()[0].kind == NoiseDist::Kind::Normal);
  CHECK(fit.noise_dists()[0].b == doctest::Approx(var).epsilon(0.02));
}

TEST_CASE("scm config json") {
  Scm lin = load_scm_config(R"({"builtin": "lin"})");
  CHECK(lin.node_count() == 3);
  Scm e2 = load_scm_config(R"({"builtin": "example2b", "n": 4.0})");
  check_vec(e2.counterfactual({1, 0, 0}, Intervention::hard({0}, {0.0})), {0, 0, 4.0});
  CHECK_THROWS_AS(load_scm_config(R"({"builtin": "nope"})"), ConfigError);
  CHECK_THROWS_AS(load_scm_config("not json"), ConfigError);

  // Fit route through a csv on disk.
  Scm gen = make_lin_scm();
  TabularData data;
  data.names = {"s", "x1", "x2"};
  for (const auto& [v, u] : gen.sample(500, 3)) data.rows.push_back(v);
  const std::string path = "/tmp/cfm_test_fit.csv";
  write_csv(path, data);
  Scm fit = load_scm_config(R"({"fit": {"csv": ")" + path +
                            R"(", "dag": [[], [0], [0, 1]], "sensitive": [0]}})");
  CHECK(fit.node_count() == 3);
  CHECK(fit.sensitive_levels().size() == 2);
  std::remove(path.c_str());
}

TEST_CASE("csv round trip") {
  TabularData data;
  data.names = {"a", "b"};
  data.rows = {{1.25, -3.5}, {0.0, 2.0}};
  const std::string path = "/tmp/cfm_test_csv.csv";
  write_csv(path, data);
  TabularData loaded = read_csv(path);
  CHECK(loaded.names == data.names);
  REQUIRE(loaded.rows.size() == 2);
  CHECK(loaded.rows[0][0] == 1.25);
  CHECK(loaded.rows[1][1] == 2.0);
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_csv("/tmp/does_not_exist_cfm.csv"), MissingFileError);
}
