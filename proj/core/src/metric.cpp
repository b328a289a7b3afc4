#include "cfm/metric.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm {

namespace {
constexpr double kLevelTol = 1e-9;

bool levels_match(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::fabs(a[i] - b[i]) > kLevelTol) return false;
  }
  return true;
}
}  // namespace

BaseMetric BaseMetric::weighted(std::vector<double> w) {
  for (double x : w) {
    if (x < 0.0) throw ConfigError("weighted metric: weights must be nonnegative");
  }
  BaseMetric m;
  m.kind = Kind::WeightedEuclidean;
  m.weights = std::move(w);
  return m;
}

BaseMetric BaseMetric::mahalanobis(nn::Matrix sigma) {
  if (sigma.rows != sigma.cols) throw ConfigError("mahalanobis: sigma must be square");
  for (int i = 0; i < sigma.rows; ++i) {
    for (int j = i + 1; j < sigma.cols; ++j) {
      if (std::fabs(sigma.at(i, j) - sigma.at(j, i)) > 1e-12) {
        throw ConfigError("mahalanobis: sigma must be symmetric");
      }
    }
  }
  BaseMetric m;
  m.kind = Kind::Mahalanobis;
  m.sigma = std::move(sigma);
  return m;
}

double BaseMetric::distance(std::span<const double> x, std::span<const double> y) const {
  if (x.size() != y.size()) throw LengthMismatchError("base metric: dimension mismatch");
  switch (kind) {
    case Kind::Euclidean: {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        acc += d * d;
      }
      return std::sqrt(acc);
    }
    case Kind::WeightedEuclidean: {
      if (weights.size() != x.size()) {
        throw LengthMismatchError("weighted metric: weight length mismatch");
      }
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        acc += weights[i] * d * d;
      }
      return std::sqrt(acc);
    }
    case Kind::Mahalanobis: {
      if (sigma.rows != static_cast<int>(x.size())) {
        throw LengthMismatchError("mahalanobis: sigma dimension mismatch");
      }
      double acc = 0.0;
      for (int i = 0; i < sigma.rows; ++i) {
        const double di = x[i] - y[i];
        if (di == 0.0) continue;
        for (int j = 0; j < sigma.cols; ++j) acc += di * sigma.at(i, j) * (x[j] - y[j]);
      }
      return std::sqrt(std::max(acc, 0.0));
    }
  }
  return 0.0;
}

BaseMetric load_metric_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metric config: ") + e.what());
  }
  const auto& base = j.contains("base") ? j["base"] : j;
  if (base.is_string()) {
    if (base.get<std::string>() == "euclidean") return BaseMetric::euclidean();
    throw ConfigError("unknown base metric: " + base.get<std::string>());
  }
  if (base.contains("weighted")) {
    return BaseMetric::weighted(base["weighted"].get<std::vector<double>>());
  }
  if (base.contains("mahalanobis")) {
    const auto rows = base["mahalanobis"].get<std::vector<std::vector<double>>>();
    const int n = static_cast<int>(rows.size());
    nn::Matrix sigma(n, n);
    for (int i = 0; i < n; ++i) {
      if (static_cast<int>(rows[i].size()) != n) throw ConfigError("mahalanobis: ragged matrix");
      for (int jcol = 0; jcol < n; ++jcol) sigma.at(i, jcol) = rows[i][jcol];
    }
    return BaseMetric::mahalanobis(std::move(sigma));
  }
  throw ConfigError("metric config needs \"base\"");
}

OracleMetric::OracleMetric(Scm scm, BaseMetric base)
    : scm_(std::move(scm)), base_(std::move(base)) {}

double OracleMetric::distance(const Instance& v, const Instance& w) const {
  const std::vector<double> xv = scm_.latent_of(v);
  const std::vector<double> xw = scm_.latent_of(w);
  return base_.distance(xv, xw);
}

PcpBall::PcpBall(Instance center, double radius, OracleMetric metric)
    : center_(std::move(center)), radius_(radius), metric_(std::move(metric)) {
  if (radius_ < 0.0) throw ConfigError("pcp ball: radius must be nonnegative");
}

bool PcpBall::contains(const Instance& w) const {
  return metric_.distance(center_, w) <= radius_;
}

std::vector<double> sample_euclidean_ball(int dim, double r, Rng& rng) {
  std::vector<double> z(dim, 0.0);
  if (dim == 0 || r == 0.0) return z;
  double norm2 = 0.0;
  for (auto& x : z) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double norm = std::sqrt(norm2);
  const double radius =
      r * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
  if (norm < 1e-300) return std::vector<double>(dim, 0.0);
  for (auto& x : z) x *= radius / norm;
  return z;
}

std::vector<double> sample_base_ball(const BaseMetric& base, int dim, double r, Rng& rng) {
  std::vector<double> z = sample_euclidean_ball(dim, r, rng);
  switch (base.kind) {
    case BaseMetric::Kind::Euclidean:
      return z;
    case BaseMetric::Kind::WeightedEuclidean: {
      for (int i = 0; i < dim; ++i) {
        if (base.weights[i] <= 0.0) {
          throw ConfigError("ball sampling needs strictly positive weights");
        }
        z[i] /= std::sqrt(base.weights[i]);
      }
      return z;
    }
    case BaseMetric::Kind::Mahalanobis: {
      // Map through Sigma^{-1/2} on the positive eigenspace; null directions
      // (distance-free) are left at zero.
      const nn::SymmetricEigen eig = nn::symmetric_eigen(base.sigma);
      std::vector<double> out(dim, 0.0);
      for (int j = 0; j < dim; ++j) {
        if (eig.values[j] <= 1e-12) continue;
        const double scale = 1.0 / std::sqrt(eig.values[j]);
        for (int i = 0; i < dim; ++i) out[i] += eig.vectors.at(i, j) * scale * z[j];
      }
      return out;
    }
  }
  return z;
}

std::vector<Instance> PcpBall::sample(int count, std::uint64_t seed) const {
  Rng rng(seed);
  return sample(count, rng);
}

std::vector<Instance> PcpBall::sample(int count, Rng& rng) const {
  if (count < 1) throw ConfigError("ball sample: count must be >= 1");
  const Scm& scm = metric_.scm();
  const auto& levels = scm.sensitive_levels();
  SemiLatentPoint q = scm.to_semilatent(center_);

  std::vector<Instance> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    SemiLatentPoint qs = q;
    if (!levels.empty()) {
      qs.sensitive = levels[static_cast<std::size_t>(rng.uniform_int(levels.size()))];
    }
    const std::vector<double> delta =
        sample_base_ball(metric_.base(), scm.latent_dim(), radius_, rng);
    for (std::size_t i = 0; i < qs.latent.size(); ++i) qs.latent[i] += delta[i];
    out.push_back(scm.from_semilatent(qs));
  }
  return out;
}

std::vector<Instance> PcpBall::twin_set() const {
  if (radius_ != 0.0) throw NonzeroRadiusError("twin_set requires radius 0");
  const Scm& scm = metric_.scm();
  if (scm.sensitive_idx().empty()) return {center_};
  return scm.twins(center_);
}

DecompositionReport PcpBall::decomposition_check(const std::vector<Instance>& probes) const {
  const Scm& scm = metric_.scm();
  const auto& levels = scm.sensitive_levels();
  const std::vector<Instance> center_twins =
      scm.sensitive_idx().empty() ? std::vector<Instance>{center_} : scm.twins(center_);

  std::vector<std::vector<double>> twin_latents;
  twin_latents.reserve(center_twins.size());
  for (const auto& t : center_twins) twin_latents.push_back(scm.latent_of(t));

  DecompositionReport report;
  for (const auto& w : probes) {
    SemiLatentPoint qw;
    try {
      qw = scm.to_semilatent(w);
    } catch (const OutOfSupportError&) {
      ++report.skipped;
      continue;
    }
    if (!scm.sensitive_idx().empty()) {
      const bool known_level = std::any_of(
          levels.begin(), levels.end(),
          [&qw](const std::vector<double>& l) { return levels_match(l, qw.sensitive); });
      if (!known_level) {
        ++report.skipped;
        continue;
      }
    }

    const bool direct = metric_.distance(center_, w) <= radius_;

    bool in_union = false;
    for (std::size_t t = 0; t < center_twins.size(); ++t) {
      const std::vector<double> ts = scm.sensitive_of(center_twins[t]);
      if (!levels_match(ts, qw.sensitive)) continue;
      if (metric_.base().distance(twin_latents[t], qw.latent) <= radius_) {
        in_union = true;
        break;
      }
    }

    ++report.checked;
    if (direct != in_union) ++report.mismatches;
  }
  report.ok = report.mismatches == 0;
  return report;
}

nn::Matrix projection_sigma(const Scm& scm) {
  nn::Matrix sigma(scm.node_count(), scm.node_count());
  for (int i : scm.nonsensitive_idx()) sigma.at(i, i) = 1.0;
  return sigma;
}

double semilatent_mahalanobis(const Scm& scm, const nn::Matrix& sigma, const Instance& v,
                              const Instance& w) {
  if (sigma.rows != scm.node_count() || sigma.cols != scm.node_count()) {
    throw LengthMismatchError("semilatent_mahalanobis: sigma must be n x n");
  }
  const SemiLatentPoint qv = scm.to_semilatent(v);
  const SemiLatentPoint qw = scm.to_semilatent(w);
  std::vector<double> dq(scm.node_count(), 0.0);
  const auto& sid = scm.sensitive_idx();
  const auto& nid = scm.nonsensitive_idx();
  for (std::size_t k = 0; k < sid.size(); ++k) dq[sid[k]] = qv.sensitive[k] - qw.sensitive[k];
  for (std::size_t k = 0; k < nid.size(); ++k) dq[nid[k]] = qv.latent[k] - qw.latent[k];

  double acc = 0.0;
  for (int i = 0; i < sigma.rows; ++i) {
    if (dq[i] == 0.0) continue;
    for (int j = 0; j < sigma.cols; ++j) acc += dq[i] * sigma.at(i, j) * dq[j];
  }
  return std::sqrt(std::max(acc, 0.0));
}

}  // namespace cfm
