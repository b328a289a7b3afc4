#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfm/matrix.hpp"
#include "cfm/scm.hpp"

namespace cfm {

/// Metric on the non-sensitive exogenous subspace.
struct BaseMetric {
  enum class Kind { Euclidean, WeightedEuclidean, Mahalanobis };
  Kind kind = Kind::Euclidean;
  std::vector<double> weights;  // WeightedEuclidean, all >= 0
  nn::Matrix sigma;             // Mahalanobis, symmetric PSD

  double distance(std::span<const double> x, std::span<const double> y) const;

  static BaseMetric euclidean() { return {}; }
  static BaseMetric weighted(std::vector<double> w);
  static BaseMetric mahalanobis(nn::Matrix sigma);
};

/// Parse {"base": "euclidean" | {"weighted": [...]} | {"mahalanobis": [[...]]}}.
BaseMetric load_metric_config(const std::string& json_text);

/// Causal fair metric evaluated through the model: the base metric applied to
/// the non-sensitive exogenous coordinates of both instances. A pseudo-metric;
/// twins are at distance zero.
class OracleMetric {
 public:
  OracleMetric(Scm scm, BaseMetric base);

  double distance(const Instance& v, const Instance& w) const;

  const Scm& scm() const { return scm_; }
  const BaseMetric& base() const { return base_; }

 private:
  Scm scm_;
  BaseMetric base_;
};

struct DecompositionReport {
  bool ok = true;
  std::size_t checked = 0;
  std::size_t mismatches = 0;
  std::size_t skipped = 0;  // probes outside the enumerable support
};

/// Ball of the causal fair metric around an instance.
class PcpBall {
 public:
  PcpBall(Instance center, double radius, OracleMetric metric);

  const Instance& center() const { return center_; }
  double radius() const { return radius_; }
  const OracleMetric& metric() const { return metric_; }

  bool contains(const Instance& w) const;

  /// Constructive sampler over the union-of-twin-balls form: a uniform
  /// sensitive level and a uniform base-ball offset in latent space.
  std::vector<Instance> sample(int count, std::uint64_t seed) const;
  std::vector<Instance> sample(int count, Rng& rng) const;

  /// Twin set; only defined at radius 0 (throws NonzeroRadiusError otherwise).
  std::vector<Instance> twin_set() const;

  /// Verifies that direct membership agrees with membership in the union of
  /// per-twin causal balls for every probe. Probes that fail abduction or
  /// carry a sensitive value outside the declared level set are skipped and
  /// counted.
  DecompositionReport decomposition_check(const std::vector<Instance>& probes) const;

 private:
  Instance center_;
  double radius_;
  OracleMetric metric_;
};

/// Draw a uniform point of the `dim`-dimensional Euclidean ball of radius r.
std::vector<double> sample_euclidean_ball(int dim, double r, Rng& rng);

/// Offset whose base-metric norm is at most r (uniform Euclidean draw mapped
/// through the metric scaling; Mahalanobis null directions stay at zero).
std::vector<double> sample_base_ball(const BaseMetric& base, int dim, double r, Rng& rng);

/// Kernelized Mahalanobis evaluation on the full semi-latent vector:
/// sqrt((q_v - q_w)^T Sigma (q_v - q_w)) with blocks placed at their node
/// indices. With Sigma = projection_sigma(scm) this coincides with the
/// Euclidean oracle metric.
double semilatent_mahalanobis(const Scm& scm, const nn::Matrix& sigma, const Instance& v,
                              const Instance& w);

/// Diagonal projection matrix onto the non-sensitive exogenous coordinates.
nn::Matrix projection_sigma(const Scm& scm);

}  // namespace cfm
