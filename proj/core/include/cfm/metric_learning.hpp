#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cfm/metric.hpp"
#include "cfm/net.hpp"
#include "cfm/scm.hpp"

namespace cfm::ml {

/// Supervised pair. In distance mode `tag` is the oracle distance; in label
/// mode it is 0/1 with 1 meaning dissimilar (outside the ball of radius
/// delta).
struct PairExample {
  Instance a;
  Instance b;
  double tag = 0.0;
};

/// (anchor, positive, negative) with d(anchor,positive) <= delta <
/// d(anchor,negative) under the oracle at generation time.
struct TripletExample {
  Instance anchor;
  Instance positive;
  Instance negative;
};

enum class Scenario { Distance, Label, Triplet };
enum class EmbeddingKnowledge { Known, Unknown };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct MetricTrainConfig {
  Scenario scenario = Scenario::Distance;
  double delta = 0.1;
  int epochs = 30;
  int batch_size = 200;
  /// Negative means the scenario default: label uses delta, triplet uses 0.
  double margin = -1.0;
  double decorrelation_coeff = 0.1;
  double soft_rank_temperature = 1.0;
  double huber_knee = 1.0;
  EmbeddingKnowledge knowledge = EmbeddingKnowledge::Known;
  int depth = 5;  // hidden layers
  int hidden_width = 100;
  double lr = 3e-3;
  std::uint64_t seed = 0;

  double resolved_margin() const;
  int resolved_embedding_dim(const Scm& scm) const;
};

/// Frozen embedding network plus the metric applied on the output space.
struct LearnedMetric {
  nn::FeedForwardNet net;
  BaseMetric embed_metric;

  double distance(const Instance& v, const Instance& w) const;
  nn::Matrix embed(const std::vector<Instance>& batch) const;
};

struct MetricDataset {
  std::vector<PairExample> pairs;
  std::vector<TripletExample> triplets;
};

/// Roughly half the pairs are drawn inside the PCP ball (exact twins with
/// probability 0.1) and half outside, via latent offsets with norm in
/// (delta, 4 delta] or independent resamples. Tags are computed from the
/// oracle, so intended negatives that land inside the ball are tagged
/// truthfully.
std::vector<PairExample> build_pairs(const OracleMetric& oracle, double delta, int count,
                                     std::uint64_t seed, bool label_mode);

std::vector<TripletExample> build_triplets(const OracleMetric& oracle, double delta,
                                           int count, std::uint64_t seed);

MetricDataset build_dataset(const OracleMetric& oracle, const MetricTrainConfig& cfg,
                            int count);

// ---- losses ----

/// Quadratic within |pred-target| <= knee, linear outside.
double huber_loss(double pred, double target, double knee);
/// d huber / d pred.
double huber_loss_grad(double pred, double target, double knee);

/// (1-y) d + y max(margin - d, 0); y = 1 flags a dissimilar pair.
double contrastive_loss(double d, double y, double margin);
double contrastive_loss_grad(double d, double y, double margin);

/// max(d_ap - d_an + margin, 0).
double triplet_loss(double d_ap, double d_an, double margin);

// ---- rank dependence ----

/// Chatterjee rank correlation: 1 - 3 sum|r_{i+1}-r_i| / (n^2-1) with y ranked
/// after a stable sort by x. Always in [-0.5, 1] for n >= 2.
double xicor(std::span<const double> x, std::span<const double> y);

/// Differentiable surrogate of the pairwise-xicor penalty
/// ||I - Xi||_F over the embedding coordinates, built from soft ranks
/// (pairwise sigmoids at `temperature` on standardized coordinates).
/// Constant coordinates contribute 1 per off-diagonal entry.
double decorrelation_penalty(const nn::Matrix& embeddings, double temperature);

struct DecorrelationGrad {
  double penalty = 0.0;
  nn::Matrix grad;  // d penalty / d embeddings
};
DecorrelationGrad decorrelation_penalty_with_grad(const nn::Matrix& embeddings,
                                                  double temperature);

/// Exact pairwise xicor matrix (diagonal fixed at 1), for diagnostics.
nn::Matrix xicor_matrix(const nn::Matrix& embeddings);

// ---- training and evaluation ----

struct TrainedMetric {
  LearnedMetric metric;
  std::vector<double> epoch_loss;
};

/// Minibatch Adam on the scenario loss plus the decorrelation penalty.
/// Deterministic per config seed.
TrainedMetric train_metric(const OracleMetric& oracle, const MetricTrainConfig& cfg,
                           const MetricDataset& data);

struct MetricReport {
  double acc = 0.0;
  double fn = 0.0;  // class-conditional: FN / (FN + TP)
  double fp = 0.0;  // class-conditional: FP / (FP + TN)
  double mcc = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
};

using DistanceFn = std::function<double(const Instance&, const Instance&)>;

/// Labels are thresholded at delta on both sides; positives are dissimilar
/// pairs. MAE/RMSE compare raw distances. MCC returns 0 on a zero denominator.
MetricReport eval_metric(const DistanceFn& learned, const OracleMetric& oracle,
                         double delta, const std::vector<PairExample>& test_pairs);

}  // namespace cfm::ml
