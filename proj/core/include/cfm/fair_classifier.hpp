#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfm/metric.hpp"
#include "cfm/metric_learning.hpp"
#include "cfm/net.hpp"
#include "cfm/scm.hpp"

namespace cfm::clf {

/// Binary classifier: network with a single logit output, thresholded at 0.5
/// on the sigmoid score.
struct Classifier {
  nn::FeedForwardNet net;

  double score(const Instance& v) const;
  int predict(const Instance& v) const { return score(v) > 0.5 ? 1 : 0; }
  std::vector<double> scores(const std::vector<Instance>& batch) const;
};

struct LabeledDataset {
  std::vector<Instance> instances;
  std::vector<int> labels;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
};

/// Labels are 1[sum of non-sensitive features + N(0, 0.01) > median],
/// median taken over the generated set; the split is seeded and disjoint.
LabeledDataset make_synthetic_dataset(const Scm& scm, int count, double test_fraction,
                                      std::uint64_t seed);

enum class TrainMethod { Erm, Al, Capify, Ecapify };
std::string to_string(TrainMethod m);
TrainMethod method_from_string(const std::string& s);

struct TrainerConfig {
  TrainMethod method = TrainMethod::Erm;
  double delta = 0.01;
  double mu1 = 1.0;
  double mu2 = 1.0;
  double mu3 = 1.0;
  int pgd_steps = 10;
  double pgd_step_size = -1.0;  // negative: delta / 4
  int epochs = 40;
  int batch = 100;
  double lr = 1e-3;
  std::vector<int> hidden = {16, 16};
  std::uint64_t seed = 0;

  double resolved_pgd_step() const { return pgd_step_size >= 0.0 ? pgd_step_size : delta / 4.0; }
};

/// Binary cross entropy on a probability clamped to [1e-7, 1 - 1e-7].
double bce_loss(double p, int y);
/// BCE evaluated from the logit.
double bce_on_logit(double z, int y);
double sigmoid(double z);

// ---- trainers ----

Classifier train_erm(const LabeledDataset& data, const TrainerConfig& cfg);

/// Min-max training: each batch is replaced by PGD worst-case points inside
/// the feature-space l2 ball of radius delta.
Classifier train_al(const LabeledDataset& data, const TrainerConfig& cfg);

Classifier train_capify(const LabeledDataset& data, const TrainerConfig& cfg,
                        const OracleMetric& oracle);

/// No SCM access: twins are estimated by nearest neighbours in the learned
/// metric over `pool`, and all gradients live in feature space.
Classifier train_ecapify(const LabeledDataset& data, const TrainerConfig& cfg,
                         const ml::LearnedMetric& metric,
                         const std::vector<int>& sensitive_idx,
                         const std::vector<std::vector<double>>& levels,
                         const std::vector<Instance>& pool);

// ---- attack ----

/// Projected gradient ascent on the BCE loss; returns per-row perturbations
/// with ||delta_i||_2 <= radius.
nn::Matrix pgd_attack(const nn::FeedForwardNet& net, const nn::Matrix& x,
                      const std::vector<int>& y, double radius, int steps,
                      double step_size, Rng& rng);

// ---- regularizers ----
// The *_grad variants accumulate exact parameter gradients under the
// subgradient convention that inner maximizers (the pgd offset, the gamma
// direction, the argmax twin) are constants at the solution. Passing a frozen
// inner solution makes the value a deterministic function of the parameters,
// which is what the finite-difference tests differentiate.

struct CapifyInner {
  std::vector<double> gamma_delta;  // latent-space offset, base-ball of radius delta
};

/// PGD search for the offset maximizing the local-linearization residual.
CapifyInner capify_gamma_search(const OracleMetric& oracle, const nn::FeedForwardNet& net,
                                const Instance& v, int y, double delta, int steps,
                                double step_size, Rng& rng);

double capify_regularizer(const OracleMetric& oracle, const nn::FeedForwardNet& net,
                          const Instance& v, int y, double mu1, double mu2, double mu3,
                          const CapifyInner& inner);

nn::Gradients capify_regularizer_grad(const OracleMetric& oracle,
                                      const nn::FeedForwardNet& net, const Instance& v,
                                      int y, double mu1, double mu2, double mu3,
                                      const CapifyInner& inner, double* value = nullptr);

struct EcapifyInner {
  std::vector<std::vector<double>> u;  // per estimated twin, unit feature direction
};

EcapifyInner ecapify_inner(const nn::FeedForwardNet& net, int y,
                           const std::vector<Instance>& twins_est);

double ecapify_regularizer(const nn::FeedForwardNet& net, int y,
                           const std::vector<Instance>& twins_est, double delta,
                           double mu1, double mu2, double mu3,
                           const EcapifyInner* frozen = nullptr);

nn::Gradients ecapify_regularizer_grad(const nn::FeedForwardNet& net, int y,
                                       const std::vector<Instance>& twins_est,
                                       double delta, double mu1, double mu2, double mu3,
                                       const EcapifyInner* frozen = nullptr,
                                       double* value = nullptr);

// ---- twin estimation ----

/// Pool indices grouped per sensitive level; throws MissingLevelError when a
/// level has no members.
std::vector<std::vector<std::size_t>> partition_pool(
    const std::vector<Instance>& pool, const std::vector<int>& sensitive_idx,
    const std::vector<std::vector<double>>& levels);

/// Nearest pool member per level under the given distance; the instance
/// itself at its own level.
std::vector<Instance> estimate_twins(const Instance& v, const std::vector<int>& sensitive_idx,
                                     const std::vector<std::vector<double>>& levels,
                                     const ml::DistanceFn& dist,
                                     const std::vector<Instance>& pool);

// ---- evaluation ----

struct FairnessReport {
  double acc = 0.0;
  double mcc = 0.0;
  double unfair_area = 0.0;
  double cf_unfair_area = 0.0;
  double nonrobust_area = 0.0;
};

/// Ground truth always comes from the oracle SCM/metric. A point is unfair
/// when a twin or any of the probes inside its PCP ball flips the prediction;
/// the counterfactual area uses twins only; the non-robust area uses
/// own-level probes only. Probe sets are nested so the containment
/// cf_unfair, nonrobust <= unfair holds by construction.
FairnessReport eval_fairness(const Classifier& h, const OracleMetric& oracle,
                             const LabeledDataset& data, double delta, int probe_count,
                             std::uint64_t seed);

struct FairnessAudit {
  long eps_delta_violations = 0;
  long lipschitz_violations = 0;
};

/// Output distance is the absolute sigmoid score difference.
FairnessAudit audit_individual_fairness(const Classifier& h, const ml::DistanceFn& metric,
                                        const std::vector<std::pair<Instance, Instance>>& pairs,
                                        double eps, double delta_thr, double lipschitz_l);

}  // namespace cfm::clf
