#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cfm {

class Rng;

/// Endogenous feature vector v.
using Instance = std::vector<double>;
/// Exogenous noise vector u.
using ExogenousPoint = std::vector<double>;

struct Dag {
  int node_count = 0;
  std::vector<std::vector<int>> parents;

  /// Kahn topological order. Throws ConfigError on cycles, self loops or
  /// out-of-range parent indices.
  std::vector<int> topological_order() const;
};

/// One structural equation v_i = f_i(parents, u_i) together with its exact
/// noise inversion u_i = f_i^{-1}(v_i; parents). Inversions may throw
/// OutOfSupportError where no preimage exists.
struct StructuralEquation {
  std::function<double(std::span<const double>, double)> forward;
  std::function<double(double, std::span<const double>)> noise_invert;
};

struct NoiseDist {
  enum class Kind { Bernoulli, Normal, Uniform };
  Kind kind = Kind::Normal;
  double a = 0.0;  // Bernoulli p / Normal mean / Uniform lo
  double b = 1.0;  // Normal variance / Uniform hi

  double sample(Rng& rng) const;

  static NoiseDist bernoulli(double p) { return {Kind::Bernoulli, p, 0.0}; }
  static NoiseDist normal(double mean, double variance) {
    return {Kind::Normal, mean, variance};
  }
  static NoiseDist uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
};

/// Instance coordinates in the semi-latent space: observed values on the
/// sensitive indices, exogenous values elsewhere. Both blocks are ordered by
/// ascending node index.
struct SemiLatentPoint {
  std::vector<double> sensitive;
  std::vector<double> latent;
};

struct Intervention {
  enum class Kind { Hard, Shift, NoiseShift };
  Kind kind = Kind::Hard;
  std::vector<int> indices;    // Hard: intervened nodes
  std::vector<double> values;  // Hard: theta per index; Shift/NoiseShift: delta, length n

  static Intervention hard(std::vector<int> idx, std::vector<double> theta);
  static Intervention shift(std::vector<double> delta);
  static Intervention noise_shift(std::vector<double> delta);
};

/// Structural causal model over n nodes. Immutable after construction; all
/// member operations are const and safe to call concurrently.
class Scm {
 public:
  Scm(Dag graph, std::vector<StructuralEquation> equations, std::vector<NoiseDist> noise,
      std::vector<int> sensitive_idx, std::vector<std::vector<double>> sensitive_levels,
      std::vector<std::string> feature_names);

  int node_count() const { return graph_.node_count; }
  const Dag& graph() const { return graph_; }
  const std::vector<int>& topo_order() const { return topo_; }
  const std::vector<int>& sensitive_idx() const { return sensitive_idx_; }
  const std::vector<int>& nonsensitive_idx() const { return nonsensitive_idx_; }
  /// Joint level set of the sensitive block (each entry matches sensitive_idx order).
  const std::vector<std::vector<double>>& sensitive_levels() const { return levels_; }
  const std::vector<std::string>& feature_names() const { return names_; }
  const std::vector<NoiseDist>& noise_dists() const { return noise_; }
  int latent_dim() const { return static_cast<int>(nonsensitive_idx_.size()); }

  /// Reduced-form map g: evaluate the equations in topological order.
  Instance reduce(const ExogenousPoint& u) const;
  Instance reduce_with(const ExogenousPoint& u, const Intervention& iv) const;

  /// Preimage g^{-1}: recover the noise behind an observed instance.
  ExogenousPoint abduct(const Instance& v) const;

  std::vector<std::pair<Instance, ExogenousPoint>> sample(int count, std::uint64_t seed) const;
  std::vector<std::pair<Instance, ExogenousPoint>> sample(int count, Rng& rng) const;

  Instance counterfactual(const Instance& v, const Intervention& iv) const;

  /// Counterfactual twins for the given sensitive levels (hard intervention on
  /// the sensitive block).
  std::vector<Instance> twins(const Instance& v,
                              const std::vector<std::vector<double>>& levels) const;
  std::vector<Instance> twins(const Instance& v) const;

  SemiLatentPoint to_semilatent(const Instance& v) const;
  Instance from_semilatent(const SemiLatentPoint& q) const;

  /// Non-sensitive exogenous coordinates of v (the latent block of the
  /// semi-latent embedding).
  std::vector<double> latent_of(const Instance& v) const;

  /// v's observed values on the sensitive block.
  std::vector<double> sensitive_of(const Instance& v) const;

 private:
  Dag graph_;
  std::vector<StructuralEquation> equations_;
  std::vector<NoiseDist> noise_;
  std::vector<int> sensitive_idx_;
  std::vector<int> nonsensitive_idx_;
  std::vector<std::vector<double>> levels_;
  std::vector<std::string> names_;
  std::vector<int> topo_;
};

// ---- built-in models ----

/// s = u_s (Bernoulli 1/2), x1 = 2 s + u1, x2 = s - x1 + u2; u1,u2 ~ N(0,1).
Scm make_lin_scm();
/// s = u_s (Bernoulli 1/2), x1 = 2 s^2 + u1, x2 = s - x1^2 + u2.
Scm make_nlm_scm();
/// v1 = 2(u1 - 1/2), v2 = v1 u2; Bernoulli noises; sensitive v2 with levels
/// {-1, 0, 1}.
Scm make_example1_scm();
/// Three-node pair that is observationally and interventionally identical for
/// both variants yet counterfactually different; `n_constant` is the upper end
/// of the uniform noise on the third node.
Scm make_example2_scm(bool variant_b, double n_constant = 2.0);

// ---- fitting from data ----

struct TabularData {
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;

  std::size_t row_count() const { return rows.size(); }
  std::size_t col_count() const { return names.size(); }
};

TabularData read_csv(const std::string& path);
void write_csv(const std::string& path, const TabularData& data);

/// Least-squares linear ANM per node: v_i = c + beta^T parents + u_i with
/// u_i ~ Normal(0, residual variance). Parentless binary columns become
/// Bernoulli roots. Throws SingularDesignError on rank-deficient designs.
Scm fit_linear_anm(const TabularData& data, const Dag& dag, std::vector<int> sensitive_idx);

/// Parse an SCM description: {"builtin": "lin"|"nlm"|"example1"|"example2a"|
/// "example2b" [, "n": real]} or {"fit": {"csv": path, "dag": [[parents]...],
/// "sensitive": [idx...]}}.
Scm load_scm_config(const std::string& json_text);

}  // namespace cfm
