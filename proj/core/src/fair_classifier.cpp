#include "cfm/fair_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm::clf {

namespace {

constexpr double kClamp = 1e-7;
constexpr double kTiny = 1e-12;

nn::Matrix instances_to_matrix(const std::vector<Instance>& rows) {
  if (rows.empty()) return nn::Matrix(0, 0);
  nn::Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
    }
  }
  return m;
}

nn::Matrix one_row(const Instance& v) {
  nn::Matrix m(1, static_cast<int>(v.size()));
  for (std::size_t j = 0; j < v.size(); ++j) m.at(0, static_cast<int>(j)) = v[j];
  return m;
}

struct Eval1 {
  nn::ForwardCache cache;
  double z = 0.0;
  double p = 0.0;
  double loss = 0.0;
};

Eval1 eval_one(const nn::FeedForwardNet& net, const Instance& v, int y) {
  Eval1 e;
  nn::Matrix out = nn::forward(net, one_row(v), e.cache);
  e.z = out.at(0, 0);
  e.p = sigmoid(e.z);
  e.loss = bce_loss(e.p, y);
  return e;
}

std::vector<double> input_grad_one(const nn::FeedForwardNet& net, const Eval1& e, int y) {
  nn::Matrix up(1, 1, {e.p - static_cast<double>(y)});
  nn::Gradients g = nn::backward(net, e.cache, up);
  return {g.input.data.begin(), g.input.data.end()};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// d v / d latent at a semi-latent point, by central differences per column.
nn::Matrix semilatent_jacobian(const Scm& scm, const std::vector<double>& sens,
                               const std::vector<double>& latent) {
  const int n = scm.node_count();
  const int k = static_cast<int>(latent.size());
  const double h = 1e-6;
  nn::Matrix jac(n, k);
  SemiLatentPoint q;
  q.sensitive = sens;
  for (int j = 0; j < k; ++j) {
    q.latent = latent;
    q.latent[j] += h;
    const Instance up = scm.from_semilatent(q);
    q.latent[j] -= 2.0 * h;
    const Instance down = scm.from_semilatent(q);
    for (int i = 0; i < n; ++i) jac.at(i, j) = (up[i] - down[i]) / (2.0 * h);
  }
  return jac;
}

std::vector<double> jacobian_column(const nn::Matrix& jac, int col) {
  std::vector<double> out(jac.rows);
  for (int i = 0; i < jac.rows; ++i) out[i] = jac.at(i, col);
  return out;
}

std::vector<double> jacobian_times(const nn::Matrix& jac, const std::vector<double>& x) {
  std::vector<double> out(jac.rows, 0.0);
  for (int i = 0; i < jac.rows; ++i) {
    for (int j = 0; j < jac.cols; ++j) out[i] += jac.at(i, j) * x[j];
  }
  return out;
}

std::vector<double> jacobian_t_times(const nn::Matrix& jac, const std::vector<double>& x) {
  std::vector<double> out(jac.cols, 0.0);
  for (int j = 0; j < jac.cols; ++j) {
    for (int i = 0; i < jac.rows; ++i) out[j] += jac.at(i, j) * x[i];
  }
  return out;
}

// Parameter gradient of c * a^T grad_v loss(net(v), y), accumulated in place.
void add_jvp_term(const nn::FeedForwardNet& net, const Eval1& e, int y,
                  const std::vector<double>& a, double c, nn::Gradients& grads) {
  nn::Matrix dirs(1, static_cast<int>(a.size()));
  for (std::size_t j = 0; j < a.size(); ++j) dirs.at(0, static_cast<int>(j)) = a[j];
  nn::JvpCache jc;
  nn::jvp(net, e.cache, dirs, &jc);
  nn::Matrix gout(1, 1, {e.p - static_cast<double>(y)});
  nn::Matrix hout(1, 1, {e.p * (1.0 - e.p)});
  nn::jvp_value_backward(net, e.cache, jc, {c}, gout, hout, grads);
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double bce_loss(double p, int y) {
  const double q = std::clamp(p, kClamp, 1.0 - kClamp);
  return -(y ? std::log(q) : std::log(1.0 - q));
}

double bce_on_logit(double z, int y) { return bce_loss(sigmoid(z), y); }

double Classifier::score(const Instance& v) const {
  return sigmoid(nn::forward(net, one_row(v)).at(0, 0));
}

std::vector<double> Classifier::scores(const std::vector<Instance>& batch) const {
  nn::Matrix out = nn::forward(net, instances_to_matrix(batch));
  std::vector<double> s(out.rows);
  for (int i = 0; i < out.rows; ++i) s[i] = sigmoid(out.at(i, 0));
  return s;
}

std::string to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::Erm: return "erm";
    case TrainMethod::Al: return "al";
    case TrainMethod::Capify: return "capify";
    case TrainMethod::Ecapify: return "ecapify";
  }
  return "erm";
}

TrainMethod method_from_string(const std::string& s) {
  if (s == "erm") return TrainMethod::Erm;
  if (s == "al") return TrainMethod::Al;
  if (s == "capify") return TrainMethod::Capify;
  if (s == "ecapify") return TrainMethod::Ecapify;
  throw ConfigError("unknown training method: " + s);
}

LabeledDataset make_synthetic_dataset(const Scm& scm, int count, double test_fraction,
                                      std::uint64_t seed) {
  if (count < 2) throw ConfigError("dataset needs at least two points");
  Rng root(seed);
  Rng sample_rng = root.child(10);
  Rng label_rng = root.child(11);
  Rng split_rng = root.child(12);

  LabeledDataset data;
  data.instances.reserve(count);
  std::vector<double> raw(count);
  auto draws = scm.sample(count, sample_rng);
  for (int i = 0; i < count; ++i) {
    const Instance& v = draws[i].first;
    double acc = 0.0;
    for (int j : scm.nonsensitive_idx()) acc += v[j];
    raw[i] = acc + label_rng.normal(0.0, 0.1);
    data.instances.push_back(v);
  }
  std::vector<double> sorted = raw;
  std::nth_element(sorted.begin(), sorted.begin() + count / 2, sorted.end());
  const double median = sorted[count / 2];
  data.labels.reserve(count);
  for (int i = 0; i < count; ++i) data.labels.push_back(raw[i] > median ? 1 : 0);

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  split_rng.shuffle(order);
  const std::size_t test_count =
      static_cast<std::size_t>(std::llround(test_fraction * count));
  data.test_idx.assign(order.begin(), order.begin() + test_count);
  data.train_idx.assign(order.begin() + test_count, order.end());
  return data;
}

// ---- attack ----

nn::Matrix pgd_attack(const nn::FeedForwardNet& net, const nn::Matrix& x,
                      const std::vector<int>& y, double radius, int steps,
                      double step_size, Rng& rng) {
  const int rows = x.rows;
  const int n = x.cols;
  nn::Matrix delta(rows, n);
  for (int i = 0; i < rows; ++i) {
    const std::vector<double> start = sample_euclidean_ball(n, radius, rng);
    for (int j = 0; j < n; ++j) delta.at(i, j) = start[j];
  }
  if (radius <= 0.0) return delta;

  for (int t = 0; t < steps; ++t) {
    nn::Matrix moved = x;
    nn::add_scaled(moved, delta);
    nn::ForwardCache cache;
    nn::Matrix out = nn::forward(net, moved, cache);
    nn::Matrix up(rows, 1);
    for (int i = 0; i < rows; ++i) {
      up.at(i, 0) = sigmoid(out.at(i, 0)) - static_cast<double>(y[i]);
    }
    nn::Gradients g = nn::backward(net, cache, up);
    for (int i = 0; i < rows; ++i) {
      double norm = 0.0;
      for (int j = 0; j < n; ++j) norm += g.input.at(i, j) * g.input.at(i, j);
      norm = std::sqrt(norm);
      if (norm < kTiny) continue;
      double newnorm = 0.0;
      for (int j = 0; j < n; ++j) {
        delta.at(i, j) += step_size * g.input.at(i, j) / norm;
        newnorm += delta.at(i, j) * delta.at(i, j);
      }
      newnorm = std::sqrt(newnorm);
      if (newnorm > radius) {
        for (int j = 0; j < n; ++j) delta.at(i, j) *= radius / newnorm;
      }
    }
  }
  return delta;
}

// ---- capify ----

CapifyInner capify_gamma_search(const OracleMetric& oracle, const nn::FeedForwardNet& net,
                                const Instance& v, int y, double delta, int steps,
                                double step_size, Rng& rng) {
  const Scm& scm = oracle.scm();
  const int k = scm.latent_dim();
  CapifyInner inner;
  inner.gamma_delta.assign(k, 0.0);
  if (delta <= 0.0 || k == 0) return inner;

  const std::vector<double> sens = scm.sensitive_of(v);
  const std::vector<double> x = scm.latent_of(v);
  const Eval1 base = eval_one(net, v, y);
  const std::vector<double> g_v = input_grad_one(net, base, y);
  const nn::Matrix jac0 = semilatent_jacobian(scm, sens, x);
  const std::vector<double> g0 = jacobian_t_times(jac0, g_v);

  std::vector<double> d = sample_euclidean_ball(k, delta, rng);
  const std::vector<double> zero(k, 0.0);
  {
    const double b = oracle.base().distance(d, zero);
    if (b > delta && b > kTiny) {
      for (auto& t : d) t *= delta / b;
    }
  }

  SemiLatentPoint q;
  q.sensitive = sens;
  for (int t = 0; t < steps; ++t) {
    q.latent = x;
    for (int j = 0; j < k; ++j) q.latent[j] += d[j];
    const Instance w = scm.from_semilatent(q);
    const Eval1 ew = eval_one(net, w, y);
    const std::vector<double> g_w = input_grad_one(net, ew, y);
    const nn::Matrix jac_w = semilatent_jacobian(scm, sens, q.latent);
    const std::vector<double> gd = jacobian_t_times(jac_w, g_w);

    const double r = ew.loss - base.loss - dot(d, g0);
    const double sg = r >= 0.0 ? 1.0 : -1.0;
    std::vector<double> ascent(k);
    double norm = 0.0;
    for (int j = 0; j < k; ++j) {
      ascent[j] = sg * (gd[j] - g0[j]);
      norm += ascent[j] * ascent[j];
    }
    norm = std::sqrt(norm);
    if (norm < kTiny) break;
    for (int j = 0; j < k; ++j) d[j] += step_size * ascent[j] / norm;
    const double b = oracle.base().distance(d, zero);
    if (b > delta && b > kTiny) {
      for (auto& t : d) t *= delta / b;
    }
  }
  inner.gamma_delta = std::move(d);
  return inner;
}

double capify_regularizer(const OracleMetric& oracle, const nn::FeedForwardNet& net,
                          const Instance& v, int y, double mu1, double mu2, double mu3,
                          const CapifyInner& inner) {
  const Scm& scm = oracle.scm();
  double value = 0.0;

  if (mu1 > 0.0 && !scm.sensitive_idx().empty()) {
    double worst = 0.0;
    for (const Instance& t : scm.twins(v)) {
      worst = std::max(worst, bce_loss(Classifier{net}.score(t), y));
    }
    value += mu1 * worst;
  }

  if (mu2 > 0.0 || mu3 > 0.0) {
    const std::vector<double> sens = scm.sensitive_of(v);
    const std::vector<double> x = scm.latent_of(v);
    const Eval1 base = eval_one(net, v, y);
    const std::vector<double> g_v = input_grad_one(net, base, y);
    const nn::Matrix jac = semilatent_jacobian(scm, sens, x);
    const std::vector<double> g0 = jacobian_t_times(jac, g_v);

    if (mu2 > 0.0) value += mu2 * norm2(g0);

    if (mu3 > 0.0) {
      if (inner.gamma_delta.size() != static_cast<std::size_t>(scm.latent_dim())) {
        throw LengthMismatchError("capify: gamma offset has wrong dimension");
      }
      SemiLatentPoint q;
      q.sensitive = sens;
      q.latent = x;
      for (std::size_t j = 0; j < inner.gamma_delta.size(); ++j) {
        q.latent[j] += inner.gamma_delta[j];
      }
      const Instance w = scm.from_semilatent(q);
      const Eval1 ew = eval_one(net, w, y);
      value += mu3 * std::fabs(ew.loss - base.loss - dot(inner.gamma_delta, g0));
    }
  }
  return value;
}

nn::Gradients capify_regularizer_grad(const OracleMetric& oracle,
                                      const nn::FeedForwardNet& net, const Instance& v,
                                      int y, double mu1, double mu2, double mu3,
                                      const CapifyInner& inner, double* value_out) {
  const Scm& scm = oracle.scm();
  nn::Gradients grads = nn::Gradients::zeros_like(net, 1);
  double value = 0.0;

  if (mu1 > 0.0 && !scm.sensitive_idx().empty()) {
    const std::vector<Instance> twins = scm.twins(v);
    double worst = -1.0;
    std::size_t best = 0;
    std::vector<Eval1> evals(twins.size());
    for (std::size_t s = 0; s < twins.size(); ++s) {
      evals[s] = eval_one(net, twins[s], y);
      if (evals[s].loss > worst) {
        worst = evals[s].loss;
        best = s;
      }
    }
    value += mu1 * worst;
    nn::Matrix up(1, 1, {mu1 * (evals[best].p - static_cast<double>(y))});
    grads.add(nn::backward(net, evals[best].cache, up));
  }

  if (mu2 > 0.0 || mu3 > 0.0) {
    const std::vector<double> sens = scm.sensitive_of(v);
    const std::vector<double> x = scm.latent_of(v);
    const Eval1 base = eval_one(net, v, y);
    const std::vector<double> g_v = input_grad_one(net, base, y);
    const nn::Matrix jac = semilatent_jacobian(scm, sens, x);
    const std::vector<double> g0 = jacobian_t_times(jac, g_v);
    const double g0_norm = norm2(g0);

    if (mu2 > 0.0) {
      value += mu2 * g0_norm;
      if (g0_norm > kTiny) {
        for (int kk = 0; kk < static_cast<int>(g0.size()); ++kk) {
          add_jvp_term(net, base, y, jacobian_column(jac, kk),
                       mu2 * g0[kk] / g0_norm, grads);
        }
      }
    }

    if (mu3 > 0.0) {
      SemiLatentPoint q;
      q.sensitive = sens;
      q.latent = x;
      for (std::size_t j = 0; j < inner.gamma_delta.size(); ++j) {
        q.latent[j] += inner.gamma_delta[j];
      }
      const Instance w = scm.from_semilatent(q);
      const Eval1 ew = eval_one(net, w, y);
      const double r = ew.loss - base.loss - dot(inner.gamma_delta, g0);
      value += mu3 * std::fabs(r);
      const double sg = sign_of(r);
      if (sg != 0.0) {
        nn::Matrix up_w(1, 1, {mu3 * sg * (ew.p - static_cast<double>(y))});
        grads.add(nn::backward(net, ew.cache, up_w));
        nn::Matrix up_v(1, 1, {-mu3 * sg * (base.p - static_cast<double>(y))});
        grads.add(nn::backward(net, base.cache, up_v));
        add_jvp_term(net, base, y, jacobian_times(jac, inner.gamma_delta), -mu3 * sg,
                     grads);
      }
    }
  }

  if (value_out) *value_out = value;
  return grads;
}

// ---- ecapify ----

EcapifyInner ecapify_inner(const nn::FeedForwardNet& net, int y,
                           const std::vector<Instance>& twins_est) {
  EcapifyInner inner;
  inner.u.reserve(twins_est.size());
  for (const Instance& w : twins_est) {
    const Eval1 e = eval_one(net, w, y);
    std::vector<double> g = input_grad_one(net, e, y);
    const double n = norm2(g);
    if (n > kTiny) {
      for (auto& t : g) t /= n;
    } else {
      std::fill(g.begin(), g.end(), 0.0);
    }
    inner.u.push_back(std::move(g));
  }
  return inner;
}

namespace {

struct EcapifyTermEval {
  double term = 0.0;
  Eval1 at_twin;
  Eval1 at_shift;
  std::vector<double> u;
  double ug = 0.0;     // u^T grad at the twin
  double resid = 0.0;  // signed gamma residual
};

EcapifyTermEval ecapify_term(const nn::FeedForwardNet& net, const Instance& w, int y,
                             double delta, double mu1, double mu2, double mu3,
                             const std::vector<double>* frozen_u) {
  EcapifyTermEval out;
  out.at_twin = eval_one(net, w, y);
  std::vector<double> g = input_grad_one(net, out.at_twin, y);
  if (frozen_u) {
    out.u = *frozen_u;
  } else {
    out.u = g;
    const double n = norm2(out.u);
    if (n > kTiny) {
      for (auto& t : out.u) t /= n;
    } else {
      std::fill(out.u.begin(), out.u.end(), 0.0);
    }
  }
  out.ug = dot(out.u, g);

  out.term = mu1 * out.at_twin.loss + mu2 * delta * std::fabs(out.ug);

  Instance shifted = w;
  for (std::size_t j = 0; j < shifted.size(); ++j) shifted[j] += delta * out.u[j];
  out.at_shift = eval_one(net, shifted, y);
  out.resid = out.at_shift.loss - out.at_twin.loss - delta * out.ug;
  out.term += mu3 * std::fabs(out.resid);
  return out;
}

}  // namespace

double ecapify_regularizer(const nn::FeedForwardNet& net, int y,
                           const std::vector<Instance>& twins_est, double delta,
                           double mu1, double mu2, double mu3,
                           const EcapifyInner* frozen) {
  if (twins_est.empty()) throw ConfigError("ecapify: twin estimate set is empty");
  if (mu1 <= 0.0 && mu2 <= 0.0 && mu3 <= 0.0) return 0.0;
  double worst = -1.0;
  for (std::size_t s = 0; s < twins_est.size(); ++s) {
    const EcapifyTermEval e = ecapify_term(net, twins_est[s], y, delta, mu1, mu2, mu3,
                                           frozen ? &frozen->u[s] : nullptr);
    worst = std::max(worst, e.term);
  }
  return worst;
}

nn::Gradients ecapify_regularizer_grad(const nn::FeedForwardNet& net, int y,
                                       const std::vector<Instance>& twins_est,
                                       double delta, double mu1, double mu2, double mu3,
                                       const EcapifyInner* frozen, double* value_out) {
  if (twins_est.empty()) throw ConfigError("ecapify: twin estimate set is empty");
  nn::Gradients grads = nn::Gradients::zeros_like(net, 1);
  if (mu1 <= 0.0 && mu2 <= 0.0 && mu3 <= 0.0) {
    if (value_out) *value_out = 0.0;
    return grads;
  }

  double worst = -1.0;
  std::size_t best = 0;
  std::vector<EcapifyTermEval> evals(twins_est.size());
  for (std::size_t s = 0; s < twins_est.size(); ++s) {
    evals[s] = ecapify_term(net, twins_est[s], y, delta, mu1, mu2, mu3,
                            frozen ? &frozen->u[s] : nullptr);
    if (evals[s].term > worst) {
      worst = evals[s].term;
      best = s;
    }
  }
  if (value_out) *value_out = worst;

  const EcapifyTermEval& e = evals[best];
  const double sg_res = sign_of(e.resid);
  const double sg_ug = sign_of(e.ug);

  // BCE at the twin: mu1 plus the -loss(w) inside the residual.
  const double up_twin = (mu1 - mu3 * sg_res) * (e.at_twin.p - static_cast<double>(y));
  if (up_twin != 0.0) {
    grads.add(nn::backward(net, e.at_twin.cache, nn::Matrix(1, 1, {up_twin})));
  }
  // BCE at the shifted point inside the residual.
  const double up_shift = mu3 * sg_res * (e.at_shift.p - static_cast<double>(y));
  if (up_shift != 0.0) {
    grads.add(nn::backward(net, e.at_shift.cache, nn::Matrix(1, 1, {up_shift})));
  }
  // u^T grad terms from mu2 and the residual, both directional derivatives.
  const double c = mu2 * delta * sg_ug - mu3 * sg_res * delta;
  if (c != 0.0 && norm2(e.u) > kTiny) {
    add_jvp_term(net, e.at_twin, y, e.u, c, grads);
  }
  return grads;
}

// ---- twin estimation ----

std::vector<std::vector<std::size_t>> partition_pool(
    const std::vector<Instance>& pool, const std::vector<int>& sensitive_idx,
    const std::vector<std::vector<double>>& levels) {
  std::vector<std::vector<std::size_t>> parts(levels.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t l = 0; l < levels.size(); ++l) {
      bool match = true;
      for (std::size_t k = 0; k < sensitive_idx.size(); ++k) {
        if (std::fabs(pool[i][sensitive_idx[k]] - levels[l][k]) > 1e-9) {
          match = false;
          break;
        }
      }
      if (match) {
        parts[l].push_back(i);
        break;
      }
    }
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (parts[l].empty()) {
      throw MissingLevelError("pool has no members at level index " + std::to_string(l));
    }
  }
  return parts;
}

std::vector<Instance> estimate_twins(const Instance& v, const std::vector<int>& sensitive_idx,
                                     const std::vector<std::vector<double>>& levels,
                                     const ml::DistanceFn& dist,
                                     const std::vector<Instance>& pool) {
  const auto parts = partition_pool(pool, sensitive_idx, levels);
  std::vector<Instance> out;
  out.reserve(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    bool own = true;
    for (std::size_t k = 0; k < sensitive_idx.size(); ++k) {
      if (std::fabs(v[sensitive_idx[k]] - levels[l][k]) > 1e-9) {
        own = false;
        break;
      }
    }
    if (own) {
      out.push_back(v);
      continue;
    }
    double best = 0.0;
    std::size_t best_idx = parts[l].front();
    bool first = true;
    for (std::size_t idx : parts[l]) {
      const double d = dist(v, pool[idx]);
      if (first || d < best) {
        best = d;
        best_idx = idx;
        first = false;
      }
    }
    out.push_back(pool[best_idx]);
  }
  return out;
}

namespace {

// Nearest-neighbour twins for many queries at once, using embeddings so the
// pool is only pushed through the network once.
std::vector<std::vector<Instance>> estimate_twins_bulk(
    const ml::LearnedMetric& metric, const std::vector<int>& sensitive_idx,
    const std::vector<std::vector<double>>& levels, const std::vector<Instance>& queries,
    const std::vector<Instance>& pool) {
  const auto parts = partition_pool(pool, sensitive_idx, levels);
  const nn::Matrix pool_emb = metric.embed(pool);
  const nn::Matrix query_emb = metric.embed(queries);
  const int k = pool_emb.cols;

  std::vector<std::vector<Instance>> out(queries.size());
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const Instance& v = queries[qi];
    out[qi].reserve(levels.size());
    std::span<const double> ev(query_emb.row(static_cast<int>(qi)),
                               static_cast<std::size_t>(k));
    for (std::size_t l = 0; l < levels.size(); ++l) {
      bool own = true;
      for (std::size_t kk = 0; kk < sensitive_idx.size(); ++kk) {
        if (std::fabs(v[sensitive_idx[kk]] - levels[l][kk]) > 1e-9) {
          own = false;
          break;
        }
      }
      if (own) {
        out[qi].push_back(v);
        continue;
      }
      double best = 0.0;
      std::size_t best_idx = parts[l].front();
      bool first = true;
      for (std::size_t idx : parts[l]) {
        std::span<const double> ep(pool_emb.row(static_cast<int>(idx)),
                                   static_cast<std::size_t>(k));
        const double d = metric.embed_metric.distance(ev, ep);
        if (first || d < best) {
          best = d;
          best_idx = idx;
          first = false;
        }
      }
      out[qi].push_back(pool[best_idx]);
    }
  }
  return out;
}

struct Streams {
  Rng init;
  Rng shuffle;
  Rng pgd;
};

Streams make_streams(std::uint64_t seed) {
  Rng root(seed);
  return {root.child(0), root.child(1), root.child(2)};
}

std::vector<int> classifier_widths(const LabeledDataset& data, const TrainerConfig& cfg) {
  std::vector<int> widths;
  widths.push_back(static_cast<int>(data.instances.front().size()));
  for (int h : cfg.hidden) widths.push_back(h);
  widths.push_back(1);
  return widths;
}

// Shared minibatch loop. `extra` receives (net, sample index, batch size,
// grads) and adds any per-sample regularizer gradient; it may be empty.
template <typename Extra>
Classifier train_loop(const LabeledDataset& data, const TrainerConfig& cfg, Streams& streams,
                      bool adversarial, Extra&& extra) {
  if (data.train_idx.empty()) throw ConfigError("training split is empty");
  nn::FeedForwardNet net = nn::FeedForwardNet::init(classifier_widths(data, cfg), streams.init);
  nn::AdamState adam = nn::AdamState::init(net.param_count(), cfg.lr);
  std::vector<double> params = net.flat_params();

  std::vector<std::size_t> order = data.train_idx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    streams.shuffle.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      const int bs = static_cast<int>(end - start);

      std::vector<Instance> xs;
      std::vector<int> ys;
      xs.reserve(bs);
      ys.reserve(bs);
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(data.instances[order[i]]);
        ys.push_back(data.labels[order[i]]);
      }
      nn::Matrix x = instances_to_matrix(xs);
      if (adversarial) {
        const nn::Matrix delta = pgd_attack(net, x, ys, cfg.delta, cfg.pgd_steps,
                                            cfg.resolved_pgd_step(), streams.pgd);
        nn::add_scaled(x, delta);
      }

      nn::ForwardCache cache;
      nn::Matrix out = nn::forward(net, x, cache);
      nn::Matrix up(bs, 1);
      for (int i = 0; i < bs; ++i) {
        up.at(i, 0) = (sigmoid(out.at(i, 0)) - static_cast<double>(ys[i])) / bs;
      }
      nn::Gradients grads = nn::backward(net, cache, up);

      for (std::size_t i = start; i < end; ++i) extra(net, order[i], bs, grads);

      adam_step(adam, params, grads.flat());
      net.set_flat_params(params);
    }
  }
  return Classifier{std::move(net)};
}

}  // namespace

Classifier train_erm(const LabeledDataset& data, const TrainerConfig& cfg) {
  Streams streams = make_streams(cfg.seed);
  return train_loop(data, cfg, streams, false,
                    [](const nn::FeedForwardNet&, std::size_t, int, nn::Gradients&) {});
}

Classifier train_al(const LabeledDataset& data, const TrainerConfig& cfg) {
  Streams streams = make_streams(cfg.seed);
  return train_loop(data, cfg, streams, true,
                    [](const nn::FeedForwardNet&, std::size_t, int, nn::Gradients&) {});
}

Classifier train_capify(const LabeledDataset& data, const TrainerConfig& cfg,
                        const OracleMetric& oracle) {
  Streams streams = make_streams(cfg.seed);
  const bool active = cfg.mu1 > 0.0 || cfg.mu2 > 0.0 || cfg.mu3 > 0.0;
  return train_loop(
      data, cfg, streams, false,
      [&](const nn::FeedForwardNet& net, std::size_t idx, int bs, nn::Gradients& grads) {
        if (!active) return;
        const Instance& v = data.instances[idx];
        const int y = data.labels[idx];
        CapifyInner inner;
        inner.gamma_delta.assign(oracle.scm().latent_dim(), 0.0);
        if (cfg.mu3 > 0.0) {
          inner = capify_gamma_search(oracle, net, v, y, cfg.delta, cfg.pgd_steps,
                                      cfg.resolved_pgd_step(), streams.pgd);
        }
        grads.add(capify_regularizer_grad(oracle, net, v, y, cfg.mu1, cfg.mu2, cfg.mu3,
                                          inner),
                  1.0 / bs);
      });
}

Classifier train_ecapify(const LabeledDataset& data, const TrainerConfig& cfg,
                         const ml::LearnedMetric& metric,
                         const std::vector<int>& sensitive_idx,
                         const std::vector<std::vector<double>>& levels,
                         const std::vector<Instance>& pool) {
  Streams streams = make_streams(cfg.seed);
  const bool active = cfg.mu1 > 0.0 || cfg.mu2 > 0.0 || cfg.mu3 > 0.0;

  // The metric is frozen during classifier training, so the nearest-neighbour
  // twins can be resolved once up front.
  std::vector<std::vector<Instance>> twins_by_index;
  if (active) {
    twins_by_index = estimate_twins_bulk(metric, sensitive_idx, levels, data.instances, pool);
  }

  return train_loop(
      data, cfg, streams, false,
      [&](const nn::FeedForwardNet& net, std::size_t idx, int bs, nn::Gradients& grads) {
        if (!active) return;
        grads.add(ecapify_regularizer_grad(net, data.labels[idx], twins_by_index[idx],
                                           cfg.delta, cfg.mu1, cfg.mu2, cfg.mu3),
                  1.0 / bs);
      });
}

// ---- evaluation ----

FairnessReport eval_fairness(const Classifier& h, const OracleMetric& oracle,
                             const LabeledDataset& data, double delta, int probe_count,
                             std::uint64_t seed) {
  if (data.test_idx.empty()) throw EmptyTestSetError("eval_fairness: empty test split");
  if (probe_count < 1) throw ConfigError("eval_fairness: probe count must be >= 1");

  const Scm& scm = oracle.scm();
  const auto& levels = scm.sensitive_levels();
  const Rng base_rng = Rng(seed).child(0xeba1);

  long tp = 0, tn = 0, fp = 0, fn = 0;
  long unfair = 0, cf_unfair = 0, nonrobust = 0;

  for (std::size_t idx : data.test_idx) {
    // Per-point stream: probe sets for a larger probe_count extend smaller ones.
    Rng rng = base_rng.child(idx);
    const Instance& v = data.instances[idx];
    const int label = data.labels[idx];
    const int pred = h.predict(v);
    if (pred == 1 && label == 1) ++tp;
    if (pred == 0 && label == 0) ++tn;
    if (pred == 1 && label == 0) ++fp;
    if (pred == 0 && label == 1) ++fn;

    const std::vector<double> sens = scm.sensitive_of(v);
    const std::vector<double> x = scm.latent_of(v);

    std::vector<Instance> probes;  // twins, then own-level, then random-level
    const std::vector<Instance> twins = scm.sensitive_idx().empty()
                                            ? std::vector<Instance>{v}
                                            : scm.twins(v);
    const std::size_t twin_count = twins.size();
    probes.insert(probes.end(), twins.begin(), twins.end());

    SemiLatentPoint q;
    for (int p = 0; p < probe_count; ++p) {
      const std::vector<double> off =
          sample_base_ball(oracle.base(), scm.latent_dim(), delta, rng);
      q.latent = x;
      for (std::size_t j = 0; j < q.latent.size(); ++j) q.latent[j] += off[j];
      q.sensitive = sens;
      probes.push_back(scm.from_semilatent(q));
      if (!levels.empty()) {
        q.sensitive = levels[static_cast<std::size_t>(rng.uniform_int(levels.size()))];
        probes.push_back(scm.from_semilatent(q));
      }
    }

    const std::vector<double> scores = h.scores(probes);
    bool any_flip = false, twin_flip = false, own_flip = false;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const bool flip = (scores[p] > 0.5 ? 1 : 0) != pred;
      if (!flip) continue;
      any_flip = true;
      if (p < twin_count) twin_flip = true;
      if (p >= twin_count && (levels.empty() || (p - twin_count) % 2 == 0)) {
        own_flip = true;
      }
    }
    if (any_flip) ++unfair;
    if (twin_flip) ++cf_unfair;
    if (own_flip) ++nonrobust;
  }

  const double total = static_cast<double>(data.test_idx.size());
  FairnessReport rep;
  rep.acc = static_cast<double>(tp + tn) / total;
  const double denom = std::sqrt(static_cast<double>(tp + fp)) *
                       std::sqrt(static_cast<double>(tp + fn)) *
                       std::sqrt(static_cast<double>(tn + fp)) *
                       std::sqrt(static_cast<double>(tn + fn));
  rep.mcc = denom > 0.0
                ? (static_cast<double>(tp) * static_cast<double>(tn) -
                   static_cast<double>(fp) * static_cast<double>(fn)) / denom
                : 0.0;
  rep.unfair_area = unfair / total;
  rep.cf_unfair_area = cf_unfair / total;
  rep.nonrobust_area = nonrobust / total;
  return rep;
}

FairnessAudit audit_individual_fairness(const Classifier& h, const ml::DistanceFn& metric,
                                        const std::vector<std::pair<Instance, Instance>>& pairs,
                                        double eps, double delta_thr, double lipschitz_l) {
  FairnessAudit audit;
  for (const auto& [a, b] : pairs) {
    const double din = metric(a, b);
    const double dout = std::fabs(h.score(a) - h.score(b));
    if (din <= delta_thr && dout > eps) ++audit.eps_delta_violations;
    if (dout > lipschitz_l * din) ++audit.lipschitz_violations;
  }
  return audit;
}

}  // namespace cfm::clf
