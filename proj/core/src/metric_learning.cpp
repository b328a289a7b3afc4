#include "cfm/metric_learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm::ml {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::Distance: return "distance";
    case Scenario::Label: return "label";
    case Scenario::Triplet: return "triplet";
  }
  return "distance";
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "distance") return Scenario::Distance;
  if (s == "label") return Scenario::Label;
  if (s == "triplet") return Scenario::Triplet;
  throw ConfigError("unknown scenario: " + s);
}

double MetricTrainConfig::resolved_margin() const {
  if (margin >= 0.0) return margin;
  return scenario == Scenario::Label ? delta : 0.0;
}

int MetricTrainConfig::resolved_embedding_dim(const Scm& scm) const {
  if (knowledge == EmbeddingKnowledge::Known) return scm.latent_dim();
  return (scm.node_count() + 1) / 2;
}

double LearnedMetric::distance(const Instance& v, const Instance& w) const {
  nn::Matrix batch(2, static_cast<int>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    batch.at(0, static_cast<int>(i)) = v[i];
    batch.at(1, static_cast<int>(i)) = w[i];
  }
  nn::Matrix e = nn::forward(net, batch);
  std::span<const double> ea(e.row(0), static_cast<std::size_t>(e.cols));
  std::span<const double> eb(e.row(1), static_cast<std::size_t>(e.cols));
  return embed_metric.distance(ea, eb);
}

nn::Matrix LearnedMetric::embed(const std::vector<Instance>& batch) const {
  if (batch.empty()) return nn::Matrix(0, net.input_dim());
  nn::Matrix in(static_cast<int>(batch.size()), static_cast<int>(batch.front().size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < batch[i].size(); ++j) {
      in.at(static_cast<int>(i), static_cast<int>(j)) = batch[i][j];
    }
  }
  return nn::forward(net, in);
}

// ---- dataset builders ----

namespace {

// Latent offset with base-metric norm `r`: a uniform direction rescaled so the
// base metric assigns it exactly r.
std::vector<double> offset_with_base_norm(const BaseMetric& base, int dim, double r,
                                          Rng& rng) {
  std::vector<double> zero(dim, 0.0);
  for (int tries = 0; tries < 64; ++tries) {
    std::vector<double> z(dim);
    for (auto& x : z) x = rng.normal();
    const double b = base.distance(z, zero);
    if (b < 1e-12) continue;
    for (auto& x : z) x *= r / b;
    return z;
  }
  throw ConfigError("degenerate base metric: cannot scale offsets");
}

Instance sample_in_ball(const OracleMetric& oracle, const Instance& anchor, double delta,
                        Rng& rng) {
  PcpBall ball(anchor, delta, oracle);
  return ball.sample(1, rng).front();
}

Instance sample_outside_ball(const OracleMetric& oracle, const Instance& anchor,
                             double delta, Rng& rng) {
  const Scm& scm = oracle.scm();
  // Mostly independent draws; a small share of near-boundary offsets keeps
  // hard negatives in the stream without letting them dominate the margin.
  if (rng.uniform() < 0.9) {
    // Fresh draw; reject the rare inside hits.
    for (int tries = 0; tries < 32; ++tries) {
      Instance cand = scm.sample(1, rng).front().first;
      if (oracle.distance(anchor, cand) > delta) return cand;
    }
  }
  // Latent offset with norm in (delta, 4 delta].
  SemiLatentPoint q = scm.to_semilatent(anchor);
  const double r = delta * (1.0 + 3.0 * (1.0 - rng.uniform()));
  const std::vector<double> off =
      offset_with_base_norm(oracle.base(), scm.latent_dim(), r, rng);
  for (std::size_t i = 0; i < q.latent.size(); ++i) q.latent[i] += off[i];
  const auto& levels = scm.sensitive_levels();
  if (!levels.empty()) {
    q.sensitive = levels[static_cast<std::size_t>(rng.uniform_int(levels.size()))];
  }
  return scm.from_semilatent(q);
}

Instance sample_twin(const Scm& scm, const Instance& anchor, Rng& rng) {
  const auto& levels = scm.sensitive_levels();
  if (levels.empty()) return anchor;
  const auto& level = levels[static_cast<std::size_t>(rng.uniform_int(levels.size()))];
  return scm.counterfactual(anchor, Intervention::hard(scm.sensitive_idx(), level));
}

}  // namespace

std::vector<PairExample> build_pairs(const OracleMetric& oracle, double delta, int count,
                                     std::uint64_t seed, bool label_mode) {
  if (count < 2) throw ConfigError("build_pairs: count must be >= 2");
  const Scm& scm = oracle.scm();
  Rng rng = Rng(seed).child(0x9a17);

  std::vector<PairExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Instance anchor = scm.sample(1, rng).front().first;
    Instance partner;
    if (i % 2 == 0) {
      partner = rng.uniform() < 0.1 ? sample_twin(scm, anchor, rng)
                                    : sample_in_ball(oracle, anchor, delta, rng);
    } else {
      partner = sample_outside_ball(oracle, anchor, delta, rng);
    }
    const double d = oracle.distance(anchor, partner);
    out.push_back({std::move(anchor), std::move(partner),
                   label_mode ? (d > delta ? 1.0 : 0.0) : d});
  }
  return out;
}

std::vector<TripletExample> build_triplets(const OracleMetric& oracle, double delta,
                                           int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("build_triplets: count must be >= 1");
  const Scm& scm = oracle.scm();
  Rng rng = Rng(seed).child(0x3a9f);

  std::vector<TripletExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Instance anchor = scm.sample(1, rng).front().first;
    Instance positive = rng.uniform() < 0.1 ? sample_twin(scm, anchor, rng)
                                            : sample_in_ball(oracle, anchor, delta, rng);
    Instance negative = sample_outside_ball(oracle, anchor, delta, rng);
    out.push_back({std::move(anchor), std::move(positive), std::move(negative)});
  }
  return out;
}

MetricDataset build_dataset(const OracleMetric& oracle, const MetricTrainConfig& cfg,
                            int count) {
  MetricDataset data;
  if (cfg.scenario == Scenario::Triplet) {
    data.triplets = build_triplets(oracle, cfg.delta, count, cfg.seed);
  } else {
    data.pairs =
        build_pairs(oracle, cfg.delta, count, cfg.seed, cfg.scenario == Scenario::Label);
  }
  return data;
}

// ---- losses ----

double huber_loss(double pred, double target, double knee) {
  if (knee <= 0.0) throw NonpositiveDeltaError("huber knee must be positive");
  const double e = std::fabs(pred - target);
  if (e <= knee) return 0.5 * e * e;
  return knee * e - 0.5 * knee * knee;
}

double huber_loss_grad(double pred, double target, double knee) {
  if (knee <= 0.0) throw NonpositiveDeltaError("huber knee must be positive");
  const double e = pred - target;
  if (std::fabs(e) <= knee) return e;
  return e > 0.0 ? knee : -knee;
}

double contrastive_loss(double d, double y, double margin) {
  if (margin < 0.0) throw ConfigError("contrastive margin must be nonnegative");
  return (1.0 - y) * d + y * std::max(margin - d, 0.0);
}

double contrastive_loss_grad(double d, double y, double margin) {
  return (1.0 - y) - (y > 0.5 && d < margin ? 1.0 : 0.0);
}

double triplet_loss(double d_ap, double d_an, double margin) {
  if (margin < 0.0) throw ConfigError("triplet margin must be nonnegative");
  return std::max(d_ap - d_an + margin, 0.0);
}

// ---- xicor ----

namespace {

std::vector<std::size_t> stable_argsort(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

}  // namespace

double xicor(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthMismatchError("xicor: lengths differ");
  const std::size_t n = x.size();
  if (n < 2) throw DegenerateBatchError("xicor needs at least two points");

  const std::vector<std::size_t> by_x = stable_argsort(x);
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[by_x[i]];

  // Stable ranks 1..n of the reordered y.
  const std::vector<std::size_t> by_y = stable_argsort(ys);
  std::vector<double> rank(n);
  for (std::size_t pos = 0; pos < n; ++pos) rank[by_y[pos]] = static_cast<double>(pos + 1);

  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) sum += std::fabs(rank[i + 1] - rank[i]);
  const double nn = static_cast<double>(n);
  return 1.0 - 3.0 * sum / (nn * nn - 1.0);
}

nn::Matrix xicor_matrix(const nn::Matrix& e) {
  const int k = e.cols;
  nn::Matrix xi(k, k);
  std::vector<double> col_a(e.rows), col_b(e.rows);
  for (int a = 0; a < k; ++a) {
    xi.at(a, a) = 1.0;
    for (int i = 0; i < e.rows; ++i) col_a[i] = e.at(i, a);
    for (int b = 0; b < k; ++b) {
      if (a == b) continue;
      for (int i = 0; i < e.rows; ++i) col_b[i] = e.at(i, b);
      xi.at(a, b) = xicor(col_a, col_b);
    }
  }
  return xi;
}

// ---- decorrelation surrogate ----

namespace {

constexpr double kVarEps = 1e-12;

struct StandardizedColumn {
  std::vector<double> value;  // (y - mean) / sqrt(var + eps)
  double inv_s = 0.0;
};

StandardizedColumn standardize(const nn::Matrix& e, int col) {
  const int m = e.rows;
  StandardizedColumn out;
  out.value.resize(m);
  double mean = 0.0;
  for (int i = 0; i < m; ++i) mean += e.at(i, col);
  mean /= m;
  double var = 0.0;
  for (int i = 0; i < m; ++i) {
    const double d = e.at(i, col) - mean;
    var += d * d;
  }
  var /= m;
  out.inv_s = 1.0 / std::sqrt(var + kVarEps);
  for (int i = 0; i < m; ++i) out.value[i] = (e.at(i, col) - mean) * out.inv_s;
  return out;
}

void standardize_backward(const StandardizedColumn& sc, const std::vector<double>& g_t,
                          std::vector<double>& g_y) {
  const int m = static_cast<int>(sc.value.size());
  double sum_g = 0.0, sum_gt = 0.0;
  for (int i = 0; i < m; ++i) {
    sum_g += g_t[i];
    sum_gt += g_t[i] * sc.value[i];
  }
  for (int i = 0; i < m; ++i) {
    g_y[i] += sc.inv_s * (g_t[i] - sum_g / m - sc.value[i] * sum_gt / m);
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Soft xicor of (sorter column a, ranked column b) and optionally the gradient
// w.r.t. the standardized b values. The sort permutation is piecewise
// constant, so the sorter column gets no gradient.
double soft_xicor(const std::vector<std::size_t>& order_by_a,
                  const StandardizedColumn& b, double temperature,
                  std::vector<double>* grad_bt) {
  const int m = static_cast<int>(b.value.size());
  std::vector<double> rank(m, 1.0);
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      acc += sigmoid((b.value[i] - b.value[j]) / temperature);
    }
    rank[i] = 1.0 + acc;
  }

  double sum = 0.0;
  std::vector<double> g_rank;
  if (grad_bt) g_rank.assign(m, 0.0);
  for (int i = 0; i + 1 < m; ++i) {
    const double d = rank[order_by_a[i + 1]] - rank[order_by_a[i]];
    sum += std::fabs(d);
    if (grad_bt && d != 0.0) {
      const double sg = d > 0.0 ? 1.0 : -1.0;
      g_rank[order_by_a[i + 1]] += sg;
      g_rank[order_by_a[i]] -= sg;
    }
  }
  const double mm = static_cast<double>(m);
  const double xi = 1.0 - 3.0 * sum / (mm * mm - 1.0);

  if (grad_bt) {
    const double up = -3.0 / (mm * mm - 1.0);
    for (int i = 0; i < m; ++i) {
      if (g_rank[i] == 0.0) continue;
      const double gi = up * g_rank[i];
      for (int j = 0; j < m; ++j) {
        if (j == i) continue;
        const double s = sigmoid((b.value[i] - b.value[j]) / temperature);
        const double ds = s * (1.0 - s) / temperature;
        (*grad_bt)[i] += gi * ds;
        (*grad_bt)[j] -= gi * ds;
      }
    }
  }
  return xi;
}

}  // namespace

DecorrelationGrad decorrelation_penalty_with_grad(const nn::Matrix& e, double temperature) {
  if (e.rows < 4) throw DegenerateBatchError("decorrelation needs a batch of >= 4");
  const int k = e.cols;
  DecorrelationGrad out;
  out.grad = nn::Matrix(e.rows, e.cols);
  if (k < 2) return out;  // ||I_1 - [1]||_F = 0 by the diagonal-ones convention

  std::vector<StandardizedColumn> cols;
  std::vector<std::vector<std::size_t>> orders;
  cols.reserve(k);
  orders.reserve(k);
  std::vector<double> raw(e.rows);
  for (int c = 0; c < k; ++c) {
    cols.push_back(standardize(e, c));
    for (int i = 0; i < e.rows; ++i) raw[i] = e.at(i, c);
    orders.push_back(stable_argsort(raw));
  }

  double sq_sum = 0.0;
  std::vector<double> xis;
  std::vector<std::vector<double>> grads_bt;
  std::vector<int> ranked_col;
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      if (a == b) continue;
      std::vector<double> g_bt(e.rows, 0.0);
      const double xi = soft_xicor(orders[a], cols[b], temperature, &g_bt);
      sq_sum += xi * xi;
      xis.push_back(xi);
      grads_bt.push_back(std::move(g_bt));
      ranked_col.push_back(b);
    }
  }
  out.penalty = std::sqrt(sq_sum);
  if (out.penalty < 1e-12) return out;

  std::vector<std::vector<double>> g_cols(k, std::vector<double>(e.rows, 0.0));
  for (std::size_t p = 0; p < xis.size(); ++p) {
    const double w = xis[p] / out.penalty;
    auto& g = grads_bt[p];
    for (int i = 0; i < e.rows; ++i) g[i] *= w;
    standardize_backward(cols[static_cast<std::size_t>(ranked_col[p])], g,
                         g_cols[static_cast<std::size_t>(ranked_col[p])]);
  }
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < e.rows; ++i) out.grad.at(i, c) = g_cols[c][i];
  }
  return out;
}

double decorrelation_penalty(const nn::Matrix& e, double temperature) {
  if (e.rows < 4) throw DegenerateBatchError("decorrelation needs a batch of >= 4");
  const int k = e.cols;
  if (k < 2) return 0.0;
  std::vector<StandardizedColumn> cols;
  std::vector<std::vector<std::size_t>> orders;
  std::vector<double> raw(e.rows);
  for (int c = 0; c < k; ++c) {
    cols.push_back(standardize(e, c));
    for (int i = 0; i < e.rows; ++i) raw[i] = e.at(i, c);
    orders.push_back(stable_argsort(raw));
  }
  double sq_sum = 0.0;
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      if (a == b) continue;
      const double xi = soft_xicor(orders[a], cols[b], temperature, nullptr);
      sq_sum += xi * xi;
    }
  }
  return std::sqrt(sq_sum);
}

// ---- training ----

namespace {

// Distance between embedding rows under the base metric, plus the gradient
// w.r.t. the first row (the second row gets the negation).
double embed_dist_grad(const BaseMetric& base, const double* ea, const double* eb, int k,
                       std::vector<double>& ga) {
  std::vector<double> diff(k);
  for (int i = 0; i < k; ++i) diff[i] = ea[i] - eb[i];
  double d = 0.0;
  switch (base.kind) {
    case BaseMetric::Kind::Euclidean: {
      for (int i = 0; i < k; ++i) d += diff[i] * diff[i];
      d = std::sqrt(d);
      for (int i = 0; i < k; ++i) ga[i] = d > 1e-12 ? diff[i] / d : 0.0;
      return d;
    }
    case BaseMetric::Kind::WeightedEuclidean: {
      for (int i = 0; i < k; ++i) d += base.weights[i] * diff[i] * diff[i];
      d = std::sqrt(d);
      for (int i = 0; i < k; ++i) ga[i] = d > 1e-12 ? base.weights[i] * diff[i] / d : 0.0;
      return d;
    }
    case BaseMetric::Kind::Mahalanobis: {
      std::vector<double> sd(k, 0.0);
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) sd[i] += base.sigma.at(i, j) * diff[j];
      }
      for (int i = 0; i < k; ++i) d += diff[i] * sd[i];
      d = std::sqrt(std::max(d, 0.0));
      for (int i = 0; i < k; ++i) ga[i] = d > 1e-12 ? sd[i] / d : 0.0;
      return d;
    }
  }
  return 0.0;
}

nn::Matrix rows_to_matrix(const std::vector<const Instance*>& rows) {
  nn::Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows.front()->size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i]->size(); ++j) {
      m.at(static_cast<int>(i), static_cast<int>(j)) = (*rows[i])[j];
    }
  }
  return m;
}

BaseMetric resolve_embed_metric(const OracleMetric& oracle, const MetricTrainConfig& cfg,
                                int embed_dim) {
  if (cfg.knowledge == EmbeddingKnowledge::Unknown) return BaseMetric::euclidean();
  const BaseMetric& base = oracle.base();
  if (base.kind == BaseMetric::Kind::WeightedEuclidean &&
      static_cast<int>(base.weights.size()) != embed_dim) {
    throw ConfigError("known metric does not fit the embedding dimension");
  }
  if (base.kind == BaseMetric::Kind::Mahalanobis && base.sigma.rows != embed_dim) {
    throw ConfigError("known metric does not fit the embedding dimension");
  }
  return base;
}

}  // namespace

TrainedMetric train_metric(const OracleMetric& oracle, const MetricTrainConfig& cfg,
                           const MetricDataset& data) {
  const Scm& scm = oracle.scm();
  const bool is_triplet = cfg.scenario == Scenario::Triplet;
  const std::size_t count = is_triplet ? data.triplets.size() : data.pairs.size();
  if (count == 0) throw ConfigError("train_metric: dataset does not match the scenario");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("train_metric: bad config");

  const int embed_dim = cfg.resolved_embedding_dim(scm);
  std::vector<int> widths;
  widths.push_back(scm.node_count());
  for (int i = 0; i < cfg.depth; ++i) widths.push_back(cfg.hidden_width);
  widths.push_back(embed_dim);

  Rng rng(cfg.seed);
  nn::FeedForwardNet net = nn::FeedForwardNet::init(widths, rng);
  const BaseMetric embed_metric = resolve_embed_metric(oracle, cfg, embed_dim);

  nn::AdamState adam = nn::AdamState::init(net.param_count(), cfg.lr);
  std::vector<double> params = net.flat_params();
  const double margin = cfg.resolved_margin();

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);

  TrainedMetric out;
  out.epoch_loss.reserve(cfg.epochs);

  std::vector<double> ga(embed_dim), gn(embed_dim);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < count; start += cfg.batch_size) {
      const std::size_t end = std::min(count, start + cfg.batch_size);
      const int bs = static_cast<int>(end - start);

      double batch_loss = 0.0;
      nn::Gradients grads = nn::Gradients::zeros_like(net, bs);

      if (!is_triplet) {
        std::vector<const Instance*> ra(bs), rb(bs);
        for (int i = 0; i < bs; ++i) {
          ra[i] = &data.pairs[order[start + i]].a;
          rb[i] = &data.pairs[order[start + i]].b;
        }
        nn::ForwardCache ca, cb;
        nn::Matrix ea = nn::forward(net, rows_to_matrix(ra), ca);
        nn::Matrix eb = nn::forward(net, rows_to_matrix(rb), cb);

        nn::Matrix ua(bs, embed_dim), ub(bs, embed_dim);
        for (int i = 0; i < bs; ++i) {
          const double tag = data.pairs[order[start + i]].tag;
          const double d = embed_dist_grad(embed_metric, ea.row(i), eb.row(i), embed_dim, ga);
          double up;
          if (cfg.scenario == Scenario::Distance) {
            batch_loss += huber_loss(d, tag, cfg.huber_knee);
            up = huber_loss_grad(d, tag, cfg.huber_knee);
          } else {
            batch_loss += contrastive_loss(d, tag, margin);
            up = contrastive_loss_grad(d, tag, margin);
          }
          for (int j = 0; j < embed_dim; ++j) {
            ua.at(i, j) = up * ga[j] / bs;
            ub.at(i, j) = -up * ga[j] / bs;
          }
        }
        batch_loss /= bs;

        if (cfg.decorrelation_coeff > 0.0 && bs >= 4) {
          DecorrelationGrad dec =
              decorrelation_penalty_with_grad(ea, cfg.soft_rank_temperature);
          batch_loss += cfg.decorrelation_coeff * dec.penalty;
          nn::add_scaled(ua, dec.grad, cfg.decorrelation_coeff);
        }

        grads.add(nn::backward(net, ca, ua));
        grads.add(nn::backward(net, cb, ub));
      } else {
        std::vector<const Instance*> ranc(bs), rpos(bs), rneg(bs);
        for (int i = 0; i < bs; ++i) {
          const auto& t = data.triplets[order[start + i]];
          ranc[i] = &t.anchor;
          rpos[i] = &t.positive;
          rneg[i] = &t.negative;
        }
        nn::ForwardCache canc, cpos, cneg;
        nn::Matrix eanc = nn::forward(net, rows_to_matrix(ranc), canc);
        nn::Matrix epos = nn::forward(net, rows_to_matrix(rpos), cpos);
        nn::Matrix eneg = nn::forward(net, rows_to_matrix(rneg), cneg);

        nn::Matrix uanc(bs, embed_dim), upos(bs, embed_dim), uneg(bs, embed_dim);
        for (int i = 0; i < bs; ++i) {
          const double d_ap =
              embed_dist_grad(embed_metric, eanc.row(i), epos.row(i), embed_dim, ga);
          const double d_an =
              embed_dist_grad(embed_metric, eanc.row(i), eneg.row(i), embed_dim, gn);
          const double loss = triplet_loss(d_ap, d_an, margin);
          batch_loss += loss;
          if (loss > 0.0) {
            for (int j = 0; j < embed_dim; ++j) {
              uanc.at(i, j) = (ga[j] - gn[j]) / bs;
              upos.at(i, j) = -ga[j] / bs;
              uneg.at(i, j) = gn[j] / bs;
            }
          }
        }
        batch_loss /= bs;

        if (cfg.decorrelation_coeff > 0.0 && bs >= 4) {
          DecorrelationGrad dec =
              decorrelation_penalty_with_grad(eanc, cfg.soft_rank_temperature);
          batch_loss += cfg.decorrelation_coeff * dec.penalty;
          nn::add_scaled(uanc, dec.grad, cfg.decorrelation_coeff);
        }

        grads.add(nn::backward(net, canc, uanc));
        grads.add(nn::backward(net, cpos, upos));
        grads.add(nn::backward(net, cneg, uneg));
      }

      adam_step(adam, params, grads.flat());
      net.set_flat_params(params);
      epoch_loss += batch_loss;
      ++batches;
    }
    out.epoch_loss.push_back(batches > 0 ? epoch_loss / batches : 0.0);
  }

  out.metric = LearnedMetric{std::move(net), embed_metric};
  return out;
}

MetricReport eval_metric(const DistanceFn& learned, const OracleMetric& oracle,
                         double delta, const std::vector<PairExample>& test_pairs) {
  if (test_pairs.empty()) throw EmptyTestSetError("eval_metric: no test pairs");

  long tp = 0, tn = 0, fp = 0, fn = 0;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& pair : test_pairs) {
    const double d_true = oracle.distance(pair.a, pair.b);
    const double d_pred = learned(pair.a, pair.b);
    const bool y = d_true > delta;  // positive class: dissimilar
    const bool p = d_pred > delta;
    if (y && p) ++tp;
    if (!y && !p) ++tn;
    if (!y && p) ++fp;
    if (y && !p) ++fn;
    const double e = d_pred - d_true;
    abs_sum += std::fabs(e);
    sq_sum += e * e;
  }

  const double total = static_cast<double>(test_pairs.size());
  MetricReport rep;
  rep.acc = static_cast<double>(tp + tn) / total;
  rep.fn = (fn + tp) > 0 ? static_cast<double>(fn) / static_cast<double>(fn + tp) : 0.0;
  rep.fp = (fp + tn) > 0 ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0;
  const double denom = std::sqrt(static_cast<double>(tp + fp)) *
                       std::sqrt(static_cast<double>(tp + fn)) *
                       std::sqrt(static_cast<double>(tn + fp)) *
                       std::sqrt(static_cast<double>(tn + fn));
  rep.mcc = denom > 0.0
                ? (static_cast<double>(tp) * static_cast<double>(tn) -
                   static_cast<double>(fp) * static_cast<double>(fn)) / denom
                : 0.0;
  rep.mae = abs_sum / total;
  rep.rmse = std::sqrt(sq_sum / total);
  return rep;
}

}  // namespace cfm::ml
