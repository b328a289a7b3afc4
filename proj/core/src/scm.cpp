#include "cfm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm {

namespace {
constexpr double kEqTol = 1e-9;

bool approx(double a, double b, double tol = kEqTol) { return std::fabs(a - b) <= tol; }
}  // namespace

std::vector<int> Dag::topological_order() const {
  if (node_count < 0 || parents.size() != static_cast<std::size_t>(node_count)) {
    throw ConfigError("dag: parents list size must equal node_count");
  }
  std::vector<int> indegree(node_count, 0);
  std::vector<std::vector<int>> children(node_count);
  for (int i = 0; i < node_count; ++i) {
    for (int p : parents[i]) {
      if (p < 0 || p >= node_count) throw ConfigError("dag: parent index out of range");
      if (p == i) throw ConfigError("dag: self loop");
      children[p].push_back(i);
      ++indegree[i];
    }
  }
  std::vector<int> order;
  order.reserve(node_count);
  std::vector<int> ready;
  for (int i = 0; i < node_count; ++i) {
    if (indegree[i] == 0) ready.push_back(i);
  }
  while (!ready.empty()) {
    const int node = ready.back();
    ready.pop_back();
    order.push_back(node);
    for (int c : children[node]) {
      if (--indegree[c] == 0) ready.push_back(c);
    }
  }
  if (static_cast<int>(order.size()) != node_count) throw ConfigError("dag: cycle detected");
  return order;
}

double NoiseDist::sample(Rng& rng) const {
  switch (kind) {
    case Kind::Bernoulli:
      return rng.bernoulli(a);
    case Kind::Normal:
      return rng.normal(a, std::sqrt(b));
    case Kind::Uniform:
      return rng.uniform(a, b);
  }
  return 0.0;
}

Intervention Intervention::hard(std::vector<int> idx, std::vector<double> theta) {
  if (idx.size() != theta.size()) throw ConfigError("hard intervention: index/value size mismatch");
  Intervention iv;
  iv.kind = Kind::Hard;
  iv.indices = std::move(idx);
  iv.values = std::move(theta);
  return iv;
}

Intervention Intervention::shift(std::vector<double> delta) {
  Intervention iv;
  iv.kind = Kind::Shift;
  iv.values = std::move(delta);
  return iv;
}

Intervention Intervention::noise_shift(std::vector<double> delta) {
  Intervention iv;
  iv.kind = Kind::NoiseShift;
  iv.values = std::move(delta);
  return iv;
}

Scm::Scm(Dag graph, std::vector<StructuralEquation> equations, std::vector<NoiseDist> noise,
         std::vector<int> sensitive_idx, std::vector<std::vector<double>> sensitive_levels,
         std::vector<std::string> feature_names)
    : graph_(std::move(graph)),
      equations_(std::move(equations)),
      noise_(std::move(noise)),
      sensitive_idx_(std::move(sensitive_idx)),
      levels_(std::move(sensitive_levels)),
      names_(std::move(feature_names)) {
  topo_ = graph_.topological_order();
  const auto n = static_cast<std::size_t>(graph_.node_count);
  if (equations_.size() != n || noise_.size() != n) {
    throw ConfigError("scm: one equation and one noise distribution per node");
  }
  if (names_.size() != n) throw ConfigError("scm: one feature name per node");
  std::sort(sensitive_idx_.begin(), sensitive_idx_.end());
  for (int i : sensitive_idx_) {
    if (i < 0 || i >= graph_.node_count) throw ConfigError("scm: sensitive index out of range");
  }
  if (std::adjacent_find(sensitive_idx_.begin(), sensitive_idx_.end()) != sensitive_idx_.end()) {
    throw ConfigError("scm: duplicate sensitive index");
  }
  for (const auto& lvl : levels_) {
    if (lvl.size() != sensitive_idx_.size()) {
      throw ConfigError("scm: each level must cover the sensitive block");
    }
  }
  for (int i = 0; i < graph_.node_count; ++i) {
    if (!std::binary_search(sensitive_idx_.begin(), sensitive_idx_.end(), i)) {
      nonsensitive_idx_.push_back(i);
    }
  }
}

namespace {

std::vector<double> gather(const Instance& v, const std::vector<int>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

Instance Scm::reduce(const ExogenousPoint& u) const {
  Intervention none;
  none.kind = Intervention::Kind::Shift;
  none.values.assign(node_count(), 0.0);
  return reduce_with(u, none);
}

Instance Scm::reduce_with(const ExogenousPoint& u, const Intervention& iv) const {
  if (u.size() != static_cast<std::size_t>(node_count())) {
    throw LengthMismatchError("reduce: noise vector length mismatch");
  }
  if (iv.kind != Intervention::Kind::Hard &&
      iv.values.size() != static_cast<std::size_t>(node_count())) {
    throw LengthMismatchError("reduce: shift vector length mismatch");
  }

  std::vector<bool> forced(node_count(), false);
  std::vector<double> forced_value(node_count(), 0.0);
  if (iv.kind == Intervention::Kind::Hard) {
    for (std::size_t k = 0; k < iv.indices.size(); ++k) {
      const int i = iv.indices[k];
      if (i < 0 || i >= node_count()) throw ConfigError("intervention index out of range");
      forced[i] = true;
      forced_value[i] = iv.values[k];
    }
  }

  Instance v(node_count(), 0.0);
  std::vector<double> pa;
  for (int node : topo_) {
    if (forced[node]) {
      v[node] = forced_value[node];
      continue;
    }
    pa = gather(v, graph_.parents[node]);
    double noise = u[node];
    if (iv.kind == Intervention::Kind::NoiseShift) noise += iv.values[node];
    double value = equations_[node].forward(pa, noise);
    if (iv.kind == Intervention::Kind::Shift) value += iv.values[node];
    v[node] = value;
  }
  return v;
}

ExogenousPoint Scm::abduct(const Instance& v) const {
  if (v.size() != static_cast<std::size_t>(node_count())) {
    throw LengthMismatchError("abduct: instance length mismatch");
  }
  ExogenousPoint u(node_count(), 0.0);
  std::vector<double> pa;
  for (int node : topo_) {
    pa = gather(v, graph_.parents[node]);
    u[node] = equations_[node].noise_invert(v[node], pa);
    if (!std::isfinite(u[node])) {
      throw OutOfSupportError("abduct: non-finite noise at node " + std::to_string(node));
    }
  }
  return u;
}

std::vector<std::pair<Instance, ExogenousPoint>> Scm::sample(int count,
                                                             std::uint64_t seed) const {
  Rng rng(seed);
  return sample(count, rng);
}

std::vector<std::pair<Instance, ExogenousPoint>> Scm::sample(int count, Rng& rng) const {
  if (count < 1) throw ConfigError("sample: count must be >= 1");
  std::vector<std::pair<Instance, ExogenousPoint>> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    ExogenousPoint u(node_count());
    for (int i = 0; i < node_count(); ++i) u[i] = noise_[i].sample(rng);
    out.emplace_back(reduce(u), std::move(u));
  }
  return out;
}

Instance Scm::counterfactual(const Instance& v, const Intervention& iv) const {
  return reduce_with(abduct(v), iv);
}

std::vector<Instance> Scm::twins(const Instance& v,
                                 const std::vector<std::vector<double>>& levels) const {
  std::vector<Instance> out;
  out.reserve(levels.size());
  for (const auto& level : levels) {
    if (level.size() != sensitive_idx_.size()) {
      throw LengthMismatchError("twins: level size must match sensitive block");
    }
    out.push_back(counterfactual(v, Intervention::hard(sensitive_idx_, level)));
  }
  return out;
}

std::vector<Instance> Scm::twins(const Instance& v) const { return twins(v, levels_); }

SemiLatentPoint Scm::to_semilatent(const Instance& v) const {
  const ExogenousPoint u = abduct(v);
  SemiLatentPoint q;
  q.sensitive.reserve(sensitive_idx_.size());
  for (int i : sensitive_idx_) q.sensitive.push_back(v[i]);
  q.latent.reserve(nonsensitive_idx_.size());
  for (int i : nonsensitive_idx_) q.latent.push_back(u[i]);
  return q;
}

Instance Scm::from_semilatent(const SemiLatentPoint& q) const {
  if (q.sensitive.size() != sensitive_idx_.size() ||
      q.latent.size() != nonsensitive_idx_.size()) {
    throw LengthMismatchError("from_semilatent: block sizes mismatch");
  }
  // Sensitive nodes take their observed value; the rest evaluate with the
  // stored exogenous coordinate, in topological order.
  std::vector<bool> is_sensitive(node_count(), false);
  std::vector<double> fixed(node_count(), 0.0);
  std::vector<double> noise(node_count(), 0.0);
  for (std::size_t k = 0; k < sensitive_idx_.size(); ++k) {
    is_sensitive[sensitive_idx_[k]] = true;
    fixed[sensitive_idx_[k]] = q.sensitive[k];
  }
  for (std::size_t k = 0; k < nonsensitive_idx_.size(); ++k) {
    noise[nonsensitive_idx_[k]] = q.latent[k];
  }

  Instance v(node_count(), 0.0);
  std::vector<double> pa;
  for (int node : topo_) {
    if (is_sensitive[node]) {
      v[node] = fixed[node];
      continue;
    }
    pa = gather(v, graph_.parents[node]);
    v[node] = equations_[node].forward(pa, noise[node]);
  }
  return v;
}

std::vector<double> Scm::latent_of(const Instance& v) const {
  const ExogenousPoint u = abduct(v);
  return gather(u, nonsensitive_idx_);
}

std::vector<double> Scm::sensitive_of(const Instance& v) const {
  return gather(v, sensitive_idx_);
}

// ---- built-ins ----

namespace {

StructuralEquation root_identity() {
  return {
      [](std::span<const double>, double u) { return u; },
      [](double own, std::span<const double>) { return own; },
  };
}

}  // namespace

Scm make_lin_scm() {
  Dag dag;
  dag.node_count = 3;
  dag.parents = {{}, {0}, {0, 1}};

  std::vector<StructuralEquation> eqs;
  eqs.push_back(root_identity());
  eqs.push_back({
      [](std::span<const double> pa, double u) { return 2.0 * pa[0] + u; },
      [](double own, std::span<const double> pa) { return own - 2.0 * pa[0]; },
  });
  eqs.push_back({
      [](std::span<const double> pa, double u) { return pa[0] - pa[1] + u; },
      [](double own, std::span<const double> pa) { return own - pa[0] + pa[1]; },
  });

  return Scm(dag, std::move(eqs),
             {NoiseDist::bernoulli(0.5), NoiseDist::normal(0.0, 1.0), NoiseDist::normal(0.0, 1.0)},
             {0}, {{0.0}, {1.0}}, {"s", "x1", "x2"});
}

Scm make_nlm_scm() {
  Dag dag;
  dag.node_count = 3;
  dag.parents = {{}, {0}, {0, 1}};

  std::vector<StructuralEquation> eqs;
  eqs.push_back(root_identity());
  eqs.push_back({
      [](std::span<const double> pa, double u) { return 2.0 * pa[0] * pa[0] + u; },
      [](double own, std::span<const double> pa) { return own - 2.0 * pa[0] * pa[0]; },
  });
  eqs.push_back({
      [](std::span<const double> pa, double u) { return pa[0] - pa[1] * pa[1] + u; },
      [](double own, std::span<const double> pa) { return own - pa[0] + pa[1] * pa[1]; },
  });

  return Scm(dag, std::move(eqs),
             {NoiseDist::bernoulli(0.5), NoiseDist::normal(0.0, 1.0), NoiseDist::normal(0.0, 1.0)},
             {0}, {{0.0}, {1.0}}, {"s", "x1", "x2"});
}

Scm make_example1_scm() {
  Dag dag;
  dag.node_count = 2;
  dag.parents = {{}, {0}};

  std::vector<StructuralEquation> eqs;
  eqs.push_back({
      [](std::span<const double>, double u) { return 2.0 * (u - 0.5); },
      [](double own, std::span<const double>) { return 0.5 * own + 0.5; },
  });
  eqs.push_back({
      [](std::span<const double> pa, double u) { return pa[0] * u; },
      [](double own, std::span<const double> pa) {
        if (approx(pa[0], 0.0)) {
          throw OutOfSupportError("example1: v2 noise undefined for v1 = 0");
        }
        return own / pa[0];
      },
  });

  return Scm(dag, std::move(eqs), {NoiseDist::bernoulli(0.5), NoiseDist::bernoulli(0.5)},
             {1}, {{-1.0}, {0.0}, {1.0}}, {"v1", "v2"});
}

Scm make_example2_scm(bool variant_b, double n_constant) {
  Dag dag;
  dag.node_count = 3;
  dag.parents = {{}, {0}, {0, 1}};

  const double N = n_constant;
  std::vector<StructuralEquation> eqs;
  eqs.push_back(root_identity());
  // v2 = v1 (1 - u2); for v1 = 0 the noise leaves no trace, any u2 maps to
  // v2 = 0 and abduction returns the representative 0.
  eqs.push_back({
      [](std::span<const double> pa, double u) { return pa[0] * (1.0 - u); },
      [](double own, std::span<const double> pa) {
        if (!approx(pa[0], 0.0)) return 1.0 - own / pa[0];
        if (approx(own, 0.0)) return 0.0;
        throw OutOfSupportError("example2: v2 != 0 while v1 = 0");
      },
  });
  // v3 switches on v1 == v2. The inverse picks the representative noise N/2
  // for the "u3 > 0" branch and 0 when v3 equals v2.
  if (!variant_b) {
    eqs.push_back({
        [](std::span<const double> pa, double u) {
          if (!approx(pa[0], pa[1])) return u > 0.0 ? pa[0] : pa[1];
          return u;
        },
        [N](double own, std::span<const double> pa) {
          if (!approx(pa[0], pa[1])) {
            if (approx(own, pa[1])) return 0.0;
            if (approx(own, pa[0])) return N / 2.0;
            throw OutOfSupportError("example2: v3 outside {v1, v2}");
          }
          return own;
        },
    });
  } else {
    eqs.push_back({
        [N](std::span<const double> pa, double u) {
          if (!approx(pa[0], pa[1])) return u > 0.0 ? pa[0] : pa[1];
          return N - u;
        },
        [N](double own, std::span<const double> pa) {
          if (!approx(pa[0], pa[1])) {
            if (approx(own, pa[1])) return 0.0;
            if (approx(own, pa[0])) return N / 2.0;
            throw OutOfSupportError("example2: v3 outside {v1, v2}");
          }
          return N - own;
        },
    });
  }

  return Scm(dag, std::move(eqs),
             {NoiseDist::bernoulli(0.5), NoiseDist::bernoulli(0.5), NoiseDist::uniform(0.0, N)},
             {0}, {{0.0}, {1.0}}, {"v1", "v2", "v3"});
}

// ---- csv ----

TabularData read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open csv: " + path);
  TabularData data;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("csv: empty file: " + path);
  std::stringstream header(line);
  std::string cell;
  while (std::getline(header, cell, ',')) data.names.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(data.names.size());
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != data.names.size()) throw ConfigError("csv: ragged row in " + path);
    data.rows.push_back(std::move(row));
  }
  return data;
}

void write_csv(const std::string& path, const TabularData& data) {
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot open csv for writing: " + path);
  for (std::size_t j = 0; j < data.names.size(); ++j) {
    out << (j ? "," : "") << data.names[j];
  }
  out << "\n";
  out.precision(17);
  for (const auto& row : data.rows) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
    out << "\n";
  }
}

// ---- linear ANM fit ----

namespace {

// Solve (X^T X) beta = X^T y by Gaussian elimination with partial pivoting.
// Throws SingularDesignError when a pivot is numerically zero.
std::vector<double> solve_normal_equations(const std::vector<std::vector<double>>& x,
                                           const std::vector<double>& y) {
  const std::size_t p = x.front().size();
  std::vector<std::vector<double>> a(p, std::vector<double>(p + 1, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) a[i][j] += x[r][i] * x[r][j];
      a[i][p] += x[r][i] * y[r];
    }
  }
  double scale = 0.0;
  for (std::size_t i = 0; i < p; ++i) scale = std::max(scale, std::fabs(a[i][i]));
  const double tol = std::max(scale, 1.0) * 1e-10;

  for (std::size_t col = 0; col < p; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < p; ++r) {
      if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
    }
    if (std::fabs(a[pivot][col]) < tol) {
      throw SingularDesignError("least-squares design is rank deficient");
    }
    std::swap(a[col], a[pivot]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t j = col; j <= p; ++j) a[r][j] -= f * a[col][j];
    }
  }
  std::vector<double> beta(p);
  for (std::size_t i = 0; i < p; ++i) beta[i] = a[i][p] / a[i][i];
  return beta;
}

bool is_binary_column(const std::vector<std::vector<double>>& rows, int col) {
  for (const auto& r : rows) {
    if (!approx(r[col], 0.0) && !approx(r[col], 1.0)) return false;
  }
  return true;
}

}  // namespace

Scm fit_linear_anm(const TabularData& data, const Dag& dag, std::vector<int> sensitive_idx) {
  if (data.col_count() != static_cast<std::size_t>(dag.node_count)) {
    throw ConfigError("fit: column count must match dag node count");
  }
  if (data.row_count() < 2) throw ConfigError("fit: need at least two rows");

  const int n = dag.node_count;
  std::vector<StructuralEquation> eqs(n);
  std::vector<NoiseDist> noise(n);

  for (int node = 0; node < n; ++node) {
    const auto& parents = dag.parents[node];
    if (parents.empty() && is_binary_column(data.rows, node)) {
      double mean = 0.0;
      for (const auto& r : data.rows) mean += r[node];
      mean /= static_cast<double>(data.row_count());
      eqs[node] = root_identity();
      noise[node] = NoiseDist::bernoulli(mean);
      continue;
    }

    // Design: intercept plus parent columns.
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    x.reserve(data.row_count());
    y.reserve(data.row_count());
    for (const auto& r : data.rows) {
      std::vector<double> row;
      row.reserve(parents.size() + 1);
      row.push_back(1.0);
      for (int p : parents) row.push_back(r[p]);
      x.push_back(std::move(row));
      y.push_back(r[node]);
    }
    std::vector<double> beta = solve_normal_equations(x, y);

    double rss = 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) {
      double pred = 0.0;
      for (std::size_t j = 0; j < beta.size(); ++j) pred += beta[j] * x[r][j];
      const double e = y[r] - pred;
      rss += e * e;
    }
    const double variance = rss / static_cast<double>(data.row_count());

    const double intercept = beta.front();
    std::vector<double> coef(beta.begin() + 1, beta.end());
    eqs[node] = {
        [intercept, coef](std::span<const double> pa, double u) {
          double v = intercept + u;
          for (std::size_t j = 0; j < coef.size(); ++j) v += coef[j] * pa[j];
          return v;
        },
        [intercept, coef](double own, std::span<const double> pa) {
          double u = own - intercept;
          for (std::size_t j = 0; j < coef.size(); ++j) u -= coef[j] * pa[j];
          return u;
        },
    };
    noise[node] = NoiseDist::normal(0.0, variance);
  }

  // Joint level set = distinct observed sensitive rows.
  std::sort(sensitive_idx.begin(), sensitive_idx.end());
  std::set<std::vector<double>> level_set;
  for (const auto& r : data.rows) {
    std::vector<double> key;
    key.reserve(sensitive_idx.size());
    for (int i : sensitive_idx) key.push_back(r[i]);
    level_set.insert(std::move(key));
  }

  return Scm(dag, std::move(eqs), std::move(noise), sensitive_idx,
             {level_set.begin(), level_set.end()}, data.names);
}

Scm load_scm_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scm config: ") + e.what());
  }
  if (j.contains("builtin")) {
    const std::string name = j["builtin"].get<std::string>();
    if (name == "lin") return make_lin_scm();
    if (name == "nlm") return make_nlm_scm();
    if (name == "example1") return make_example1_scm();
    const double n_constant = j.value("n", 2.0);
    if (name == "example2a") return make_example2_scm(false, n_constant);
    if (name == "example2b") return make_example2_scm(true, n_constant);
    throw ConfigError("unknown builtin scm: " + name);
  }
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    const TabularData data = read_csv(f.at("csv").get<std::string>());
    Dag dag;
    dag.parents = f.at("dag").get<std::vector<std::vector<int>>>();
    dag.node_count = static_cast<int>(dag.parents.size());
    return fit_linear_anm(data, dag, f.at("sensitive").get<std::vector<int>>());
  }
  throw ConfigError("scm config needs \"builtin\" or \"fit\"");
}

}  // namespace cfm
