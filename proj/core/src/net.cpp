#include "cfm/net.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm::nn {

namespace {

constexpr double kPreluInit = 0.25;

void check_widths(const std::vector<int>& widths) {
  if (widths.size() < 2) throw ShapeMismatchError("network needs at least one layer");
  for (int w : widths) {
    if (w < 1) throw ShapeMismatchError("layer widths must be positive");
  }
}

void check_cache(const FeedForwardNet& net, const ForwardCache& cache) {
  const auto layers = static_cast<std::size_t>(net.layer_count());
  if (cache.pre.size() != layers || cache.post.size() != layers ||
      cache.input.cols != net.input_dim()) {
    throw StaleCacheError("forward cache does not match network");
  }
  for (int l = 0; l < net.layer_count(); ++l) {
    if (cache.pre[l].cols != net.widths[l + 1] || cache.pre[l].rows != cache.input.rows) {
      throw StaleCacheError("forward cache does not match network");
    }
  }
}

}  // namespace

FeedForwardNet FeedForwardNet::init(const std::vector<int>& widths, Rng& rng) {
  check_widths(widths);
  FeedForwardNet net;
  net.widths = widths;
  const int layers = static_cast<int>(widths.size()) - 1;
  net.weights.reserve(layers);
  net.biases.reserve(layers);
  for (int l = 0; l < layers; ++l) {
    const int fan_in = widths[l];
    const int fan_out = widths[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (auto& x : w.data) x = rng.uniform(-bound, bound);
    net.weights.push_back(std::move(w));
    net.biases.emplace_back(fan_out, 0.0);
  }
  net.prelu_slopes.assign(layers > 0 ? layers - 1 : 0, kPreluInit);
  return net;
}

std::size_t FeedForwardNet::param_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.data.size();
  for (const auto& b : biases) n += b.size();
  n += prelu_slopes.size();
  return n;
}

std::vector<double> FeedForwardNet::flat_params() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (const auto& w : weights) out.insert(out.end(), w.data.begin(), w.data.end());
  for (const auto& b : biases) out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), prelu_slopes.begin(), prelu_slopes.end());
  return out;
}

void FeedForwardNet::set_flat_params(const std::vector<double>& p) {
  if (p.size() != param_count()) throw ShapeMismatchError("flat param size mismatch");
  std::size_t k = 0;
  for (auto& w : weights) {
    for (auto& x : w.data) x = p[k++];
  }
  for (auto& b : biases) {
    for (auto& x : b) x = p[k++];
  }
  for (auto& s : prelu_slopes) s = p[k++];
}

namespace {

Matrix layer_linear(const Matrix& h, const Matrix& w, const std::vector<double>& b) {
  Matrix z = matmul_nt(h, w);
  for (int i = 0; i < z.rows; ++i) {
    double* row = z.row(i);
    for (int j = 0; j < z.cols; ++j) row[j] += b[j];
  }
  return z;
}

void prelu_inplace(Matrix& z, double slope) {
  for (auto& x : z.data) {
    if (x < 0.0) x *= slope;
  }
}

}  // namespace

Matrix forward(const FeedForwardNet& net, const Matrix& batch) {
  if (batch.cols != net.input_dim()) throw ShapeMismatchError("forward: input width mismatch");
  Matrix h = batch;
  const int layers = net.layer_count();
  for (int l = 0; l < layers; ++l) {
    Matrix z = layer_linear(h, net.weights[l], net.biases[l]);
    if (l + 1 < layers) prelu_inplace(z, net.prelu_slopes[l]);
    h = std::move(z);
  }
  return h;
}

Matrix forward(const FeedForwardNet& net, const Matrix& batch, ForwardCache& cache) {
  if (batch.cols != net.input_dim()) throw ShapeMismatchError("forward: input width mismatch");
  const int layers = net.layer_count();
  cache.input = batch;
  cache.pre.assign(layers, Matrix());
  cache.post.assign(layers, Matrix());
  const Matrix* h = &batch;
  for (int l = 0; l < layers; ++l) {
    cache.pre[l] = layer_linear(*h, net.weights[l], net.biases[l]);
    cache.post[l] = cache.pre[l];
    if (l + 1 < layers) prelu_inplace(cache.post[l], net.prelu_slopes[l]);
    h = &cache.post[l];
  }
  return cache.post.back();
}

Gradients Gradients::zeros_like(const FeedForwardNet& net, int batch_rows) {
  Gradients g;
  for (const auto& w : net.weights) g.weights.emplace_back(w.rows, w.cols);
  for (const auto& b : net.biases) g.biases.emplace_back(b.size(), 0.0);
  g.slopes.assign(net.prelu_slopes.size(), 0.0);
  g.input = Matrix(batch_rows, net.input_dim());
  return g;
}

void Gradients::add(const Gradients& other, double s) {
  for (std::size_t l = 0; l < weights.size(); ++l) add_scaled(weights[l], other.weights[l], s);
  for (std::size_t l = 0; l < biases.size(); ++l) {
    for (std::size_t j = 0; j < biases[l].size(); ++j) biases[l][j] += s * other.biases[l][j];
  }
  for (std::size_t l = 0; l < slopes.size(); ++l) slopes[l] += s * other.slopes[l];
  if (input.same_shape(other.input)) add_scaled(input, other.input, s);
}

void Gradients::scale(double s) {
  for (auto& w : weights) {
    for (auto& x : w.data) x *= s;
  }
  for (auto& b : biases) {
    for (auto& x : b) x *= s;
  }
  for (auto& x : slopes) x *= s;
  for (auto& x : input.data) x *= s;
}

std::vector<double> Gradients::flat() const {
  std::vector<double> out;
  for (const auto& w : weights) out.insert(out.end(), w.data.begin(), w.data.end());
  for (const auto& b : biases) out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), slopes.begin(), slopes.end());
  return out;
}

Gradients backward(const FeedForwardNet& net, const ForwardCache& cache,
                   const Matrix& output_grad) {
  check_cache(net, cache);
  if (output_grad.rows != cache.input.rows || output_grad.cols != net.output_dim()) {
    throw StaleCacheError("output_grad does not match cached batch");
  }

  const int layers = net.layer_count();
  Gradients g = Gradients::zeros_like(net, cache.input.rows);

  Matrix delta = output_grad;  // gradient w.r.t. post-activation of layer l
  for (int l = layers - 1; l >= 0; --l) {
    // Through the activation (output layer is linear).
    if (l + 1 < layers) {
      const double slope = net.prelu_slopes[l];
      const Matrix& z = cache.pre[l];
      double slope_grad = 0.0;
      for (std::size_t i = 0; i < delta.data.size(); ++i) {
        if (z.data[i] < 0.0) {
          slope_grad += delta.data[i] * z.data[i];
          delta.data[i] *= slope;
        }
      }
      g.slopes[l] += slope_grad;
    }
    // delta is now gradient w.r.t. pre-activation z_l.
    const Matrix& h_prev = (l == 0) ? cache.input : cache.post[l - 1];
    add_scaled(g.weights[l], matmul_tn(delta, h_prev));
    for (int i = 0; i < delta.rows; ++i) {
      const double* row = delta.row(i);
      for (int j = 0; j < delta.cols; ++j) g.biases[l][j] += row[j];
    }
    delta = matmul(delta, net.weights[l]);
  }
  g.input = std::move(delta);
  return g;
}

Matrix jvp(const FeedForwardNet& net, const ForwardCache& primal, const Matrix& dirs,
           JvpCache* cache) {
  check_cache(net, primal);
  if (dirs.rows != primal.input.rows || dirs.cols != net.input_dim()) {
    throw ShapeMismatchError("jvp: direction shape mismatch");
  }
  const int layers = net.layer_count();
  if (cache) {
    cache->dirs = dirs;
    cache->lin.assign(layers, Matrix());
    cache->tangent.assign(layers, Matrix());
  }
  Matrix t = dirs;
  for (int l = 0; l < layers; ++l) {
    Matrix s = matmul_nt(t, net.weights[l]);
    if (cache) cache->lin[l] = s;
    if (l + 1 < layers) {
      const double slope = net.prelu_slopes[l];
      const Matrix& z = primal.pre[l];
      for (std::size_t i = 0; i < s.data.size(); ++i) {
        if (z.data[i] < 0.0) s.data[i] *= slope;
      }
    }
    if (cache) cache->tangent[l] = s;
    t = std::move(s);
  }
  return t;
}

void jvp_value_backward(const FeedForwardNet& net, const ForwardCache& primal,
                        const JvpCache& jc, const std::vector<double>& c,
                        const Matrix& Gout, const Matrix& Hout, Gradients& grads) {
  check_cache(net, primal);
  const int layers = net.layer_count();
  const int batch = primal.input.rows;
  if (static_cast<int>(c.size()) != batch) {
    throw ShapeMismatchError("jvp_value_backward: weight vector size mismatch");
  }

  // Gradient w.r.t. the tangent output t_L: c_i * Gout[i,j].
  Matrix gt(Gout.rows, Gout.cols);
  for (int i = 0; i < gt.rows; ++i) {
    for (int j = 0; j < gt.cols; ++j) gt.at(i, j) = c[i] * Gout.at(i, j);
  }

  // Dependence through the primal output: d Gout / d out = Hout (elementwise
  // loss), so the extra upstream on the primal graph is c_i * t_L . Hout.
  const Matrix& tl = jc.tangent.back();
  Matrix primal_up(tl.rows, tl.cols);
  for (int i = 0; i < tl.rows; ++i) {
    for (int j = 0; j < tl.cols; ++j) {
      primal_up.at(i, j) = c[i] * tl.at(i, j) * Hout.at(i, j);
    }
  }
  Gradients through_primal = backward(net, primal, primal_up);
  grads.add(through_primal);

  // Walk the tangent chain. t_l = act'(z_l) . s_l, s_l = t_{l-1} W_l^T.
  for (int l = layers - 1; l >= 0; --l) {
    Matrix gs = gt;  // becomes gradient w.r.t. s_l
    if (l + 1 < layers) {
      const double slope = net.prelu_slopes[l];
      const Matrix& z = primal.pre[l];
      const Matrix& s = jc.lin[l];
      double slope_grad = 0.0;
      for (std::size_t i = 0; i < gs.data.size(); ++i) {
        if (z.data[i] < 0.0) {
          slope_grad += gs.data[i] * s.data[i];
          gs.data[i] *= slope;
        }
      }
      grads.slopes[l] += slope_grad;
    }
    const Matrix& t_prev = (l == 0) ? jc.dirs : jc.tangent[l - 1];
    add_scaled(grads.weights[l], matmul_tn(gs, t_prev));
    gt = matmul(gs, net.weights[l]);
  }
}

AdamState AdamState::init(std::size_t param_count, double lr) {
  AdamState s;
  s.lr = lr;
  s.m.assign(param_count, 0.0);
  s.v.assign(param_count, 0.0);
  return s;
}

void adam_step(AdamState& state, std::vector<double>& params,
               const std::vector<double>& grads) {
  if (params.size() != state.m.size() || grads.size() != state.m.size()) {
    throw ShapeMismatchError("adam_step: size mismatch");
  }
  state.step += 1;
  const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / b1t;
    const double vhat = state.v[i] / b2t;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

RademacherBound rademacher_bound(const FeedForwardNet& net, long sample_count,
                                 double input_bound,
                                 const std::vector<double>& lipschitz) {
  if (sample_count < 1) throw ShapeMismatchError("rademacher_bound: sample_count >= 1");
  if (input_bound <= 0.0) throw ShapeMismatchError("rademacher_bound: input bound > 0");
  if (lipschitz.size() != net.weights.size()) {
    throw ShapeMismatchError("rademacher_bound: one Lipschitz constant per layer");
  }

  RademacherBound out;
  double prod = 1.0;
  double sum = 0.0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const double spec = spectral_norm(net.weights[l]);
    if (spec <= 0.0) {
      out.zero_weight_layer = true;
      out.value = 0.0;
      return out;
    }
    prod *= lipschitz[l] * spec;
    sum += std::pow(norm_2_1(net.weights[l]) / spec, 2.0 / 3.0);
  }
  out.value = input_bound * input_bound / std::sqrt(static_cast<double>(sample_count)) *
              prod * prod * std::pow(sum, 1.5);
  return out;
}

std::string net_to_json(const FeedForwardNet& net) {
  nlohmann::json j;
  j["version"] = "cfm-net-v1";
  j["widths"] = net.widths;
  auto& jw = j["weights"] = nlohmann::json::array();
  for (const auto& w : net.weights) jw.push_back(w.data);
  auto& jb = j["biases"] = nlohmann::json::array();
  for (const auto& b : net.biases) jb.push_back(b);
  j["prelu_slopes"] = net.prelu_slopes;
  return j.dump(2);
}

FeedForwardNet net_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("version", "") != std::string("cfm-net-v1")) {
    throw ConfigError("unsupported checkpoint version");
  }
  FeedForwardNet net;
  net.widths = j.at("widths").get<std::vector<int>>();
  check_widths(net.widths);
  const int layers = static_cast<int>(net.widths.size()) - 1;
  const auto& jw = j.at("weights");
  const auto& jb = j.at("biases");
  if (static_cast<int>(jw.size()) != layers || static_cast<int>(jb.size()) != layers) {
    throw ConfigError("checkpoint layer count mismatch");
  }
  for (int l = 0; l < layers; ++l) {
    Matrix w(net.widths[l + 1], net.widths[l], jw[l].get<std::vector<double>>());
    net.weights.push_back(std::move(w));
    auto b = jb[l].get<std::vector<double>>();
    if (static_cast<int>(b.size()) != net.widths[l + 1]) {
      throw ConfigError("checkpoint bias size mismatch");
    }
    net.biases.push_back(std::move(b));
  }
  net.prelu_slopes = j.at("prelu_slopes").get<std::vector<double>>();
  if (net.prelu_slopes.size() != static_cast<std::size_t>(layers > 0 ? layers - 1 : 0)) {
    throw ConfigError("checkpoint slope count mismatch");
  }
  return net;
}

void save_net(const FeedForwardNet& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot open checkpoint for writing: " + path);
  out << net_to_json(net) << "\n";
}

FeedForwardNet load_net(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return net_from_json(ss.str());
}

}  // namespace cfm::nn
