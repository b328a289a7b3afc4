#pragma once

#include <string>
#include <vector>

#include "cfm/matrix.hpp"

namespace cfm {
class Rng;
}

namespace cfm::nn {

/// Fully connected network: hidden layers use PReLU with one learnable slope
/// per layer, the output layer is linear. Layer l maps width[l] -> width[l+1]
/// as x W_l^T + b_l.
struct FeedForwardNet {
  std::vector<int> widths;                  // d0 .. dL
  std::vector<Matrix> weights;              // weights[l] is d_{l+1} x d_l
  std::vector<std::vector<double>> biases;  // biases[l] has d_{l+1} entries
  std::vector<double> prelu_slopes;         // one per hidden layer (layers 0..L-2)

  int layer_count() const { return static_cast<int>(weights.size()); }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }

  /// Uniform init in +/- sqrt(6/(fan_in+fan_out)); biases 0; slopes 0.25.
  static FeedForwardNet init(const std::vector<int>& widths, Rng& rng);

  std::vector<double> flat_params() const;
  void set_flat_params(const std::vector<double>& p);
  std::size_t param_count() const;
};

/// Per-layer pre/post-activation values captured by a training forward pass.
struct ForwardCache {
  Matrix input;
  std::vector<Matrix> pre;   // z_l = h_{l-1} W_l^T + b_l
  std::vector<Matrix> post;  // h_l = act_l(z_l); back() is the network output
};

/// Inference forward pass (no cache).
Matrix forward(const FeedForwardNet& net, const Matrix& batch);
/// Training forward pass; fills `cache` for a later backward.
Matrix forward(const FeedForwardNet& net, const Matrix& batch, ForwardCache& cache);

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
  std::vector<double> slopes;
  Matrix input;  // d(loss)/d(batch input)

  static Gradients zeros_like(const FeedForwardNet& net, int batch_rows);
  void add(const Gradients& other, double scale = 1.0);
  void scale(double s);
  std::vector<double> flat() const;  // same layout as FeedForwardNet::flat_params
};

/// Backpropagate `output_grad` (batch x d_L) through the cached pass.
/// Throws StaleCacheError when the cache does not match the network shape.
Gradients backward(const FeedForwardNet& net, const ForwardCache& cache,
                   const Matrix& output_grad);

/// Tangent (forward-mode) state for directional derivatives.
struct JvpCache {
  Matrix dirs;                 // batch x d0, one direction per sample
  std::vector<Matrix> lin;     // s_l = t_{l-1} W_l^T
  std::vector<Matrix> tangent; // t_l = act'_l(z_l) . s_l (output layer: t_L = s_L)
};

/// Directional derivative of the network along per-sample input directions:
/// returns t_L with t_L[i,:] = J_net(x_i) dirs[i,:]. Requires the primal cache.
Matrix jvp(const FeedForwardNet& net, const ForwardCache& primal, const Matrix& dirs,
           JvpCache* cache = nullptr);

/// Parameter gradient of S = sum_i c_i * sum_j Gout[i,j] * t_L[i,j], i.e. of a
/// weighted batch of loss-gradient/direction inner products  c_i * a_i^T
/// grad_x loss(net(x_i)).  Needs the elementwise loss derivative Gout and
/// second derivative Hout at the network output because the loss gradient
/// depends on parameters both through the tangent chain and through the primal
/// output. PReLU second derivatives vanish almost everywhere, so hidden-layer
/// curvature contributes only through the learnable slopes.
/// Accumulates into `grads` (input grad left untouched).
void jvp_value_backward(const FeedForwardNet& net, const ForwardCache& primal,
                        const JvpCache& jc, const std::vector<double>& c,
                        const Matrix& Gout, const Matrix& Hout, Gradients& grads);

// ---- optimizer ----

/// Adam over the flattened parameter vector.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<double> m;
  std::vector<double> v;

  static AdamState init(std::size_t param_count, double lr = 1e-3);
};

/// One bias-corrected Adam update; params and grads must match the state size.
void adam_step(AdamState& state, std::vector<double>& params,
               const std::vector<double>& grads);

// ---- capacity diagnostic ----

struct RademacherBound {
  double value = 0.0;
  bool zero_weight_layer = false;  // a layer had zero spectral norm; bound reported as 0
};

/// Norm-based complexity bound of the network family:
///   (1/sqrt(n)) * B^2 * (prod_i lambda_i ||W_i||)^2
///   * (sum_i (||W_i||_{2,1} / ||W_i||)^{2/3})^{3/2}
RademacherBound rademacher_bound(const FeedForwardNet& net, long sample_count,
                                 double input_bound,
                                 const std::vector<double>& lipschitz);

// ---- checkpoint io ----

/// JSON checkpoint, schema "cfm-net-v1".
void save_net(const FeedForwardNet& net, const std::string& path);
FeedForwardNet load_net(const std::string& path);
std::string net_to_json(const FeedForwardNet& net);
FeedForwardNet net_from_json(const std::string& text);

}  // namespace cfm::nn
