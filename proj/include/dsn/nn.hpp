#pragma once

// Dense feed-forward networks with exact reverse-mode gradients.
//
// All kernels accumulate in a fixed order that depends only on the layer
// shape, never on the number of rows, so a row's output is bitwise identical
// whether it is evaluated alone or inside any batch.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsn/matrix.hpp"
#include "dsn/rng.hpp"

namespace dsn {

class LineReader;

namespace nn {

enum class Activation { kSigmoid, kRelu, kSoftmax, kLinear };

std::string_view to_string(Activation a) noexcept;
/// Throws ConfigError on an unknown name.
Activation parse_activation(std::string_view name);

struct LayerSpec {
  std::size_t in_dim;
  std::size_t out_dim;
  Activation activation;
};

struct DenseLayer {
  Matrix weights;  // out_dim x in_dim
  std::vector<double> bias;
  Activation activation = Activation::kLinear;

  std::size_t in_dim() const noexcept { return weights.cols(); }
  std::size_t out_dim() const noexcept { return weights.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Ordered stack of dense layers. Softmax may only appear last.
///
/// Every mutation through `mutable_layers()` gives the network a fresh
/// revision number; forward caches remember the revision they were built
/// against so that backward can reject stale caches.
class Mlp {
 public:
  Mlp() = default;
  /// Throws ConfigError when adjacent layers do not chain or softmax is not last.
  explicit Mlp(std::vector<DenseLayer> layers);

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers();

  bool empty() const noexcept { return layers_.empty(); }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::size_t num_params() const noexcept;
  Activation output_activation() const;

  std::uint64_t revision() const noexcept { return revision_; }

  /// Equality of parameters and activations; revisions are ignored.
  friend bool operator==(const Mlp& a, const Mlp& b) { return a.layers_ == b.layers_; }

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t revision_ = 0;
};

struct ForwardCache {
  Matrix input;
  std::vector<Matrix> pre;   // z_k = a_{k-1} W_k^T + b_k
  std::vector<Matrix> post;  // a_k = act(z_k)
  std::uint64_t revision = 0;
  std::size_t num_layers = 0;
};

struct ForwardResult {
  Matrix output;
  ForwardCache cache;
};

struct LayerGradient {
  Matrix weights;
  std::vector<double> bias;
};

/// Parameter gradients shape-matched to one Mlp.
struct Gradients {
  std::vector<LayerGradient> layers;

  static Gradients zeros_like(const Mlp& net);
  bool all_finite() const noexcept;
  /// this += scale * other.
  void add_scaled(const Gradients& other, double scale);
  void scale(double factor);
};

struct BackwardResult {
  Gradients grads;
  Matrix input_grad;
};

/// Weights uniform in [-s, s], s = sqrt(6 / (in + out)); biases zero. Layers
/// draw in order, each weight matrix row by row.
Mlp init_mlp(std::span<const LayerSpec> spec, Rng& rng);

ForwardResult forward(const Mlp& net, const Matrix& batch);
/// Forward pass without keeping a cache.
Matrix predict(const Mlp& net, const Matrix& batch);

/// Backpropagate `upstream` = dL/d(output). A final softmax is handled through
/// its full Jacobian.
BackwardResult backward(const Mlp& net, const ForwardCache& cache, const Matrix& upstream);
/// Backpropagate a gradient taken w.r.t. the final layer's pre-activation
/// (e.g. the fused softmax + cross-entropy gradient).
BackwardResult backward_from_logits(const Mlp& net, const ForwardCache& cache,
                                    const Matrix& logit_grad);

struct CrossEntropyResult {
  double loss = 0.0;
  Matrix logit_grad;  // (p - onehot) / rows
  std::size_t clamped = 0;  // rows whose p(label) fell below the log floor
};

inline constexpr double kLogFloor = 1e-30;

/// Mean over rows of -log p(label). Throws DataError for out-of-range labels.
CrossEntropyResult cross_entropy_loss(const Matrix& posteriors, std::span<const int> labels);

struct MseResult {
  double loss = 0.0;
  Matrix grad;
};

/// Mean over rows of ||pred - target||^2; grad = 2 (pred - target) / rows.
MseResult mse_loss(const Matrix& pred, const Matrix& target);

/// In place: theta -= mu * g. Throws DivergenceError when any gradient entry is
/// not finite (the network is left untouched in that case).
void sgd_update(Mlp& net, const Gradients& grads, double mu);

// Flat parameter views: per layer, weights row-major then bias.
std::vector<double> flatten(const Mlp& net);
void unflatten(Mlp& net, std::span<const double> params);
std::vector<double> flatten(const Gradients& grads);

struct FiniteDiffReport {
  std::vector<double> numeric;
  std::vector<double> rel_errors;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Central differences (L(p+h) - L(p-h)) / 2h against `analytic`, per entry.
/// Relative error is |a - f| / max(|a|, |f|, 1e-8).
FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& loss,
                                   std::vector<double> params, std::span<const double> analytic,
                                   double h, double tol);
FiniteDiffReport finite_diff_check(const std::function<double(const Mlp&)>& loss, const Mlp& net,
                                   const Gradients& analytic, double h, double tol);

// Text format "dsn-mlp v1": 17 significant digits, round-trip exact.
void write_mlp(std::ostream& out, const Mlp& net);
Mlp read_mlp(LineReader& in);
Mlp read_mlp(std::istream& in);
void save_mlp(const std::string& path, const Mlp& net);
Mlp load_mlp(const std::string& path);

}  // namespace nn
}  // namespace dsn
