#include "dsn/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "dsn/error.hpp"
#include "dsn/text_io.hpp"

namespace dsn::nn {

namespace {

std::uint64_t fresh_revision() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void softmax_rows(Matrix& m) noexcept {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

Matrix activate(const Matrix& z, Activation act) {
  Matrix a = z;
  switch (act) {
    case Activation::kSigmoid:
      for (double& v : a.values()) v = sigmoid(v);
      break;
    case Activation::kRelu:
      for (double& v : a.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::kSoftmax:
      if (a.cols() > 0) softmax_rows(a);
      break;
    case Activation::kLinear:
      break;
  }
  return a;
}

// z_i = b + sum_k x_ik * W^T_k, accumulated in k order for every row.
Matrix affine(const Matrix& x, const DenseLayer& layer) {
  const std::size_t in = layer.in_dim();
  const std::size_t out = layer.out_dim();
  const Matrix wt = layer.weights.transposed();
  Matrix z(x.rows(), out);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* zi = z.row(i).data();
    const double* xi = x.row(i).data();
    std::copy(layer.bias.begin(), layer.bias.end(), zi);
    for (std::size_t k = 0; k < in; ++k) {
      const double xik = xi[k];
      const double* wk = wt.row(k).data();
      for (std::size_t j = 0; j < out; ++j) zi[j] += xik * wk[j];
    }
  }
  return z;
}

// dZ = dA * act'(Z) for elementwise activations.
Matrix activation_backward(const Matrix& grad_post, const Matrix& pre, const Matrix& post,
                           Activation act) {
  Matrix dz = grad_post;
  auto g = dz.values();
  auto z = pre.values();
  auto a = post.values();
  switch (act) {
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= a[i] * (1.0 - a[i]);
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(z[i] > 0.0)) g[i] = 0.0;
      }
      break;
    case Activation::kSoftmax:
      for (std::size_t r = 0; r < dz.rows(); ++r) {
        auto gr = dz.row(r);
        auto pr = post.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < gr.size(); ++c) dot += gr[c] * pr[c];
        for (std::size_t c = 0; c < gr.size(); ++c) gr[c] = pr[c] * (gr[c] - dot);
      }
      break;
    case Activation::kLinear:
      break;
  }
  return dz;
}

void check_cache(const Mlp& net, const ForwardCache& cache) {
  if (cache.revision != net.revision() || cache.num_layers != net.num_layers() ||
      cache.pre.size() != net.num_layers() || cache.post.size() != net.num_layers()) {
    throw ContractError("forward cache does not belong to this network state");
  }
}

BackwardResult backward_impl(const Mlp& net, const ForwardCache& cache, Matrix dz,
                             std::size_t top) {
  BackwardResult res;
  res.grads = Gradients::zeros_like(net);
  const auto& layers = net.layers();
  for (std::size_t k = top + 1; k-- > 0;) {
    const DenseLayer& layer = layers[k];
    const Matrix& a_prev = k == 0 ? cache.input : cache.post[k - 1];
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    LayerGradient& lg = res.grads.layers[k];
    Matrix dprev(a_prev.rows(), in);
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      const double* gi = dz.row(i).data();
      const double* ai = a_prev.row(i).data();
      double* di = dprev.row(i).data();
      for (std::size_t j = 0; j < out; ++j) {
        const double g = gi[j];
        lg.bias[j] += g;
        double* wgj = lg.weights.row(j).data();
        const double* wj = layer.weights.row(j).data();
        for (std::size_t c = 0; c < in; ++c) {
          wgj[c] += g * ai[c];
          di[c] += g * wj[c];
        }
      }
    }
    if (k == 0) {
      res.input_grad = std::move(dprev);
    } else {
      const DenseLayer& below = layers[k - 1];
      dz = activation_backward(dprev, cache.pre[k - 1], cache.post[k - 1], below.activation);
    }
  }
  return res;
}

}  // namespace

std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kRelu: return "relu";
    case Activation::kSoftmax: return "softmax";
    case Activation::kLinear: return "linear";
  }
  return "linear";
}

Activation parse_activation(std::string_view name) {
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "relu") return Activation::kRelu;
  if (name == "softmax") return Activation::kSoftmax;
  if (name == "linear") return Activation::kLinear;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)), revision_(fresh_revision()) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const DenseLayer& l = layers_[k];
    if (l.weights.rows() == 0 || l.weights.cols() == 0) {
      throw ConfigError("layer " + std::to_string(k) + " has an empty weight matrix");
    }
    if (l.bias.size() != l.out_dim()) {
      throw ConfigError("layer " + std::to_string(k) + " bias length does not match out_dim");
    }
    if (k > 0 && layers_[k - 1].out_dim() != l.in_dim()) {
      throw ConfigError("layer " + std::to_string(k) + " in_dim " + std::to_string(l.in_dim()) +
                        " does not chain with previous out_dim " +
                        std::to_string(layers_[k - 1].out_dim()));
    }
    if (l.activation == Activation::kSoftmax && k + 1 != layers_.size()) {
      throw ConfigError("softmax is only allowed on the final layer");
    }
  }
}

std::vector<DenseLayer>& Mlp::mutable_layers() {
  revision_ = fresh_revision();
  return layers_;
}

std::size_t Mlp::in_dim() const {
  if (layers_.empty()) throw ContractError("empty network has no input dimension");
  return layers_.front().in_dim();
}

std::size_t Mlp::out_dim() const {
  if (layers_.empty()) throw ContractError("empty network has no output dimension");
  return layers_.back().out_dim();
}

std::size_t Mlp::num_params() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

Activation Mlp::output_activation() const {
  if (layers_.empty()) throw ContractError("empty network has no output activation");
  return layers_.back().activation;
}

Gradients Gradients::zeros_like(const Mlp& net) {
  Gradients g;
  g.layers.reserve(net.num_layers());
  for (const auto& l : net.layers()) {
    g.layers.push_back({Matrix(l.out_dim(), l.in_dim()), std::vector<double>(l.out_dim(), 0.0)});
  }
  return g;
}

bool Gradients::all_finite() const noexcept {
  for (const auto& l : layers) {
    if (!l.weights.all_finite()) return false;
    for (double b : l.bias) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

void Gradients::add_scaled(const Gradients& other, double factor) {
  if (other.layers.size() != layers.size()) throw ShapeError("gradient layer count mismatch");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    dsn::add_scaled(layers[k].weights, other.layers[k].weights, factor);
    auto& b = layers[k].bias;
    const auto& ob = other.layers[k].bias;
    if (b.size() != ob.size()) throw ShapeError("gradient bias length mismatch");
    for (std::size_t j = 0; j < b.size(); ++j) b[j] += factor * ob[j];
  }
}

void Gradients::scale(double factor) {
  for (auto& l : layers) {
    for (double& v : l.weights.values()) v *= factor;
    for (double& v : l.bias) v *= factor;
  }
}

Mlp init_mlp(std::span<const LayerSpec> spec, Rng& rng) {
  if (spec.empty()) throw ConfigError("network spec is empty");
  std::vector<DenseLayer> layers;
  layers.reserve(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const LayerSpec& s = spec[k];
    if (s.in_dim == 0 || s.out_dim == 0) {
      throw ConfigError("layer " + std::to_string(k) + " has a zero dimension");
    }
    if (k > 0 && spec[k - 1].out_dim != s.in_dim) {
      throw ConfigError("layer spec " + std::to_string(k) + " does not chain: in_dim " +
                        std::to_string(s.in_dim) + " after out_dim " +
                        std::to_string(spec[k - 1].out_dim));
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(s.in_dim + s.out_dim));
    DenseLayer layer{Matrix(s.out_dim, s.in_dim), std::vector<double>(s.out_dim, 0.0),
                     s.activation};
    for (double& w : layer.weights.values()) w = (2.0 * rng.uniform() - 1.0) * bound;
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

ForwardResult forward(const Mlp& net, const Matrix& batch) {
  if (net.empty()) throw ContractError("forward through an empty network");
  if (batch.cols() != net.in_dim()) {
    throw ShapeError("forward: batch has " + std::to_string(batch.cols()) +
                     " columns, network expects " + std::to_string(net.in_dim()));
  }
  ForwardResult res;
  res.cache.input = batch;
  res.cache.revision = net.revision();
  res.cache.num_layers = net.num_layers();
  res.cache.pre.reserve(net.num_layers());
  res.cache.post.reserve(net.num_layers());
  const Matrix* a = &batch;
  for (const auto& layer : net.layers()) {
    res.cache.pre.push_back(affine(*a, layer));
    res.cache.post.push_back(activate(res.cache.pre.back(), layer.activation));
    a = &res.cache.post.back();
  }
  res.output = res.cache.post.back();
  return res;
}

Matrix predict(const Mlp& net, const Matrix& batch) {
  if (net.empty()) throw ContractError("forward through an empty network");
  if (batch.cols() != net.in_dim()) {
    throw ShapeError("predict: batch has " + std::to_string(batch.cols()) +
                     " columns, network expects " + std::to_string(net.in_dim()));
  }
  Matrix a = batch;
  for (const auto& layer : net.layers()) a = activate(affine(a, layer), layer.activation);
  return a;
}

BackwardResult backward(const Mlp& net, const ForwardCache& cache, const Matrix& upstream) {
  check_cache(net, cache);
  const Matrix& out = cache.post.back();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols()) {
    throw ShapeError("backward: upstream shape does not match network output");
  }
  const std::size_t top = net.num_layers() - 1;
  Matrix dz = activation_backward(upstream, cache.pre[top], cache.post[top],
                                  net.layers()[top].activation);
  return backward_impl(net, cache, std::move(dz), top);
}

BackwardResult backward_from_logits(const Mlp& net, const ForwardCache& cache,
                                    const Matrix& logit_grad) {
  check_cache(net, cache);
  const Matrix& out = cache.pre.back();
  if (logit_grad.rows() != out.rows() || logit_grad.cols() != out.cols()) {
    throw ShapeError("backward: logit gradient shape does not match network output");
  }
  return backward_impl(net, cache, logit_grad, net.num_layers() - 1);
}

CrossEntropyResult cross_entropy_loss(const Matrix& posteriors, std::span<const int> labels) {
  if (labels.size() != posteriors.rows()) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(posteriors.rows()) + " rows");
  }
  CrossEntropyResult res;
  res.logit_grad = posteriors;
  if (posteriors.rows() == 0) return res;
  const double inv_rows = 1.0 / static_cast<double>(posteriors.rows());
  const auto classes = static_cast<int>(posteriors.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < posteriors.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || y >= classes) {
      throw DataError("label " + std::to_string(y) + " out of range [0, " +
                      std::to_string(classes) + ")");
    }
    double p = posteriors(r, static_cast<std::size_t>(y));
    if (p < kLogFloor) {
      p = kLogFloor;
      ++res.clamped;
    }
    total -= std::log(p);
    auto g = res.logit_grad.row(r);
    g[static_cast<std::size_t>(y)] -= 1.0;
    for (double& v : g) v *= inv_rows;
  }
  res.loss = total * inv_rows;
  return res;
}

MseResult mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("mse_loss: prediction and target shapes differ");
  }
  MseResult res;
  res.grad = Matrix(pred.rows(), pred.cols());
  if (pred.rows() == 0) return res;
  const double inv_rows = 1.0 / static_cast<double>(pred.rows());
  double total = 0.0;
  auto p = pred.values();
  auto t = target.values();
  auto g = res.grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    total += d * d;
    g[i] = 2.0 * d * inv_rows;
  }
  res.loss = total * inv_rows;
  return res;
}

void sgd_update(Mlp& net, const Gradients& grads, double mu) {
  if (grads.layers.size() != net.num_layers()) throw ShapeError("sgd_update: layer count mismatch");
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const auto& l = net.layers()[k];
    const auto& g = grads.layers[k];
    if (g.weights.rows() != l.weights.rows() || g.weights.cols() != l.weights.cols() ||
        g.bias.size() != l.bias.size()) {
      throw ShapeError("sgd_update: gradient shape mismatch at layer " + std::to_string(k));
    }
  }
  if (!grads.all_finite()) throw DivergenceError("sgd_update: non-finite gradient");
  auto& layers = net.mutable_layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto w = layers[k].weights.values();
    auto gw = grads.layers[k].weights.values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= mu * gw[i];
    auto& b = layers[k].bias;
    const auto& gb = grads.layers[k].bias;
    for (std::size_t j = 0; j < b.size(); ++j) b[j] -= mu * gb[j];
  }
}

std::vector<double> flatten(const Mlp& net) {
  std::vector<double> p;
  p.reserve(net.num_params());
  for (const auto& l : net.layers()) {
    p.insert(p.end(), l.weights.data().begin(), l.weights.data().end());
    p.insert(p.end(), l.bias.begin(), l.bias.end());
  }
  return p;
}

void unflatten(Mlp& net, std::span<const double> params) {
  if (params.size() != net.num_params()) throw ShapeError("unflatten: parameter count mismatch");
  std::size_t pos = 0;
  for (auto& l : net.mutable_layers()) {
    for (double& w : l.weights.values()) w = params[pos++];
    for (double& b : l.bias) b = params[pos++];
  }
}

std::vector<double> flatten(const Gradients& grads) {
  std::vector<double> p;
  for (const auto& l : grads.layers) {
    p.insert(p.end(), l.weights.data().begin(), l.weights.data().end());
    p.insert(p.end(), l.bias.begin(), l.bias.end());
  }
  return p;
}

FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& loss,
                                   std::vector<double> params, std::span<const double> analytic,
                                   double h, double tol) {
  if (analytic.size() != params.size()) {
    throw ShapeError("finite_diff_check: analytic gradient length mismatch");
  }
  FiniteDiffReport rep;
  rep.tolerance = tol;
  rep.numeric.resize(params.size());
  rep.rel_errors.resize(params.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss(params);
    params[i] = saved - h;
    const double down = loss(params);
    params[i] = saved;
    const double f = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-8});
    rep.numeric[i] = f;
    rep.rel_errors[i] = rel;
    sum += rel;
    if (rel > rep.max_rel_error || i == 0) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
    }
  }
  rep.mean_rel_error = params.empty() ? 0.0 : sum / static_cast<double>(params.size());
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

FiniteDiffReport finite_diff_check(const std::function<double(const Mlp&)>& loss, const Mlp& net,
                                   const Gradients& analytic, double h, double tol) {
  Mlp probe = net;
  const auto flat_grad = flatten(analytic);
  return finite_diff_check(
      [&](std::span<const double> p) {
        unflatten(probe, p);
        return loss(probe);
      },
      flatten(net), flat_grad, h, tol);
}

void write_mlp(std::ostream& out, const Mlp& net) {
  std::string buf = "dsn-mlp v1\n";
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const auto& l = net.layers()[k];
    buf += "layer " + std::to_string(k) + " " + std::to_string(l.in_dim()) + " " +
           std::to_string(l.out_dim()) + " " + std::string(to_string(l.activation)) + "\n";
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      auto row = l.weights.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c > 0) buf += ' ';
        append_double(buf, row[c]);
      }
      buf += '\n';
    }
    for (std::size_t j = 0; j < l.bias.size(); ++j) {
      if (j > 0) buf += ' ';
      append_double(buf, l.bias[j]);
    }
    buf += '\n';
  }
  out << buf;
}

namespace {

std::vector<double> read_row(LineReader& in, std::size_t expected, const char* what) {
  const std::string line = in.expect(what);
  const auto fields = split_ws(line);
  if (fields.size() != expected) {
    in.fail(std::string(what) + ": expected " + std::to_string(expected) + " values, got " +
            std::to_string(fields.size()));
  }
  std::vector<double> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    if (!parse_double(fields[i], values[i]) || !std::isfinite(values[i])) {
      in.fail(std::string(what) + ": bad number '" + std::string(fields[i]) + "'");
    }
  }
  return values;
}

}  // namespace

Mlp read_mlp(LineReader& in) {
  const std::string header = std::string(trim(in.expect("dsn-mlp header")));
  if (header != "dsn-mlp v1") in.fail("expected 'dsn-mlp v1' header, got '" + header + "'");
  std::vector<DenseLayer> layers;
  std::string line;
  while (in.next(line)) {
    const auto f = split_ws(line);
    if (f.empty() || f[0] != "layer") {
      in.unread();
      break;
    }
    std::size_t k = 0, in_dim = 0, out_dim = 0;
    if (f.size() != 5 || !parse_size(f[1], k) || !parse_size(f[2], in_dim) ||
        !parse_size(f[3], out_dim)) {
      in.fail("malformed layer line '" + line + "'");
    }
    if (k != layers.size()) in.fail("layer index " + std::to_string(k) + " out of sequence");
    if (in_dim == 0 || out_dim == 0) in.fail("layer with zero dimension");
    Activation act;
    try {
      act = parse_activation(f[4]);
    } catch (const ConfigError& e) {
      in.fail(e.what());
    }
    std::vector<double> w;
    w.reserve(in_dim * out_dim);
    for (std::size_t r = 0; r < out_dim; ++r) {
      auto row = read_row(in, in_dim, "weight row");
      w.insert(w.end(), row.begin(), row.end());
    }
    auto bias = read_row(in, out_dim, "bias row");
    layers.push_back({Matrix(out_dim, in_dim, std::move(w)), std::move(bias), act});
  }
  if (layers.empty()) in.fail("network has no layers");
  try {
    return Mlp(std::move(layers));
  } catch (const ConfigError& e) {
    in.fail(e.what());
  }
}

Mlp read_mlp(std::istream& in) {
  LineReader reader(in);
  return read_mlp(reader);
}

void save_mlp(const std::string& path, const Mlp& net) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_mlp(out, net);
  if (!out) throw DataError("failed writing '" + path + "'");
}

Mlp load_mlp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_mlp(in);
}

}  // namespace dsn::nn
