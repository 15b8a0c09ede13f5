#include "dsn/model.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "dsn/error.hpp"
#include "dsn/grl.hpp"
#include "dsn/text_io.hpp"

namespace dsn::model {

namespace {

using nn::Activation;
using nn::Gradients;
using nn::Mlp;

void require_private(const DsnModel& model, const char* op) {
  if (!model.has_private() || !model.m_p_t || !model.m_r) {
    throw ContractError(std::string(op) + " needs private extractors and a reconstructor");
  }
}

void require_rows(const Matrix& m, const char* what) {
  if (m.rows() == 0) throw ContractError(std::string(what) + " batch is empty");
}

std::vector<int> domain_labels(std::size_t source_rows, std::size_t target_rows) {
  std::vector<int> labels(source_rows, domain_index(Domain::kSource));
  labels.resize(source_rows + target_rows, domain_index(Domain::kTarget));
  return labels;
}

std::vector<nn::LayerSpec> chain(std::size_t in, const std::vector<std::size_t>& hidden,
                                 Activation hidden_act, std::size_t out, Activation out_act) {
  std::vector<nn::LayerSpec> spec;
  std::size_t prev = in;
  for (std::size_t h : hidden) {
    spec.push_back({prev, h, hidden_act});
    prev = h;
  }
  spec.push_back({prev, out, out_act});
  return spec;
}

// Adds `src` into rows [offset, offset + src.rows()) of `dst`.
void add_rows(Matrix& dst, const Matrix& src, std::size_t offset, double scale = 1.0) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto d = dst.row(offset + r);
    auto s = src.row(r);
    for (std::size_t c = 0; c < s.size(); ++c) d[c] += scale * s[c];
  }
}

double domain_accuracy(const Matrix& posteriors, std::span<const int> labels) {
  if (posteriors.rows() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < posteriors.rows(); ++r) {
    const int predicted = posteriors(r, 1) > posteriors(r, 0) ? 1 : 0;
    if (predicted == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(posteriors.rows());
}

struct ReconPass {
  double value = 0.0;
  Gradients m_r;
  Matrix input_grad;  // rows: source then target; cols: shared then private
};

// Reconstruction of stacked [shared | private] rows (source rows first).
ReconPass recon_pass(const Mlp& m_r, const Matrix& input, const Matrix& source_x,
                     const Matrix& target_x) {
  const std::size_t bs = source_x.rows();
  const std::size_t bt = target_x.rows();
  auto fwd = nn::forward(m_r, input);
  auto src = nn::mse_loss(fwd.output.slice_rows(0, bs), source_x);
  auto tgt = nn::mse_loss(fwd.output.slice_rows(bs, bt), target_x);
  auto back = nn::backward(m_r, fwd.cache, vstack(src.grad, tgt.grad));
  return {src.loss + tgt.loss, std::move(back.grads), std::move(back.input_grad)};
}

}  // namespace

void Coefficients::validate() const {
  grl::GrlConfig{alpha}.validate();
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("beta must be finite and >= 0");
  if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("gamma must be finite and >= 0");
}

void DsnModel::validate() const {
  coef.validate();
  if (m_c.empty() || m_y.empty() || m_d.empty()) throw ConfigError("model is missing a network");
  const std::size_t k = m_c.out_dim();
  if (m_y.in_dim() != k) throw ConfigError("m_y input dim must equal shared dim");
  if (m_d.in_dim() != k) throw ConfigError("m_d input dim must equal shared dim");
  if (m_y.output_activation() != Activation::kSoftmax) throw ConfigError("m_y must end in softmax");
  if (m_d.out_dim() != 2 || m_d.output_activation() != Activation::kSoftmax) {
    throw ConfigError("m_d must end in a 2-way softmax");
  }
  if (m_c.output_activation() == Activation::kSoftmax) {
    throw ConfigError("m_c output must not be a softmax");
  }
  if (n_h != m_c.num_layers()) throw ConfigError("n_h does not match m_c layer count");
  const bool any = m_p_s || m_p_t || m_r;
  if (!any) return;
  if (!(m_p_s && m_p_t && m_r)) throw ConfigError("private extractors and reconstructor go together");
  for (const Mlp* p : {&*m_p_s, &*m_p_t}) {
    if (p->in_dim() != m_c.in_dim() || p->out_dim() != k) {
      throw ConfigError("private extractor dims must be feature_dim -> shared dim");
    }
    if (p->output_activation() != Activation::kSigmoid) {
      throw ConfigError("private extractor must end in sigmoid");
    }
  }
  if (m_r->in_dim() != 2 * k || m_r->out_dim() != m_c.in_dim()) {
    throw ConfigError("reconstructor dims must be 2 * shared dim -> feature_dim");
  }
  if (m_r->output_activation() != Activation::kLinear) {
    throw ConfigError("reconstructor must end in a linear layer");
  }
}

void DsnBatch::validate(const DsnModel& model) const {
  require_rows(source_x, "source");
  require_rows(target_x, "target");
  if (source_y.size() != source_x.rows()) throw DataError("source label count mismatch");
  if (source_x.cols() != model.feature_dim() || target_x.cols() != model.feature_dim()) {
    throw ShapeError("batch feature dim does not match the model");
  }
  const auto q = static_cast<int>(model.num_classes());
  for (int y : source_y) {
    if (y < 0 || y >= q) throw DataError("source label " + std::to_string(y) + " out of range");
  }
}

bool StepTrace::all_finite() const noexcept {
  return std::isfinite(loss_senone) && std::isfinite(loss_domain) && std::isfinite(loss_diff) &&
         std::isfinite(loss_recon) && std::isfinite(loss_total) && std::isfinite(domain_accuracy);
}

std::pair<Mlp, Mlp> split_pretrained(const Mlp& source_dnn, std::size_t n_h) {
  const std::size_t hidden = source_dnn.num_layers() == 0 ? 0 : source_dnn.num_layers() - 1;
  if (n_h < 1 || n_h > hidden) {
    throw ConfigError("n_h = " + std::to_string(n_h) + " outside [1, " + std::to_string(hidden) +
                      "] for a network with " + std::to_string(hidden) + " hidden layers");
  }
  const auto& layers = source_dnn.layers();
  const auto split = layers.begin() + static_cast<std::ptrdiff_t>(n_h);
  return {Mlp({layers.begin(), split}), Mlp({split, layers.end()})};
}

DsnModel build_model(const Mlp& source_dnn, std::size_t n_h, const Coefficients& coef,
                     const Architecture& arch, bool with_private, Rng& domain_rng,
                     Rng& private_rng) {
  DsnModel model;
  std::tie(model.m_c, model.m_y) = split_pretrained(source_dnn, n_h);
  model.n_h = n_h;
  model.coef = coef;
  const std::size_t k = model.m_c.out_dim();
  const std::size_t f = model.m_c.in_dim();
  const auto d_spec = chain(k, arch.domain_hidden, Activation::kRelu, 2, Activation::kSoftmax);
  model.m_d = nn::init_mlp(d_spec, domain_rng);
  if (with_private) {
    const auto p_spec = chain(f, arch.private_hidden, Activation::kRelu, k, Activation::kSigmoid);
    const auto r_spec = chain(2 * k, arch.recon_hidden, Activation::kRelu, f, Activation::kLinear);
    model.m_p_s = nn::init_mlp(p_spec, private_rng);
    model.m_p_t = nn::init_mlp(p_spec, private_rng);
    model.m_r = nn::init_mlp(r_spec, private_rng);
  }
  model.validate();
  return model;
}

Matrix senone_posteriors(const DsnModel& model, const Matrix& x) {
  return nn::predict(model.m_y, nn::predict(model.m_c, x));
}

Matrix domain_posteriors(const DsnModel& model, const Matrix& x) {
  return nn::predict(model.m_d, grl::forward(nn::predict(model.m_c, x)));
}

Matrix reconstruct(const DsnModel& model, const Matrix& x, Domain domain) {
  require_private(model, "reconstruct");
  const Mlp& priv = domain == Domain::kSource ? *model.m_p_s : *model.m_p_t;
  return nn::predict(*model.m_r, hstack(nn::predict(model.m_c, x), nn::predict(priv, x)));
}

LossTerm loss_senone(const DsnModel& model, const Matrix& source_x,
                     std::span<const int> source_y) {
  auto fc = nn::forward(model.m_c, source_x);
  auto fy = nn::forward(model.m_y, fc.output);
  auto ce = nn::cross_entropy_loss(fy.output, source_y);
  auto by = nn::backward_from_logits(model.m_y, fy.cache, ce.logit_grad);
  auto bc = nn::backward(model.m_c, fc.cache, by.input_grad);
  LossTerm term;
  term.value = ce.loss;
  term.grads.m_y = std::move(by.grads);
  term.grads.m_c = std::move(bc.grads);
  return term;
}

LossTerm loss_domain(const DsnModel& model, const Matrix& source_x, const Matrix& target_x,
                     DomainRoute route) {
  require_rows(source_x, "source");
  require_rows(target_x, "target");
  auto fc = nn::forward(model.m_c, vstack(source_x, target_x));
  auto fd = nn::forward(model.m_d, grl::forward(fc.output));
  const auto labels = domain_labels(source_x.rows(), target_x.rows());
  auto ce = nn::cross_entropy_loss(fd.output, labels);
  auto bd = nn::backward_from_logits(model.m_d, fd.cache, ce.logit_grad);
  const Matrix upstream = route == DomainRoute::kReversed
                              ? grl::backward(bd.input_grad, {model.coef.alpha})
                              : bd.input_grad;
  auto bc = nn::backward(model.m_c, fc.cache, upstream);
  LossTerm term;
  term.value = ce.loss;
  term.grads.m_d = std::move(bd.grads);
  term.grads.m_c = std::move(bc.grads);
  return term;
}

DifferenceTerm difference_term(const Matrix& shared, const Matrix& priv) {
  if (shared.rows() != priv.rows()) throw ShapeError("difference_term: row counts differ");
  if (shared.rows() == 0) throw ContractError("difference_term: empty batch");
  const std::size_t rows = shared.rows();
  const std::size_t ks = shared.cols();
  const std::size_t kp = priv.cols();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  // corr = (1/B) S^T P, ks x kp
  Matrix corr(ks, kp);
  for (std::size_t i = 0; i < rows; ++i) {
    auto s = shared.row(i);
    auto p = priv.row(i);
    for (std::size_t a = 0; a < ks; ++a) {
      double* ca = corr.row(a).data();
      const double sa = s[a];
      for (std::size_t b = 0; b < kp; ++b) ca[b] += sa * p[b];
    }
  }
  for (double& v : corr.values()) v *= inv_rows;
  DifferenceTerm term;
  term.value = squared_frobenius(corr);
  // dL/dS = (2/B) P corr^T, dL/dP = (2/B) S corr
  const double scale = 2.0 * inv_rows;
  term.shared_grad = Matrix(rows, ks);
  term.private_grad = Matrix(rows, kp);
  for (std::size_t i = 0; i < rows; ++i) {
    auto s = shared.row(i);
    auto p = priv.row(i);
    auto gs = term.shared_grad.row(i);
    auto gp = term.private_grad.row(i);
    for (std::size_t a = 0; a < ks; ++a) {
      auto ca = corr.row(a);
      double acc = 0.0;
      for (std::size_t b = 0; b < kp; ++b) {
        acc += p[b] * ca[b];
        gp[b] += s[a] * ca[b];
      }
      gs[a] = scale * acc;
    }
    for (double& v : gp) v *= scale;
  }
  return term;
}

LossTerm loss_diff(const DsnModel& model, const Matrix& source_x, const Matrix& target_x) {
  require_private(model, "loss_diff");
  require_rows(source_x, "source");
  require_rows(target_x, "target");
  const std::size_t bs = source_x.rows();
  const std::size_t bt = target_x.rows();
  auto fc = nn::forward(model.m_c, vstack(source_x, target_x));
  auto ps = nn::forward(*model.m_p_s, source_x);
  auto pt = nn::forward(*model.m_p_t, target_x);
  auto ds = difference_term(fc.output.slice_rows(0, bs), ps.output);
  auto dt = difference_term(fc.output.slice_rows(bs, bt), pt.output);
  LossTerm term;
  term.value = ds.value + dt.value;
  term.grads.m_c = nn::backward(model.m_c, fc.cache, vstack(ds.shared_grad, dt.shared_grad)).grads;
  term.grads.m_p_s = nn::backward(*model.m_p_s, ps.cache, ds.private_grad).grads;
  term.grads.m_p_t = nn::backward(*model.m_p_t, pt.cache, dt.private_grad).grads;
  return term;
}

LossTerm loss_recon(const DsnModel& model, const Matrix& source_x, const Matrix& target_x) {
  require_private(model, "loss_recon");
  require_rows(source_x, "source");
  require_rows(target_x, "target");
  const std::size_t bs = source_x.rows();
  const std::size_t bt = target_x.rows();
  const std::size_t k = model.shared_dim();
  auto fc = nn::forward(model.m_c, vstack(source_x, target_x));
  auto ps = nn::forward(*model.m_p_s, source_x);
  auto pt = nn::forward(*model.m_p_t, target_x);
  const Matrix input = vstack(hstack(fc.output.slice_rows(0, bs), ps.output),
                              hstack(fc.output.slice_rows(bs, bt), pt.output));
  auto rp = recon_pass(*model.m_r, input, source_x, target_x);
  const Matrix g_shared = rp.input_grad.slice_cols(0, k);
  const Matrix g_priv = rp.input_grad.slice_cols(k, k);
  LossTerm term;
  term.value = rp.value;
  term.grads.m_r = std::move(rp.m_r);
  term.grads.m_c = nn::backward(model.m_c, fc.cache, g_shared).grads;
  term.grads.m_p_s = nn::backward(*model.m_p_s, ps.cache, g_priv.slice_rows(0, bs)).grads;
  term.grads.m_p_t = nn::backward(*model.m_p_t, pt.cache, g_priv.slice_rows(bs, bt)).grads;
  return term;
}

TotalLoss loss_total(const DsnModel& model, const DsnBatch& batch) {
  batch.validate(model);
  const Coefficients& coef = model.coef;
  const std::size_t bs = batch.source_x.rows();
  const std::size_t bt = batch.target_x.rows();
  TotalLoss out;
  StepTrace& tr = out.trace;

  auto fc = nn::forward(model.m_c, vstack(batch.source_x, batch.target_x));
  const Matrix fc_s = fc.output.slice_rows(0, bs);
  const Matrix fc_t = fc.output.slice_rows(bs, bt);

  // Senone classification on source rows.
  auto fy = nn::forward(model.m_y, fc_s);
  auto ce_y = nn::cross_entropy_loss(fy.output, batch.source_y);
  auto by = nn::backward_from_logits(model.m_y, fy.cache, ce_y.logit_grad);
  tr.loss_senone = ce_y.loss;
  out.grads.m_y = std::move(by.grads);

  // Domain classification on all rows, behind the GRL.
  auto fd = nn::forward(model.m_d, grl::forward(fc.output));
  const auto d_labels = domain_labels(bs, bt);
  auto ce_d = nn::cross_entropy_loss(fd.output, d_labels);
  auto bd = nn::backward_from_logits(model.m_d, fd.cache, ce_d.logit_grad);
  tr.loss_domain = ce_d.loss;
  tr.domain_accuracy = domain_accuracy(fd.output, d_labels);
  out.grads.m_d = std::move(bd.grads);

  Matrix g_fc = grl::backward(bd.input_grad, {coef.alpha});
  add_rows(g_fc, by.input_grad, 0);

  if (model.has_private()) {
    auto ps = nn::forward(*model.m_p_s, batch.source_x);
    auto pt = nn::forward(*model.m_p_t, batch.target_x);
    auto ds = difference_term(fc_s, ps.output);
    auto dt = difference_term(fc_t, pt.output);
    tr.loss_diff = ds.value + dt.value;

    const std::size_t k = model.shared_dim();
    const Matrix r_in = vstack(hstack(fc_s, ps.output), hstack(fc_t, pt.output));
    auto rp = recon_pass(*model.m_r, r_in, batch.source_x, batch.target_x);
    tr.loss_recon = rp.value;
    out.grads.m_r = std::move(rp.m_r);

    Matrix g_ps(bs, k);
    Matrix g_pt(bt, k);
    if (coef.beta != 0.0) {
      add_rows(g_fc, ds.shared_grad, 0, coef.beta);
      add_rows(g_fc, dt.shared_grad, bs, coef.beta);
      add_scaled(g_ps, ds.private_grad, coef.beta);
      add_scaled(g_pt, dt.private_grad, coef.beta);
    }
    if (coef.gamma != 0.0) {
      add_scaled(g_fc, rp.input_grad.slice_cols(0, k), coef.gamma);
      const Matrix g_priv = rp.input_grad.slice_cols(k, k);
      add_scaled(g_ps, g_priv.slice_rows(0, bs), coef.gamma);
      add_scaled(g_pt, g_priv.slice_rows(bs, bt), coef.gamma);
    }
    out.grads.m_p_s = nn::backward(*model.m_p_s, ps.cache, g_ps).grads;
    out.grads.m_p_t = nn::backward(*model.m_p_t, pt.cache, g_pt).grads;
  }

  out.grads.m_c = nn::backward(model.m_c, fc.cache, g_fc).grads;
  tr.loss_total = tr.loss_senone + tr.loss_domain;
  if (coef.beta != 0.0) tr.loss_total += coef.beta * tr.loss_diff;
  if (coef.gamma != 0.0) tr.loss_total += coef.gamma * tr.loss_recon;
  return out;
}

StepTrace dsn_step(DsnModel& model, const DsnBatch& batch, double mu) {
  if (!std::isfinite(mu) || mu < 0.0) throw ConfigError("learning rate must be finite and >= 0");
  TotalLoss total = loss_total(model, batch);
  if (!total.trace.all_finite()) {
    throw DivergenceError("non-finite loss: senone=" + std::to_string(total.trace.loss_senone) +
                          " domain=" + std::to_string(total.trace.loss_domain) +
                          " diff=" + std::to_string(total.trace.loss_diff) +
                          " recon=" + std::to_string(total.trace.loss_recon));
  }
  const DsnGradients& g = total.grads;
  for (const auto* opt : {&g.m_c, &g.m_y, &g.m_d, &g.m_p_s, &g.m_p_t, &g.m_r}) {
    if (*opt && !(*opt)->all_finite()) throw DivergenceError("non-finite gradient in dsn_step");
  }
  nn::sgd_update(model.m_c, *g.m_c, mu);
  nn::sgd_update(model.m_y, *g.m_y, mu);
  nn::sgd_update(model.m_d, *g.m_d, mu);
  if (model.has_private()) {
    nn::sgd_update(*model.m_p_s, *g.m_p_s, mu);
    nn::sgd_update(*model.m_p_t, *g.m_p_t, mu);
    nn::sgd_update(*model.m_r, *g.m_r, mu);
  }
  return total.trace;
}

std::pair<Mlp, Mlp> adapted_model(const DsnModel& model) { return {model.m_c, model.m_y}; }

void write_model(std::ostream& out, const DsnModel& model) {
  out << "dsn-model v1\n"
      << "alpha " << format_double(model.coef.alpha) << '\n'
      << "beta " << format_double(model.coef.beta) << '\n'
      << "gamma " << format_double(model.coef.gamma) << '\n'
      << "n_h " << model.n_h << '\n'
      << "k " << model.shared_dim() << '\n'
      << "num_classes " << model.num_classes() << '\n'
      << "feature_dim " << model.feature_dim() << '\n'
      << "nets m_c m_y m_d" << (model.has_private() ? " m_p_s m_p_t m_r" : "") << '\n';
  const auto emit = [&](const char* name, const Mlp& net) {
    out << "net " << name << '\n';
    nn::write_mlp(out, net);
  };
  emit("m_c", model.m_c);
  emit("m_y", model.m_y);
  emit("m_d", model.m_d);
  if (model.has_private()) {
    emit("m_p_s", *model.m_p_s);
    emit("m_p_t", *model.m_p_t);
    emit("m_r", *model.m_r);
  }
}

DsnModel read_model(std::istream& in) {
  LineReader reader(in);
  if (trim(reader.expect("dsn-model header")) != "dsn-model v1") {
    reader.fail("expected 'dsn-model v1' header");
  }
  const auto field = [&](const char* key) {
    const std::string line = reader.expect(key);
    const auto f = split_ws(line);
    if (f.size() != 2 || f[0] != key) reader.fail(std::string("expected '") + key + " <value>'");
    return std::string(f[1]);
  };
  const auto real = [&](const char* key) {
    double v = 0.0;
    if (!parse_double(field(key), v)) reader.fail(std::string("bad value for ") + key);
    return v;
  };
  const auto count = [&](const char* key) {
    std::size_t v = 0;
    if (!parse_size(field(key), v)) reader.fail(std::string("bad value for ") + key);
    return v;
  };
  DsnModel model;
  model.coef.alpha = real("alpha");
  model.coef.beta = real("beta");
  model.coef.gamma = real("gamma");
  model.n_h = count("n_h");
  const std::size_t k = count("k");
  const std::size_t q = count("num_classes");
  const std::size_t f = count("feature_dim");
  const std::string nets_line = reader.expect("nets line");
  const auto names = split_ws(nets_line);
  if (names.empty() || names[0] != "nets") reader.fail("expected 'nets ...' line");
  const std::vector<std::string_view> listed(names.begin() + 1, names.end());
  const std::vector<std::string_view> grl_only{"m_c", "m_y", "m_d"};
  const std::vector<std::string_view> full{"m_c", "m_y", "m_d", "m_p_s", "m_p_t", "m_r"};
  if (listed != grl_only && listed != full) reader.fail("unsupported network list");
  for (auto name : listed) {
    const std::string header = reader.expect("net header");
    const auto h = split_ws(header);
    if (h.size() != 2 || h[0] != "net" || h[1] != name) {
      reader.fail("expected 'net " + std::string(name) + "'");
    }
    Mlp net = nn::read_mlp(reader);
    if (name == "m_c") model.m_c = std::move(net);
    else if (name == "m_y") model.m_y = std::move(net);
    else if (name == "m_d") model.m_d = std::move(net);
    else if (name == "m_p_s") model.m_p_s = std::move(net);
    else if (name == "m_p_t") model.m_p_t = std::move(net);
    else model.m_r = std::move(net);
  }
  try {
    model.validate();
  } catch (const ConfigError& e) {
    reader.fail(std::string("inconsistent model: ") + e.what());
  }
  if (model.shared_dim() != k || model.num_classes() != q || model.feature_dim() != f) {
    reader.fail("manifest dimensions disagree with the stored networks");
  }
  return model;
}

void save_model(const std::string& path, const DsnModel& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_model(out, model);
  if (!out) throw DataError("failed writing '" + path + "'");
}

DsnModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_model(in);
}

}  // namespace dsn::model
