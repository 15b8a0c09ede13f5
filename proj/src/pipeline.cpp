#include "dsn/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "dsn/error.hpp"
#include "dsn/grl.hpp"
#include "dsn/rng.hpp"
#include "dsn/text_io.hpp"

namespace dsn::pipeline {

namespace fs = std::filesystem;
using data::Corpus;
using model::Domain;
using nn::Mlp;

namespace {

// Rng stream ids under the experiment seed.
enum Stream : std::uint64_t {
  kSourceInit = 11,
  kPretrainBatches = 12,
  kDomainInit = 13,
  kPrivateInit = 14,
  kSourceBatches = 15,
  kTargetBatches = 16,
};

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value) {
  std::vector<std::size_t> out;
  for (auto part : split(value, ',')) {
    std::size_t v = 0;
    if (!parse_size(part, v)) {
      throw ConfigError("bad integer '" + std::string(trim(part)) + "' in " + std::string(key));
    }
    out.push_back(v);
  }
  return out;
}

std::vector<double> parse_real_list(std::string_view key, std::string_view value) {
  std::vector<double> out;
  for (auto part : split(value, ',')) {
    double v = 0.0;
    if (!parse_double(part, v)) {
      throw ConfigError("bad number '" + std::string(trim(part)) + "' in " + std::string(key));
    }
    out.push_back(v);
  }
  return out;
}

std::size_t parse_count(std::string_view key, std::string_view value) {
  std::size_t v = 0;
  if (!parse_size(value, v)) {
    throw ConfigError("bad integer '" + std::string(value) + "' for " + std::string(key));
  }
  return v;
}

double parse_real(std::string_view key, std::string_view value) {
  double v = 0.0;
  if (!parse_double(value, v) || !std::isfinite(v)) {
    throw ConfigError("bad number '" + std::string(value) + "' for " + std::string(key));
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  throw ConfigError("bad boolean '" + std::string(value) + "' for " + std::string(key));
}

// Endless stream of indices: consecutive batches walk a permutation of 0..n-1,
// drawing a fresh permutation whenever one is used up.
class IndexStream {
 public:
  IndexStream(Rng rng, std::size_t n) : rng_(std::move(rng)), n_(n) {}

  std::vector<std::size_t> take(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == perm_.size()) {
        perm_ = rng_.permutation(n_);
        pos_ = 0;
      }
      out.push_back(perm_[pos_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::size_t n_;
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
};

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::vector<int> gather(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

struct TraceAccumulator {
  EpochTrace sum;
  std::size_t steps = 0;

  void add(const model::StepTrace& t) {
    sum.loss_senone += t.loss_senone;
    sum.loss_domain += t.loss_domain;
    sum.loss_diff += t.loss_diff;
    sum.loss_recon += t.loss_recon;
    sum.loss_total += t.loss_total;
    sum.domain_accuracy += t.domain_accuracy;
    ++steps;
  }

  EpochTrace mean(std::size_t epoch) const {
    EpochTrace e = sum;
    e.epoch = epoch;
    const double n = steps == 0 ? 1.0 : static_cast<double>(steps);
    e.loss_senone /= n;
    e.loss_domain /= n;
    e.loss_diff /= n;
    e.loss_recon /= n;
    e.loss_total /= n;
    e.domain_accuracy /= n;
    return e;
  }
};

AdaptResult adapt_impl(const ExperimentConfig& cfg, const Mlp& source_dnn,
                       const Corpus& source_train, const Corpus& target_adapt,
                       bool with_private) {
  cfg.validate();
  model::Coefficients coef = cfg.coef;
  if (!with_private) coef.beta = coef.gamma = 0.0;
  Rng domain_rng = Rng::stream(cfg.seed, kDomainInit);
  Rng private_rng = Rng::stream(cfg.seed, kPrivateInit);
  AdaptResult res{model::build_model(source_dnn, cfg.n_h, coef, cfg.arch, with_private,
                                     domain_rng, private_rng),
                  {}};

  const Matrix xs = source_train.features();
  const std::vector<int> ys = source_train.labels();
  const Matrix xt = target_adapt.features();
  if (xs.rows() == 0 || xt.rows() == 0) throw DataError("adaptation corpora must be non-empty");
  const std::size_t b = std::min({cfg.batch, xs.rows(), xt.rows()});
  const std::size_t steps = std::max<std::size_t>(1, std::max(xs.rows(), xt.rows()) / b);
  IndexStream src_stream(Rng::stream(cfg.seed, kSourceBatches), xs.rows());
  IndexStream tgt_stream(Rng::stream(cfg.seed, kTargetBatches), xt.rows());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    TraceAccumulator acc;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto si = src_stream.take(b);
      const auto ti = tgt_stream.take(b);
      model::DsnBatch batch{gather_rows(xs, si), gather(ys, si), gather_rows(xt, ti)};
      acc.add(model::dsn_step(res.model, batch, cfg.mu));
    }
    res.trace.push_back(acc.mean(epoch));
  }
  return res;
}

std::string domain_tag(Domain d) { return d == Domain::kSource ? "src" : "tgt"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Corpus load_or_empty(const fs::path& p, bool labeled) {
  return labeled ? data::load_corpus(p.string()) : data::load_corpus_unlabeled(p.string());
}

}  // namespace

std::string_view to_string(Mode m) noexcept {
  switch (m) {
    case Mode::kPretrain: return "pretrain";
    case Mode::kAdaptGrl: return "adapt-grl";
    case Mode::kAdaptDsn: return "adapt-dsn";
    case Mode::kEvaluate: return "evaluate";
    case Mode::kSweep: return "sweep";
  }
  return "adapt-dsn";
}

Mode parse_mode(std::string_view name) {
  std::string n(name);
  std::replace(n.begin(), n.end(), '_', '-');
  if (n == "pretrain") return Mode::kPretrain;
  if (n == "adapt-grl") return Mode::kAdaptGrl;
  if (n == "adapt-dsn") return Mode::kAdaptDsn;
  if (n == "evaluate") return Mode::kEvaluate;
  if (n == "sweep") return Mode::kSweep;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  value = trim(value);
  if (key == "mode") mode = parse_mode(value);
  else if (key == "seed") seed = parse_count(key, value);
  else if (key == "data_seed") {
    synth.seed = parse_count(key, value);
    data_seed_set = true;
  }
  else if (key == "num_classes") synth.num_classes = parse_count(key, value);
  else if (key == "base_dim") synth.base_dim = parse_count(key, value);
  else if (key == "utterances_per_domain") synth.utterances_per_domain = parse_count(key, value);
  else if (key == "frames_per_utterance") synth.frames_per_utterance = parse_count(key, value);
  else if (key == "class_separation") synth.class_separation = parse_real(key, value);
  else if (key == "channel_matrix_scale") synth.channel_matrix_scale = parse_real(key, value);
  else if (key == "noise_std") synth.noise_std = parse_real(key, value);
  else if (key == "splice_left") splice_left = parse_count(key, value);
  else if (key == "splice_right") splice_right = parse_count(key, value);
  else if (key == "source_hidden") source_hidden = parse_size_list(key, value);
  else if (key == "source_activation") source_activation = nn::parse_activation(value);
  else if (key == "domain_hidden") arch.domain_hidden = value.empty() ? std::vector<std::size_t>{} : parse_size_list(key, value);
  else if (key == "private_hidden") arch.private_hidden = value.empty() ? std::vector<std::size_t>{} : parse_size_list(key, value);
  else if (key == "recon_hidden") arch.recon_hidden = value.empty() ? std::vector<std::size_t>{} : parse_size_list(key, value);
  else if (key == "n_h") n_h = parse_count(key, value);
  else if (key == "alpha") coef.alpha = parse_real(key, value);
  else if (key == "beta") coef.beta = parse_real(key, value);
  else if (key == "gamma") coef.gamma = parse_real(key, value);
  else if (key == "mu") mu = parse_real(key, value);
  else if (key == "pretrain_mu") pretrain_mu = parse_real(key, value);
  else if (key == "pretrain_epochs") pretrain_epochs = parse_count(key, value);
  else if (key == "epochs") epochs = parse_count(key, value);
  else if (key == "batch") batch = parse_count(key, value);
  else if (key == "sweep_n_h") sweep_n_h = parse_size_list(key, value);
  else if (key == "sweep_alpha") sweep_alpha = parse_real_list(key, value);
  else if (key == "jobs") jobs = parse_count(key, value);
  else if (key == "eval_batch") eval_batch = parse_count(key, value);
  else if (key == "source_model") source_model = std::string(value);
  else if (key == "model") model = std::string(value);
  else if (key == "corpus_dir") corpus_dir = std::string(value);
  else if (key == "write_corpora") write_corpora = parse_bool(key, value);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void ExperimentConfig::validate() const {
  synth.validate();
  coef.validate();
  if (source_hidden.empty()) throw ConfigError("source_hidden needs at least one hidden layer");
  for (std::size_t w : source_hidden) {
    if (w == 0) throw ConfigError("source_hidden widths must be >= 1");
  }
  if (source_activation == nn::Activation::kSoftmax) {
    throw ConfigError("source_activation cannot be softmax");
  }
  const auto positive = [](const std::vector<std::size_t>& v, const char* name) {
    for (std::size_t w : v) {
      if (w == 0) throw ConfigError(std::string(name) + " widths must be >= 1");
    }
  };
  positive(arch.domain_hidden, "domain_hidden");
  positive(arch.private_hidden, "private_hidden");
  positive(arch.recon_hidden, "recon_hidden");
  if (n_h < 1 || n_h > source_hidden.size()) {
    throw ConfigError("n_h must lie in [1, " + std::to_string(source_hidden.size()) + "]");
  }
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be finite and >= 0");
  if (!(pretrain_mu >= 0.0) || !std::isfinite(pretrain_mu)) {
    throw ConfigError("pretrain_mu must be finite and >= 0");
  }
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (eval_batch == 0) throw ConfigError("eval_batch must be >= 1");
  if (jobs == 0) throw ConfigError("jobs must be >= 1");
  if (mode == Mode::kSweep) {
    if (sweep_n_h.empty() || sweep_alpha.empty()) throw ConfigError("sweep lists must be non-empty");
    for (std::size_t h : sweep_n_h) {
      if (h < 1 || h > source_hidden.size()) throw ConfigError("sweep_n_h value out of range");
    }
    for (double a : sweep_alpha) grl::GrlConfig{a}.validate();
  }
  if (mode == Mode::kEvaluate && model.empty()) {
    throw ConfigError("evaluate mode needs 'model = <path>'");
  }
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  LineReader reader(in);
  std::string line;
  while (reader.next(line)) {
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(reader.line_number()) +
                        ": expected 'key = value'");
    }
    const auto key = trim(body.substr(0, eq));
    try {
      cfg.set(key, body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(reader.line_number()) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

PreparedData prepare_data(const ExperimentConfig& cfg, bool with_target_test) {
  Corpus source_train, target_adapt, source_test, target_test;
  if (!cfg.corpus_dir.empty()) {
    const fs::path dir(cfg.corpus_dir);
    source_train = load_or_empty(dir / kSourceTrainFile, true);
    target_adapt = load_or_empty(dir / kTargetAdaptFile, false);
    source_test = load_or_empty(dir / kSourceTestFile, true);
    if (with_target_test) target_test = load_or_empty(dir / kTargetTestFile, true);
  } else {
    data::SynthConfig sc = cfg.synth;
    sc.seed = cfg.data_seed();
    auto synth = data::synth_corpus(sc);
    source_train = std::move(synth.source_train);
    target_adapt = std::move(synth.target_adapt);
    source_test = std::move(synth.source_test);
    if (with_target_test) target_test = std::move(synth.target_test);
  }
  const auto prep = [&](const Corpus& c) {
    return c.spliced ? c : data::splice(c, cfg.splice_left, cfg.splice_right);
  };
  source_train = prep(source_train);
  target_adapt = prep(target_adapt);
  source_test = prep(source_test);
  if (with_target_test) target_test = prep(target_test);

  PreparedData out;
  out.stats = data::compute_stats({&source_train, &target_adapt});
  out.source_train = data::apply_stats(source_train, out.stats);
  out.target_adapt = data::apply_stats(target_adapt, out.stats);
  out.source_test = data::apply_stats(source_test, out.stats);
  if (with_target_test) out.target_test = data::apply_stats(target_test, out.stats);
  return out;
}

CorpusEval evaluate(const Mlp& m_c, const Mlp& m_y, const Corpus& corpus, std::string name,
                    std::size_t batch_size, std::size_t threads) {
  if (!corpus.labeled()) throw DataError("evaluate: corpus '" + name + "' is not labeled");
  if (batch_size == 0) batch_size = 1;
  if (threads == 0) threads = 1;
  const std::size_t q = m_y.out_dim();
  const std::vector<int> labels = corpus.labels();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= q) {
      throw DataError("evaluate: label " + std::to_string(y) + " out of range");
    }
  }
  const Matrix x = corpus.features();
  const std::size_t n = x.rows();
  const std::size_t chunks = (n + batch_size - 1) / batch_size;
  std::vector<int> predicted(n, 0);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    try {
      for (std::size_t c = next++; c < chunks; c = next++) {
        const std::size_t begin = c * batch_size;
        const std::size_t count = std::min(batch_size, n - begin);
        const Matrix post = nn::predict(m_y, nn::predict(m_c, x.slice_rows(begin, count)));
        for (std::size_t r = 0; r < count; ++r) {
          auto row = post.row(r);
          predicted[begin + r] =
              static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        }
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (threads == 1 || chunks <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, chunks); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  CorpusEval ev;
  ev.name = std::move(name);
  ev.domain = corpus.records.empty() ? Domain::kSource : corpus.records.front().domain;
  ev.frames = n;
  ev.confusion.assign(q, std::vector<std::size_t>(q, 0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto ref = static_cast<std::size_t>(labels[i]);
    const auto hyp = static_cast<std::size_t>(predicted[i]);
    ++ev.confusion[ref][hyp];
    if (ref != hyp) ++ev.errors;
  }
  ev.frame_error_rate = n == 0 ? 0.0 : static_cast<double>(ev.errors) / static_cast<double>(n);
  return ev;
}

CorpusEval evaluate(const Mlp& classifier, const Corpus& corpus, std::string name,
                    std::size_t batch_size, std::size_t threads) {
  // Without hidden layers there is no split point; evaluate behind an identity layer.
  if (classifier.num_layers() < 2) {
    std::vector<nn::DenseLayer> id{{Matrix(classifier.in_dim(), classifier.in_dim()),
                                    std::vector<double>(classifier.in_dim(), 0.0),
                                    nn::Activation::kLinear}};
    for (std::size_t i = 0; i < classifier.in_dim(); ++i) id[0].weights(i, i) = 1.0;
    return evaluate(Mlp(std::move(id)), classifier, corpus, std::move(name), batch_size, threads);
  }
  auto [m_c, m_y] = model::split_pretrained(classifier, 1);
  return evaluate(m_c, m_y, corpus, std::move(name), batch_size, threads);
}

PretrainResult pretrain_source(const ExperimentConfig& cfg, const Corpus& source_train) {
  cfg.validate();
  const Matrix x = source_train.features();
  const std::vector<int> y = source_train.labels();
  if (x.rows() == 0) throw DataError("pretrain: source corpus is empty");

  std::vector<nn::LayerSpec> spec;
  std::size_t prev = x.cols();
  for (std::size_t w : cfg.source_hidden) {
    spec.push_back({prev, w, cfg.source_activation});
    prev = w;
  }
  spec.push_back({prev, cfg.synth.num_classes, nn::Activation::kSoftmax});
  Rng init = Rng::stream(cfg.seed, kSourceInit);
  PretrainResult res{nn::init_mlp(spec, init), {}};

  const std::size_t b = std::min(cfg.batch, x.rows());
  const std::size_t steps = std::max<std::size_t>(1, x.rows() / b);
  IndexStream stream(Rng::stream(cfg.seed, kPretrainBatches), x.rows());
  for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    TraceAccumulator acc;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto idx = stream.take(b);
      auto fwd = nn::forward(res.source_dnn, gather_rows(x, idx));
      auto ce = nn::cross_entropy_loss(fwd.output, gather(y, idx));
      if (!std::isfinite(ce.loss)) throw DivergenceError("pretrain: non-finite loss");
      auto back = nn::backward_from_logits(res.source_dnn, fwd.cache, ce.logit_grad);
      nn::sgd_update(res.source_dnn, back.grads, cfg.pretrain_mu);
      model::StepTrace t;
      t.loss_senone = t.loss_total = ce.loss;
      acc.add(t);
    }
    res.trace.push_back(acc.mean(epoch));
  }
  return res;
}

AdaptResult adapt_grl(const ExperimentConfig& cfg, const Mlp& source_dnn,
                      const Corpus& source_train, const Corpus& target_adapt) {
  return adapt_impl(cfg, source_dnn, source_train, target_adapt, false);
}

AdaptResult adapt_dsn(const ExperimentConfig& cfg, const Mlp& source_dnn,
                      const Corpus& source_train, const Corpus& target_adapt) {
  return adapt_impl(cfg, source_dnn, source_train, target_adapt, true);
}

std::string SweepResult::to_csv() const {
  std::string out = "n_h";
  for (double a : alpha) out += ",alpha=" + format_double(a);
  out += ",avg\n";
  for (std::size_t i = 0; i < n_h.size(); ++i) {
    out += std::to_string(n_h[i]);
    for (const auto& cell : grid[i]) {
      out += ',';
      out += std::isfinite(cell.target_error) ? format_double(cell.target_error) : "nan";
    }
    out += ',';
    out += std::isfinite(row_average[i]) ? format_double(row_average[i]) : "nan";
    out += '\n';
  }
  return out;
}

SweepResult sweep(const ExperimentConfig& cfg, const Mlp& source_dnn, const PreparedData& data,
                  const std::vector<std::size_t>& n_h_list, const std::vector<double>& alpha_list) {
  if (n_h_list.empty() || alpha_list.empty()) throw ConfigError("sweep lists must be non-empty");
  if (!data.target_test.labeled()) throw ContractError("sweep needs a labeled target_test corpus");
  SweepResult res;
  res.n_h = n_h_list;
  res.alpha = alpha_list;
  res.grid.assign(n_h_list.size(), std::vector<SweepCell>(alpha_list.size()));

  const auto run_cell = [&](std::size_t i, std::size_t j) {
    SweepCell& cell = res.grid[i][j];
    cell.n_h = n_h_list[i];
    cell.alpha = alpha_list[j];
    try {
      ExperimentConfig c = cfg;
      c.mode = Mode::kAdaptDsn;
      c.n_h = cell.n_h;
      c.coef.alpha = cell.alpha;
      auto adapted = adapt_dsn(c, source_dnn, data.source_train, data.target_adapt);
      cell.target_error =
          evaluate(adapted.model.m_c, adapted.model.m_y, data.target_test, "target_test",
                   cfg.eval_batch, 1)
              .frame_error_rate;
    } catch (const std::exception& e) {
      cell.target_error = std::numeric_limits<double>::quiet_NaN();
      cell.failure = e.what();
    }
  };

  const std::size_t cells = n_h_list.size() * alpha_list.size();
  if (cfg.jobs <= 1) {
    for (std::size_t c = 0; c < cells; ++c) run_cell(c / alpha_list.size(), c % alpha_list.size());
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(cfg.jobs, cells); ++t) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < cells; c = next++) {
          run_cell(c / alpha_list.size(), c % alpha_list.size());
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  for (const auto& row : res.grid) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& cell : row) {
      if (std::isfinite(cell.target_error)) {
        sum += cell.target_error;
        ++n;
      }
    }
    res.row_average.push_back(n == 0 ? std::numeric_limits<double>::quiet_NaN()
                                     : sum / static_cast<double>(n));
  }
  return res;
}

std::string trace_csv(const std::vector<EpochTrace>& trace) {
  std::string out = "epoch,loss_senone,loss_domain,loss_diff,loss_recon,loss_total\n";
  for (const auto& e : trace) {
    out += std::to_string(e.epoch);
    for (double v : {e.loss_senone, e.loss_domain, e.loss_diff, e.loss_recon, e.loss_total}) {
      out += ',';
      append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

std::string report_csv(const std::vector<std::pair<std::string, CorpusEval>>& rows) {
  std::string out = "system,corpus,domain,frames,errors,frame_error_rate\n";
  for (const auto& [system, ev] : rows) {
    out += system + "," + ev.name + "," + domain_tag(ev.domain) + "," +
           std::to_string(ev.frames) + "," + std::to_string(ev.errors) + ",";
    append_double(out, ev.frame_error_rate);
    out += '\n';
  }
  return out;
}

std::string confusion_csv(const std::vector<std::pair<std::string, CorpusEval>>& rows) {
  std::string out = "system,corpus,reference,predicted,count\n";
  for (const auto& [system, ev] : rows) {
    for (std::size_t r = 0; r < ev.confusion.size(); ++r) {
      for (std::size_t p = 0; p < ev.confusion[r].size(); ++p) {
        if (ev.confusion[r][p] == 0) continue;
        out += system + "," + ev.name + "," + std::to_string(r) + "," + std::to_string(p) + "," +
               std::to_string(ev.confusion[r][p]) + "\n";
      }
    }
  }
  return out;
}

void export_corpora(const ExperimentConfig& cfg, const std::string& dir) {
  data::SynthConfig sc = cfg.synth;
  sc.seed = cfg.data_seed();
  const auto synth = data::synth_corpus(sc);
  fs::create_directories(dir);
  const fs::path d(dir);
  data::save_corpus((d / kSourceTrainFile).string(), synth.source_train);
  data::save_corpus((d / kTargetAdaptFile).string(), synth.target_adapt);
  data::save_corpus((d / kTargetTestFile).string(), synth.target_test);
  data::save_corpus((d / kSourceTestFile).string(), synth.source_test);
}

void run(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  const fs::path out(out_dir.empty() ? "." : out_dir);
  fs::create_directories(out);
  if (cfg.write_corpora) {
    export_corpora(cfg, (out / "corpora").string());
    log << "wrote corpora to " << (out / "corpora").string() << '\n';
  }

  const auto source_model = [&](const PreparedData& d) {
    if (!cfg.source_model.empty()) {
      log << "loading source model " << cfg.source_model << '\n';
      return nn::load_mlp(cfg.source_model);
    }
    log << "pretraining source model (" << cfg.pretrain_epochs << " epochs)\n";
    return pretrain_source(cfg, d.source_train).source_dnn;
  };

  switch (cfg.mode) {
    case Mode::kPretrain: {
      const auto d = prepare_data(cfg, true);
      auto pre = pretrain_source(cfg, d.source_train);
      nn::save_mlp((out / "source_dnn.mlp").string(), pre.source_dnn);
      std::vector<std::pair<std::string, CorpusEval>> rows{
          {"unadapted", evaluate(pre.source_dnn, d.source_test, "source_test", cfg.eval_batch)},
          {"unadapted", evaluate(pre.source_dnn, d.target_test, "target_test", cfg.eval_batch)}};
      write_text(out / "report.csv", report_csv(rows));
      write_text(out / "confusion.csv", confusion_csv(rows));
      write_text(out / "trace.csv", trace_csv(pre.trace));
      for (const auto& [sys, ev] : rows) {
        log << sys << " " << ev.name << " frame error " << ev.frame_error_rate << '\n';
      }
      break;
    }
    case Mode::kAdaptGrl:
    case Mode::kAdaptDsn: {
      // Adaptation never materializes target labels.
      const auto d = prepare_data(cfg, false);
      const Mlp source = source_model(d);
      auto res = cfg.mode == Mode::kAdaptGrl ? adapt_grl(cfg, source, d.source_train, d.target_adapt)
                                             : adapt_dsn(cfg, source, d.source_train, d.target_adapt);
      model::save_model((out / "model.dsn").string(), res.model);
      std::vector<std::pair<std::string, CorpusEval>> rows{
          {"unadapted", evaluate(source, d.source_test, "source_test", cfg.eval_batch)},
          {"adapted", evaluate(res.model.m_c, res.model.m_y, d.source_test, "source_test",
                               cfg.eval_batch)}};
      write_text(out / "report.csv", report_csv(rows));
      write_text(out / "trace.csv", trace_csv(res.trace));
      const auto& last = res.trace.back();
      log << to_string(cfg.mode) << " done: loss_total " << last.loss_total << ", source_test "
          << rows[1].second.frame_error_rate << '\n';
      break;
    }
    case Mode::kEvaluate: {
      const auto d = prepare_data(cfg, true);
      std::vector<std::pair<std::string, CorpusEval>> rows;
      const bool is_dsn = fs::path(cfg.model).extension() == ".dsn";
      if (is_dsn) {
        const auto m = model::load_model(cfg.model);
        rows.emplace_back("model", evaluate(m.m_c, m.m_y, d.source_test, "source_test",
                                            cfg.eval_batch, cfg.jobs));
        rows.emplace_back("model", evaluate(m.m_c, m.m_y, d.target_test, "target_test",
                                            cfg.eval_batch, cfg.jobs));
      } else {
        const Mlp net = nn::load_mlp(cfg.model);
        rows.emplace_back("model", evaluate(net, d.source_test, "source_test", cfg.eval_batch,
                                            cfg.jobs));
        rows.emplace_back("model", evaluate(net, d.target_test, "target_test", cfg.eval_batch,
                                            cfg.jobs));
      }
      write_text(out / "report.csv", report_csv(rows));
      write_text(out / "confusion.csv", confusion_csv(rows));
      for (const auto& [sys, ev] : rows) log << ev.name << " frame error " << ev.frame_error_rate << '\n';
      break;
    }
    case Mode::kSweep: {
      const auto d = prepare_data(cfg, true);
      const Mlp source = source_model(d);
      auto res = sweep(cfg, source, d, cfg.sweep_n_h, cfg.sweep_alpha);
      const fs::path cells = out / "cells";
      fs::create_directories(cells);
      for (const auto& row : res.grid) {
        for (const auto& cell : row) {
          std::string body = "n_h,alpha,target_error,failure\n" + std::to_string(cell.n_h) + "," +
                             format_double(cell.alpha) + "," +
                             (std::isfinite(cell.target_error) ? format_double(cell.target_error)
                                                               : std::string("nan")) +
                             "," + cell.failure + "\n";
          write_text(cells / ("nh" + std::to_string(cell.n_h) + "_alpha" +
                              format_double(cell.alpha) + ".csv"),
                     body);
          if (!cell.failure.empty()) {
            log << "cell n_h=" << cell.n_h << " alpha=" << cell.alpha << " failed: " << cell.failure
                << '\n';
          }
        }
      }
      write_text(out / "sweep.csv", res.to_csv());
      log << res.to_csv();
      break;
    }
  }
}

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const DivergenceError*>(&e) != nullptr) return kExitDivergence;
  return kExitData;
}

}  // namespace dsn::pipeline
