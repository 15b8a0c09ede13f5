#include "dsn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "dsn/error.hpp"
#include "dsn/rng.hpp"
#include "dsn/text_io.hpp"

namespace dsn::data {

namespace {

enum Stream : std::uint64_t {
  kMeans = 1,
  kChannel = 2,
  kSourceTrain = 3,
  kTargetAdapt = 4,
  kTargetTest = 5,
  kSourceTest = 6,
};

constexpr std::size_t kMinRun = 3;
constexpr std::size_t kMaxRun = 8;

std::string utt_name(const char* prefix, std::size_t u) {
  std::string digits = std::to_string(u);
  if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
  return std::string(prefix) + "-u" + digits;
}

// channel == nullptr for the source law.
Corpus generate(const SynthConfig& cfg, const std::vector<std::vector<double>>& means,
                const Matrix* channel, const char* prefix, Domain domain, bool keep_labels,
                Rng rng) {
  Corpus c;
  c.dim = cfg.base_dim;
  c.records.reserve(cfg.utterances_per_domain * cfg.frames_per_utterance);
  const std::size_t d = cfg.base_dim;
  std::vector<double> clean(d);
  for (std::size_t u = 0; u < cfg.utterances_per_domain; ++u) {
    const std::string id = utt_name(prefix, u);
    std::size_t run_left = 0;
    int label = 0;
    for (std::size_t t = 0; t < cfg.frames_per_utterance; ++t) {
      if (run_left == 0) {
        run_left = kMinRun + static_cast<std::size_t>(rng.below(kMaxRun - kMinRun + 1));
        label = static_cast<int>(rng.below(cfg.num_classes));
      }
      --run_left;
      const auto& mu = means[static_cast<std::size_t>(label)];
      for (std::size_t j = 0; j < d; ++j) clean[j] = mu[j] + rng.normal();
      FrameRecord rec;
      rec.utterance_id = id;
      rec.frame_index = t;
      rec.domain = domain;
      if (keep_labels) rec.label = label;
      rec.features.resize(d);
      if (channel == nullptr) {
        rec.features = clean;
      } else {
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += (*channel)(i, j) * clean[j];
          rec.features[i] = acc;
        }
        for (std::size_t i = 0; i < d; ++i) rec.features[i] += cfg.noise_std * rng.normal();
      }
      c.records.push_back(std::move(rec));
    }
  }
  return c;
}

void write_record(std::string& buf, const FrameRecord& r) {
  buf += r.utterance_id;
  buf += ',';
  buf += std::to_string(r.frame_index);
  buf += r.domain == Domain::kSource ? ",src," : ",tgt,";
  buf += r.label ? std::to_string(*r.label) : std::string("-1");
  for (double v : r.features) {
    buf += ',';
    append_double(buf, v);
  }
  buf += '\n';
}

Corpus read_impl(std::istream& in, bool read_labels) {
  LineReader reader(in);
  const std::string header = reader.expect("dsn-corpus header");
  const auto h = split_ws(header);
  Corpus c;
  std::size_t spliced = 0;
  if (h.size() != 4 || h[0] != "dsn-corpus" || h[1] != "v1" || h[2].substr(0, 4) != "dim=" ||
      h[3].substr(0, 8) != "spliced=" || !parse_size(h[2].substr(4), c.dim) ||
      !parse_size(h[3].substr(8), spliced) || spliced > 1 || c.dim == 0) {
    reader.fail("expected 'dsn-corpus v1 dim=<D> spliced=<0|1>' header");
  }
  c.spliced = spliced == 1;
  std::string line;
  while (reader.next(line)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4 + c.dim) {
      reader.fail("record has " + std::to_string(f.size()) + " fields, expected " +
                  std::to_string(4 + c.dim));
    }
    FrameRecord r;
    r.utterance_id = std::string(trim(f[0]));
    if (r.utterance_id.empty()) reader.fail("empty utterance id");
    if (!parse_size(f[1], r.frame_index)) reader.fail("bad frame index '" + std::string(f[1]) + "'");
    const auto dom = trim(f[2]);
    if (dom == "src") r.domain = Domain::kSource;
    else if (dom == "tgt") r.domain = Domain::kTarget;
    else reader.fail("bad domain '" + std::string(dom) + "'");
    if (read_labels) {
      long long label = 0;
      if (!parse_int(f[3], label) || label < -1 || label > std::numeric_limits<int>::max()) {
        reader.fail("bad label '" + std::string(f[3]) + "'");
      }
      if (label >= 0) r.label = static_cast<int>(label);
    }
    r.features.resize(c.dim);
    for (std::size_t j = 0; j < c.dim; ++j) {
      if (!parse_double(f[4 + j], r.features[j]) || !std::isfinite(r.features[j])) {
        reader.fail("bad feature value '" + std::string(f[4 + j]) + "'");
      }
    }
    c.records.push_back(std::move(r));
  }
  return c;
}

}  // namespace

bool Corpus::labeled() const noexcept {
  for (const auto& r : records) {
    if (!r.label) return false;
  }
  return !records.empty();
}

Matrix Corpus::features() const {
  Matrix m(records.size(), dim);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& f = records[i].features;
    if (f.size() != dim) throw ShapeError("record feature length differs from corpus dim");
    std::copy(f.begin(), f.end(), m.row(i).begin());
  }
  return m;
}

std::vector<int> Corpus::labels() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.label) throw DataError("corpus frame " + r.utterance_id + ":" +
                                  std::to_string(r.frame_index) + " has no label");
    out.push_back(*r.label);
  }
  return out;
}

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (base_dim < 1 || utterances_per_domain < 1 || frames_per_utterance < 1) {
    throw ConfigError("synthetic corpus counts must all be >= 1");
  }
  if (!std::isfinite(noise_std) || noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  if (!std::isfinite(class_separation) || !std::isfinite(channel_matrix_scale)) {
    throw ConfigError("class_separation and channel_matrix_scale must be finite");
  }
}

std::vector<std::vector<double>> class_means(const SynthConfig& cfg) {
  const std::size_t q = cfg.num_classes;
  const std::size_t d = cfg.base_dim;
  const double radius = std::sqrt(2.0) * cfg.class_separation;
  std::vector<std::vector<double>> means(q, std::vector<double>(d, 0.0));
  if (q <= 2 * d) {
    for (std::size_t c = 0; c < q; ++c) means[c][c % d] = c < d ? radius : -radius;
    return means;
  }
  Rng rng = Rng::stream(cfg.seed, kMeans);
  for (auto& m : means) {
    double norm = 0.0;
    for (double& v : m) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : m) v *= radius / norm;
  }
  return means;
}

SynthCorpora synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  const auto means = class_means(cfg);
  const std::size_t d = cfg.base_dim;
  Matrix channel(d, d);
  Rng ch = Rng::stream(cfg.seed, kChannel);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      channel(i, j) = (i == j ? 1.0 : 0.0) + cfg.channel_matrix_scale * ch.normal();
    }
  }
  SynthCorpora out;
  out.source_train = generate(cfg, means, nullptr, "src-train", Domain::kSource, true,
                              Rng::stream(cfg.seed, kSourceTrain));
  out.target_adapt = generate(cfg, means, &channel, "tgt-adapt", Domain::kTarget, false,
                              Rng::stream(cfg.seed, kTargetAdapt));
  out.target_test = generate(cfg, means, &channel, "tgt-test", Domain::kTarget, true,
                             Rng::stream(cfg.seed, kTargetTest));
  out.source_test = generate(cfg, means, nullptr, "src-test", Domain::kSource, true,
                             Rng::stream(cfg.seed, kSourceTest));
  return out;
}

Corpus splice(const Corpus& corpus, std::size_t left, std::size_t right) {
  if (corpus.spliced) throw ContractError("corpus is already spliced");
  const std::size_t d = corpus.dim;
  const std::size_t width = left + 1 + right;
  Corpus out;
  out.dim = d * width;
  out.spliced = true;
  out.records.reserve(corpus.records.size());
  const auto& recs = corpus.records;
  std::size_t begin = 0;
  while (begin < recs.size()) {
    std::size_t end = begin + 1;
    while (end < recs.size() && recs[end].utterance_id == recs[begin].utterance_id) ++end;
    const std::size_t n = end - begin;
    for (std::size_t t = 0; t < n; ++t) {
      FrameRecord r = recs[begin + t];
      r.features.clear();
      r.features.reserve(out.dim);
      for (std::size_t o = 0; o < width; ++o) {
        // source index t - left + o, clamped to [0, n)
        const std::size_t raw = t + o;
        std::size_t src = raw < left ? 0 : raw - left;
        if (src >= n) src = n - 1;
        const auto& f = recs[begin + src].features;
        if (f.size() != d) throw ShapeError("record feature length differs from corpus dim");
        r.features.insert(r.features.end(), f.begin(), f.end());
      }
      out.records.push_back(std::move(r));
    }
    begin = end;
  }
  return out;
}

NormStats compute_stats(const std::vector<const Corpus*>& stats_from) {
  std::size_t n = 0;
  std::size_t d = 0;
  for (const Corpus* c : stats_from) {
    if (c->records.empty()) continue;
    if (d == 0) d = c->dim;
    if (c->dim != d) throw ShapeError("cmvn: corpora have different feature dims");
    n += c->records.size();
  }
  if (n == 0) throw ContractError("cmvn: statistics corpus is empty");
  NormStats s;
  s.mean.assign(d, 0.0);
  s.variance.assign(d, 0.0);
  for (const Corpus* c : stats_from) {
    for (const auto& r : c->records) {
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += r.features[j];
    }
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (const Corpus* c : stats_from) {
    for (const auto& r : c->records) {
      for (std::size_t j = 0; j < d; ++j) {
        const double dev = r.features[j] - s.mean[j];
        s.variance[j] += dev * dev;
      }
    }
  }
  for (double& v : s.variance) v = std::max(v / static_cast<double>(n), kVarianceFloor);
  return s;
}

Corpus apply_stats(const Corpus& corpus, const NormStats& stats) {
  if (stats.mean.size() != corpus.dim || stats.variance.size() != corpus.dim) {
    throw ShapeError("cmvn: stats dim does not match corpus dim");
  }
  std::vector<double> inv_std(corpus.dim);
  for (std::size_t j = 0; j < corpus.dim; ++j) inv_std[j] = 1.0 / std::sqrt(stats.variance[j]);
  Corpus out = corpus;
  for (auto& r : out.records) {
    for (std::size_t j = 0; j < corpus.dim; ++j) {
      r.features[j] = (r.features[j] - stats.mean[j]) * inv_std[j];
    }
  }
  out.stats = stats;
  return out;
}

CmvnResult cmvn(const std::vector<const Corpus*>& stats_from,
                const std::vector<const Corpus*>& apply_to) {
  CmvnResult res;
  res.stats = compute_stats(stats_from);
  res.normalized.reserve(apply_to.size());
  for (const Corpus* c : apply_to) res.normalized.push_back(apply_stats(*c, res.stats));
  return res;
}

double nearest_class_mean_error(const Corpus& train, const Corpus& test) {
  if (train.dim != test.dim) throw ShapeError("nearest_class_mean_error: dim mismatch");
  const auto train_labels = train.labels();
  const auto test_labels = test.labels();
  if (test_labels.empty()) throw ContractError("nearest_class_mean_error: empty test corpus");
  int q = 0;
  for (int y : train_labels) q = std::max(q, y + 1);
  const std::size_t d = train.dim;
  std::vector<std::vector<double>> means(static_cast<std::size_t>(q), std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(static_cast<std::size_t>(q), 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto y = static_cast<std::size_t>(train_labels[i]);
    ++counts[y];
    for (std::size_t j = 0; j < d; ++j) means[y][j] += train.records[i].features[j];
  }
  for (std::size_t c = 0; c < means.size(); ++c) {
    if (counts[c] == 0) continue;
    for (double& v : means[c]) v /= static_cast<double>(counts[c]);
  }
  std::size_t errors = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& x = test.records[i].features;
    int best = -1;
    double best_dist = 0.0;
    for (std::size_t c = 0; c < means.size(); ++c) {
      if (counts[c] == 0) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[j] - means[c][j];
        dist += diff * diff;
      }
      if (best < 0 || dist < best_dist) {
        best = static_cast<int>(c);
        best_dist = dist;
      }
    }
    if (best != test_labels[i]) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(test.size());
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  std::string buf = "dsn-corpus v1 dim=" + std::to_string(corpus.dim) +
                    " spliced=" + (corpus.spliced ? "1" : "0") + "\n";
  for (const auto& r : corpus.records) {
    if (r.features.size() != corpus.dim) throw ShapeError("record feature length differs from dim");
    write_record(buf, r);
  }
  out << buf;
}

Corpus read_corpus(std::istream& in) { return read_impl(in, true); }
Corpus read_corpus_unlabeled(std::istream& in) { return read_impl(in, false); }

void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_corpus(out, corpus);
  if (!out) throw DataError("failed writing '" + path + "'");
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_corpus(in);
}

Corpus load_corpus_unlabeled(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_corpus_unlabeled(in);
}

}  // namespace dsn::data
