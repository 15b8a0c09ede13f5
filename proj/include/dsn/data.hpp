#pragma once

// Synthetic clean/noisy corpora, context splicing, global mean/variance
// normalization, and the "dsn-corpus v1" text format.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dsn/matrix.hpp"
#include "dsn/model.hpp"

namespace dsn::data {

using model::Domain;

struct FrameRecord {
  std::string utterance_id;
  std::size_t frame_index = 0;
  Domain domain = Domain::kSource;
  std::optional<int> label;
  std::vector<double> features;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> variance;  // floored

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kVarianceFloor = 1e-8;

/// Frames ordered by utterance, then by frame index. Frames of one utterance
/// are contiguous.
struct Corpus {
  std::vector<FrameRecord> records;
  std::size_t dim = 0;  // current feature length
  bool spliced = false;
  std::optional<NormStats> stats;

  std::size_t size() const noexcept { return records.size(); }
  bool labeled() const noexcept;
  Matrix features() const;
  /// Throws DataError when any record lacks a label.
  std::vector<int> labels() const;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct SynthConfig {
  std::size_t num_classes = 10;
  std::size_t base_dim = 8;
  std::size_t utterances_per_domain = 100;
  std::size_t frames_per_utterance = 100;
  double class_separation = 3.0;
  double channel_matrix_scale = 0.3;
  double noise_std = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthCorpora {
  Corpus source_train;  // labeled
  Corpus target_adapt;  // labels stripped
  Corpus target_test;   // labeled, evaluation only
  Corpus source_test;   // labeled
};

/// Class means for the configuration. With Q <= D they are
/// sqrt(2)*sep*e_q; with Q <= 2D the remaining classes take -sqrt(2)*sep*e_j;
/// beyond that, random unit directions scaled to sqrt(2)*sep. Every mean sits
/// at distance >= sep from each pairwise decision boundary of its neighbours.
std::vector<std::vector<double>> class_means(const SynthConfig& cfg);

/// Source frames: mean(label) + N(0, I). Target frames: A * source_draw +
/// noise_std * N(0, I) with A = I + channel_matrix_scale * R, R standard normal
/// and fixed per seed. Labels come in runs of 3-8 frames inside an utterance.
SynthCorpora synth_corpus(const SynthConfig& cfg);

/// Each frame becomes [f(t-left) .. f(t) .. f(t+right)] within its utterance,
/// repeating the boundary frame at the edges. Throws ContractError if already spliced.
Corpus splice(const Corpus& corpus, std::size_t left, std::size_t right);

/// Per-dimension mean and (population) variance over the union of `stats_from`,
/// variance floored at kVarianceFloor. Throws ContractError when empty.
NormStats compute_stats(const std::vector<const Corpus*>& stats_from);
/// (x - mean) / sqrt(variance), recording the stats on the returned corpus.
Corpus apply_stats(const Corpus& corpus, const NormStats& stats);

struct CmvnResult {
  NormStats stats;
  std::vector<Corpus> normalized;  // same order as `apply_to`
};
CmvnResult cmvn(const std::vector<const Corpus*>& stats_from,
                const std::vector<const Corpus*>& apply_to);

/// Nearest class-mean classifier: means estimated on `train`, error on `test`.
double nearest_class_mean_error(const Corpus& train, const Corpus& test);

void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
/// Reads every field except the label column, which is skipped unparsed.
Corpus read_corpus_unlabeled(std::istream& in);
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);
Corpus load_corpus_unlabeled(const std::string& path);

}  // namespace dsn::data
