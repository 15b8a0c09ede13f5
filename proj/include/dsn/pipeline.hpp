#pragma once

// Experiment orchestration: source pretraining, GRL / DSN adaptation,
// frame-error evaluation and the N_h x alpha sweep.

#include <cstddef>
#include <cstdint>
#include <exception>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dsn/data.hpp"
#include "dsn/model.hpp"
#include "dsn/nn.hpp"

namespace dsn::pipeline {

enum class Mode { kPretrain, kAdaptGrl, kAdaptDsn, kEvaluate, kSweep };

std::string_view to_string(Mode m) noexcept;
Mode parse_mode(std::string_view name);

struct ExperimentConfig {
  Mode mode = Mode::kAdaptDsn;
  data::SynthConfig synth;
  bool data_seed_set = false;  // otherwise synth.seed follows `seed`
  std::size_t splice_left = 2;
  std::size_t splice_right = 2;

  std::vector<std::size_t> source_hidden{32, 32, 32};
  nn::Activation source_activation = nn::Activation::kSigmoid;
  model::Architecture arch;

  std::size_t n_h = 3;
  model::Coefficients coef;
  double mu = 0.1;            // adaptation learning rate
  double pretrain_mu = 0.5;
  std::size_t pretrain_epochs = 30;
  std::size_t epochs = 30;
  std::size_t batch = 128;
  std::uint64_t seed = 1;

  std::vector<std::size_t> sweep_n_h{1, 2, 3};
  std::vector<double> sweep_alpha{1.0, 4.0, 8.0};
  std::size_t jobs = 1;
  std::size_t eval_batch = 1024;

  std::string source_model;  // pretrained classifier to adapt (skips pretraining)
  std::string model;         // model to evaluate (.dsn or .mlp)
  std::string corpus_dir;    // read corpora from files instead of synthesizing
  bool write_corpora = false;  // also write the raw synthetic corpora to <out>/corpora

  /// Throws ConfigError on any inconsistent or out-of-range value.
  void validate() const;
  /// Applies `key = value`; throws ConfigError for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  /// Seed used by the synthetic generator.
  std::uint64_t data_seed() const noexcept { return data_seed_set ? synth.seed : seed; }
};

/// Plain-text `key = value` lines, `#` starts a comment.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);

/// Spliced, normalized corpora used by every mode.
struct PreparedData {
  data::Corpus source_train;
  data::Corpus target_adapt;  // never carries labels
  data::Corpus source_test;
  data::Corpus target_test;   // empty unless requested
  data::NormStats stats;
};

/// Synthesizes (or reads from `corpus_dir`) and splices/normalizes the corpora.
/// Normalization statistics pool source_train and target_adapt. Target labels
/// are only materialized when `with_target_test`; the adaptation corpus is
/// stripped (synthetic) or read through the unlabeled reader (files).
PreparedData prepare_data(const ExperimentConfig& cfg, bool with_target_test);

/// File names used inside `corpus_dir`.
inline constexpr const char* kSourceTrainFile = "source_train.corpus";
inline constexpr const char* kTargetAdaptFile = "target_adapt.corpus";
inline constexpr const char* kTargetTestFile = "target_test.corpus";
inline constexpr const char* kSourceTestFile = "source_test.corpus";

/// Writes the four raw (unspliced, unnormalized) synthetic corpora into `dir`
/// under the file names above.
void export_corpora(const ExperimentConfig& cfg, const std::string& dir);

struct EpochTrace {
  std::size_t epoch = 0;  // 1-based
  double loss_senone = 0.0;
  double loss_domain = 0.0;
  double loss_diff = 0.0;
  double loss_recon = 0.0;
  double loss_total = 0.0;
  double domain_accuracy = 0.0;

  friend bool operator==(const EpochTrace&, const EpochTrace&) = default;
};

struct CorpusEval {
  std::string name;
  model::Domain domain = model::Domain::kSource;
  std::size_t frames = 0;
  std::size_t errors = 0;
  double frame_error_rate = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [reference][predicted]

  friend bool operator==(const CorpusEval&, const CorpusEval&) = default;
};

struct EvalReport {
  std::vector<CorpusEval> corpora;
  std::vector<EpochTrace> trace;
};

/// Frame error rate of argmax(m_y(m_c(x))) against the labels; ties go to the
/// lowest class index. Rows are processed in chunks of `batch_size` spread over
/// `threads` workers; the result does not depend on either.
CorpusEval evaluate(const nn::Mlp& m_c, const nn::Mlp& m_y, const data::Corpus& corpus,
                    std::string name, std::size_t batch_size = 1024, std::size_t threads = 1);
CorpusEval evaluate(const nn::Mlp& classifier, const data::Corpus& corpus, std::string name,
                    std::size_t batch_size = 1024, std::size_t threads = 1);

struct PretrainResult {
  nn::Mlp source_dnn;
  std::vector<EpochTrace> trace;
};

/// Cross-entropy SGD on the labeled source corpus.
PretrainResult pretrain_source(const ExperimentConfig& cfg, const data::Corpus& source_train);

struct AdaptResult {
  model::DsnModel model;
  std::vector<EpochTrace> trace;
};

/// GRL baseline: beta = gamma = 0, no private extractors or reconstructor.
/// `target_adapt` contributes features only.
AdaptResult adapt_grl(const ExperimentConfig& cfg, const nn::Mlp& source_dnn,
                      const data::Corpus& source_train, const data::Corpus& target_adapt);
/// Full domain separation network.
AdaptResult adapt_dsn(const ExperimentConfig& cfg, const nn::Mlp& source_dnn,
                      const data::Corpus& source_train, const data::Corpus& target_adapt);

struct SweepCell {
  std::size_t n_h = 0;
  double alpha = 0.0;
  double target_error = 0.0;  // NaN when the cell failed
  std::string failure;
};

struct SweepResult {
  std::vector<std::size_t> n_h;
  std::vector<double> alpha;
  std::vector<std::vector<SweepCell>> grid;  // [n_h][alpha]
  std::vector<double> row_average;           // over finite cells

  /// Table with rows per N_h, one column per alpha and a final avg column.
  std::string to_csv() const;
};

/// One adapt_dsn run per (n_h, alpha) cell on identical data and seed.
SweepResult sweep(const ExperimentConfig& cfg, const nn::Mlp& source_dnn,
                  const PreparedData& data, const std::vector<std::size_t>& n_h_list,
                  const std::vector<double>& alpha_list);

std::string trace_csv(const std::vector<EpochTrace>& trace);
/// `system,corpus,domain,frames,errors,frame_error_rate` rows.
std::string report_csv(const std::vector<std::pair<std::string, CorpusEval>>& rows);
std::string confusion_csv(const std::vector<std::pair<std::string, CorpusEval>>& rows);

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitData = 2,
  kExitDivergence = 3,
};

/// Runs `cfg.mode`, writing report.csv / trace.csv / model files into `out_dir`.
/// Errors propagate as exceptions; see exit_code_for().
void run(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log);

/// Maps the library's exception hierarchy onto ExitCode.
int exit_code_for(const std::exception& e) noexcept;

}  // namespace dsn::pipeline
