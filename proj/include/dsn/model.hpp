#pragma once

// Domain separation network: shared extractor, senone classifier, adversarial
// domain classifier (behind a gradient reversal layer), per-domain private
// extractors and a reconstructor, trained jointly by SGD.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsn/matrix.hpp"
#include "dsn/nn.hpp"
#include "dsn/rng.hpp"

namespace dsn::model {

/// Softmax index of each domain; the 1-based label is index + 1.
enum class Domain { kSource = 0, kTarget = 1 };

constexpr int domain_index(Domain d) noexcept { return static_cast<int>(d); }
constexpr int domain_label(Domain d) noexcept { return static_cast<int>(d) + 1; }

struct Coefficients {
  double alpha = 1.0;  // gradient reversal strength
  double beta = 0.25;  // difference loss weight
  double gamma = 0.25;  // reconstruction loss weight

  void validate() const;

  friend bool operator==(const Coefficients&, const Coefficients&) = default;
};

/// The six sub-networks. Private extractors and reconstructor are absent for a
/// plain gradient-reversal model.
struct DsnModel {
  nn::Mlp m_c;  // shared component extractor
  nn::Mlp m_y;  // senone classifier
  nn::Mlp m_d;  // domain classifier
  std::optional<nn::Mlp> m_p_s;  // source private extractor
  std::optional<nn::Mlp> m_p_t;  // target private extractor
  std::optional<nn::Mlp> m_r;    // reconstructor
  Coefficients coef;
  std::size_t n_h = 0;

  bool has_private() const noexcept { return m_p_s.has_value(); }
  std::size_t shared_dim() const { return m_c.out_dim(); }
  std::size_t num_classes() const { return m_y.out_dim(); }
  std::size_t feature_dim() const { return m_c.in_dim(); }

  /// Throws ConfigError on any broken dimension/activation invariant.
  void validate() const;

  friend bool operator==(const DsnModel&, const DsnModel&) = default;
};

struct DsnBatch {
  Matrix source_x;
  std::vector<int> source_y;
  Matrix target_x;

  void validate(const DsnModel& model) const;
};

struct StepTrace {
  double loss_senone = 0.0;
  double loss_domain = 0.0;
  double loss_diff = 0.0;
  double loss_recon = 0.0;
  double loss_total = 0.0;
  double domain_accuracy = 0.0;

  bool all_finite() const noexcept;
};

/// Per-network gradients; an absent entry means the term does not reach that network.
struct DsnGradients {
  std::optional<nn::Gradients> m_c, m_y, m_d, m_p_s, m_p_t, m_r;
};

struct LossTerm {
  double value = 0.0;
  DsnGradients grads;
};

/// Hidden widths of the freshly initialized sub-networks.
struct Architecture {
  std::vector<std::size_t> domain_hidden{32};
  std::vector<std::size_t> private_hidden{32};
  std::vector<std::size_t> recon_hidden{32};
};

/// Splits a pretrained classifier after its first `n_h` hidden layers.
/// Throws ConfigError unless 1 <= n_h <= hidden layer count.
std::pair<nn::Mlp, nn::Mlp> split_pretrained(const nn::Mlp& source_dnn, std::size_t n_h);

/// Assembles a model from a pretrained classifier. `domain_rng` initializes m_d;
/// `private_rng` initializes m_p_s, m_p_t, m_r in that order (only when
/// `with_private`).
DsnModel build_model(const nn::Mlp& source_dnn, std::size_t n_h, const Coefficients& coef,
                     const Architecture& arch, bool with_private, Rng& domain_rng,
                     Rng& private_rng);

Matrix senone_posteriors(const DsnModel& model, const Matrix& x);
Matrix domain_posteriors(const DsnModel& model, const Matrix& x);
/// m_r([m_c(x), m_p(x)]) with the domain's private extractor.
Matrix reconstruct(const DsnModel& model, const Matrix& x, Domain domain);

LossTerm loss_senone(const DsnModel& model, const Matrix& source_x,
                     std::span<const int> source_y);

enum class DomainRoute {
  kReversed,  // shared extractor receives -alpha * dL (through the GRL)
  kPlain,     // GRL removed; shared extractor receives +dL
};

/// Mean cross-entropy of domain classification over all source and target rows.
LossTerm loss_domain(const DsnModel& model, const Matrix& source_x, const Matrix& target_x,
                     DomainRoute route = DomainRoute::kReversed);

struct DifferenceTerm {
  double value = 0.0;
  Matrix shared_grad;
  Matrix private_grad;
};

/// ||(1/B) S^T P||_F^2 for shared rows S and private rows P of one domain.
DifferenceTerm difference_term(const Matrix& shared, const Matrix& priv);

LossTerm loss_diff(const DsnModel& model, const Matrix& source_x, const Matrix& target_x);
/// Per-domain mean squared reconstruction error, summed over the two domains.
LossTerm loss_recon(const DsnModel& model, const Matrix& source_x, const Matrix& target_x);

struct TotalLoss {
  StepTrace trace;
  DsnGradients grads;  // routed: every present network has an entry
};

/// L_senone + L_domain + beta L_diff + gamma L_recon, with gradients routed
/// per network:
///   m_c:        dL_senone - alpha dL_domain + beta dL_diff + gamma dL_recon
///   m_y:        dL_senone
///   m_d:        dL_domain
///   m_p_s/m_p_t: beta dL_diff + gamma dL_recon
///   m_r:        dL_recon
/// Terms whose coefficient is exactly zero are not added at all.
TotalLoss loss_total(const DsnModel& model, const DsnBatch& batch);

/// One joint SGD step, in place. Throws DivergenceError (model untouched) on
/// non-finite losses or gradients.
StepTrace dsn_step(DsnModel& model, const DsnBatch& batch, double mu);

/// Shared extractor and senone classifier: the adapted classifier.
std::pair<nn::Mlp, nn::Mlp> adapted_model(const DsnModel& model);

// "dsn-model v1": manifest lines, then each present sub-network in mlp format.
void write_model(std::ostream& out, const DsnModel& model);
DsnModel read_model(std::istream& in);
void save_model(const std::string& path, const DsnModel& model);
DsnModel load_model(const std::string& path);

}  // namespace dsn::model
