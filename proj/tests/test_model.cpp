#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <utility>
#include <vector>

#include "dsn/error.hpp"
#include "dsn/model.hpp"
#include "dsn/nn.hpp"
#include "dsn/rng.hpp"
#include "test_util.hpp"

namespace dsn::model {
namespace {

using nn::Activation;
using nn::LayerSpec;
using nn::Mlp;
using test::random_matrix;

constexpr std::size_t kFeat = 4;
constexpr std::size_t kClasses = 3;

Mlp source_net(Rng& rng, std::size_t hidden_layers = 3, std::size_t width = 5) {
  std::vector<LayerSpec> spec;
  std::size_t in = kFeat;
  for (std::size_t k = 0; k < hidden_layers; ++k) {
    spec.push_back({in, width, Activation::kSigmoid});
    in = width;
  }
  spec.push_back({in, kClasses, Activation::kSoftmax});
  return nn::init_mlp(spec, rng);
}

void randomize_biases(Mlp& net, Rng& rng) {
  for (auto& l : net.mutable_layers()) {
    for (double& b : l.bias) b = rng.uniform(-0.3, 0.3);
  }
}

DsnModel tiny_model(std::uint64_t seed, Coefficients coef = {}, bool with_private = true,
                    std::size_t n_h = 2) {
  Rng rng(seed);
  auto src = source_net(rng);
  randomize_biases(src, rng);
  Architecture arch{{6}, {6}, {7}};
  Rng d_rng = Rng::stream(seed, 13);
  Rng p_rng = Rng::stream(seed, 14);
  auto m = build_model(src, n_h, coef, arch, with_private, d_rng, p_rng);
  randomize_biases(m.m_d, rng);
  if (m.has_private()) {
    randomize_biases(*m.m_p_s, rng);
    randomize_biases(*m.m_p_t, rng);
    randomize_biases(*m.m_r, rng);
  }
  return m;
}

DsnBatch tiny_batch(std::uint64_t seed, std::size_t bs = 6, std::size_t bt = 5) {
  Rng rng(seed ^ 0xABCDEFULL);
  DsnBatch b;
  b.source_x = random_matrix(bs, kFeat, rng);
  b.target_x = random_matrix(bt, kFeat, rng, 1.5);
  for (std::size_t i = 0; i < bs; ++i) b.source_y.push_back(static_cast<int>(rng.below(kClasses)));
  return b;
}

void zero_last_layer(Mlp& net) {
  auto& last = net.mutable_layers().back();
  for (double& w : last.weights.values()) w = 0.0;
  for (double& b : last.bias) b = 0.0;
}

TEST(SplitPretrained, SplitsAfterNhHiddenLayers) {
  Rng rng(1);
  auto src = source_net(rng, 7, 4);
  auto [c7, y7] = split_pretrained(src, 7);
  EXPECT_EQ(c7.num_layers(), 7u);
  EXPECT_EQ(y7.num_layers(), 1u);
  auto [c3, y3] = split_pretrained(src, 3);
  EXPECT_EQ(c3.num_layers(), 3u);
  EXPECT_EQ(y3.num_layers(), 5u);
  EXPECT_THROW(split_pretrained(src, 0), ConfigError);
  EXPECT_THROW(split_pretrained(src, 8), ConfigError);
}

TEST(SplitPretrained, CompositionIsBitwiseTheOriginal) {
  Rng rng(2);
  auto src = source_net(rng, 4, 6);
  const auto x = random_matrix(9, kFeat, rng);
  const auto full = nn::predict(src, x);
  for (std::size_t n_h = 1; n_h <= 4; ++n_h) {
    auto [c, y] = split_pretrained(src, n_h);
    EXPECT_EQ(nn::predict(y, nn::predict(c, x)), full) << "n_h " << n_h;
  }
}

TEST(BuildModel, ArchitectureInvariants) {
  auto m = tiny_model(3);
  EXPECT_EQ(m.shared_dim(), 5u);
  EXPECT_EQ(m.num_classes(), kClasses);
  EXPECT_EQ(m.feature_dim(), kFeat);
  EXPECT_EQ(m.m_d.out_dim(), 2u);
  EXPECT_EQ(m.m_p_s->out_dim(), m.shared_dim());
  EXPECT_EQ(m.m_p_s->output_activation(), Activation::kSigmoid);
  EXPECT_EQ(m.m_r->in_dim(), 2 * m.shared_dim());
  EXPECT_EQ(m.m_r->out_dim(), kFeat);
  EXPECT_EQ(m.m_r->output_activation(), Activation::kLinear);
  EXPECT_FALSE(tiny_model(3, {}, false).has_private());
}

TEST(BuildModel, PosteriorsAreDistributions) {
  auto m = tiny_model(4);
  Rng rng(4);
  const auto x = random_matrix(8, kFeat, rng);
  for (const auto& p : {senone_posteriors(m, x), domain_posteriors(m, x)}) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(reconstruct(m, x, Domain::kTarget).cols(), kFeat);
  EXPECT_THROW(reconstruct(tiny_model(4, {}, false), x, Domain::kSource), ContractError);
}

TEST(Losses, UniformSenoneClassifierGivesLogQ) {
  Rng rng(5);
  Mlp src = nn::init_mlp(std::vector<LayerSpec>{{kFeat, 5, Activation::kSigmoid},
                                                {5, 10, Activation::kSigmoid},
                                                {10, 10, Activation::kSoftmax}},
                         rng);
  zero_last_layer(src);
  Rng d(1), p(2);
  auto m = build_model(src, 1, {}, Architecture{}, false, d, p);
  const auto x = random_matrix(4, kFeat, rng);
  const std::vector<int> y{0, 9, 3, 5};
  EXPECT_NEAR(loss_senone(m, x, y).value, std::log(10.0), 1e-12);
}

TEST(Losses, UniformDomainClassifierGivesLog2) {
  auto m = tiny_model(6);
  zero_last_layer(m.m_d);
  auto b = tiny_batch(6);
  EXPECT_NEAR(loss_domain(m, b.source_x, b.target_x).value, std::log(2.0), 1e-12);
}

TEST(Losses, DomainLossPenalizesConfidentMistakes) {
  auto m = tiny_model(7);
  auto b = tiny_batch(7);
  zero_last_layer(m.m_d);
  // Push every row towards the source label: loss exceeds ln 2.
  m.m_d.mutable_layers().back().bias = {4.0, -4.0};
  const double l = loss_domain(m, b.source_x, b.target_x).value;
  const double ps = std::exp(4.0) / (std::exp(4.0) + std::exp(-4.0));
  const double expected = -(6.0 * std::log(ps) + 5.0 * std::log(1.0 - ps)) / 11.0;
  EXPECT_NEAR(l, expected, 1e-12);
  EXPECT_GT(l, std::log(2.0));
}

TEST(DifferenceTerm, SingleSampleIsProductOfSquaredNorms) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_matrix(1, 5, rng);
    const auto p = random_matrix(1, 5, rng);
    const double expected = squared_frobenius(s) * squared_frobenius(p);
    EXPECT_NEAR(difference_term(s, p).value, expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(DifferenceTerm, CancellingPairIsExactlyZero) {
  Matrix s{{1.0, 0.0}, {1.0, 0.0}};
  Matrix p{{1.0, 0.0}, {-1.0, 0.0}};
  EXPECT_EQ(difference_term(s, p).value, 0.0);
}

TEST(DifferenceTerm, UncorrelatedComponentsGiveZero) {
  Matrix s{{1.0, 0.0}, {2.0, 0.0}};
  Matrix p{{0.0, 3.0}, {0.0, -1.5}};
  EXPECT_EQ(difference_term(s, p).value, 0.0);
}

TEST(DifferenceTerm, MatchesOuterProductOracle) {
  Rng rng(9);
  for (std::size_t rows : {2u, 7u, 32u}) {
    const auto s = random_matrix(rows, 4, rng);
    const auto p = random_matrix(rows, 6, rng);
    std::vector<double> c(4 * 6, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t a = 0; a < 4; ++a) {
        for (std::size_t b = 0; b < 6; ++b) c[a * 6 + b] += s(i, a) * p(i, b);
      }
    }
    double expected = 0.0;
    for (double v : c) expected += (v / static_cast<double>(rows)) * (v / static_cast<double>(rows));
    EXPECT_NEAR(difference_term(s, p).value, expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(DifferenceTerm, GradientsMatchFiniteDifferences) {
  Rng rng(10);
  const auto s = random_matrix(5, 3, rng);
  const auto p = random_matrix(5, 4, rng);
  auto term = difference_term(s, p);
  std::vector<double> params(s.values().begin(), s.values().end());
  params.insert(params.end(), p.values().begin(), p.values().end());
  std::vector<double> analytic(term.shared_grad.values().begin(), term.shared_grad.values().end());
  analytic.insert(analytic.end(), term.private_grad.values().begin(),
                  term.private_grad.values().end());
  const auto loss = [&](std::span<const double> v) {
    Matrix ss(5, 3, std::vector<double>(v.begin(), v.begin() + 15));
    Matrix pp(5, 4, std::vector<double>(v.begin() + 15, v.end()));
    return difference_term(ss, pp).value;
  };
  auto rep = nn::finite_diff_check(loss, params, analytic, 1e-6, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(DifferenceTerm, RejectsMismatchedBatches) {
  EXPECT_THROW(difference_term(Matrix(3, 2), Matrix(4, 2)), ShapeError);
}

TEST(Losses, ZeroReconstructorGivesMeanSquaredNorm) {
  auto m = tiny_model(11);
  zero_last_layer(*m.m_r);
  Rng rng(11);
  auto unit_rows = [&](std::size_t n) {
    auto x = random_matrix(n, kFeat, rng);
    for (std::size_t r = 0; r < n; ++r) {
      double norm = 0.0;
      for (double v : x.row(r)) norm += v * v;
      norm = std::sqrt(norm);
      for (double& v : x.row(r)) v /= norm;
    }
    return x;
  };
  EXPECT_NEAR(loss_recon(m, unit_rows(6), unit_rows(3)).value, 2.0, 1e-12);
}

TEST(Losses, ReconMatchesComposedForwardOracle) {
  auto m = tiny_model(12);
  auto b = tiny_batch(12);
  const auto rs = reconstruct(m, b.source_x, Domain::kSource);
  const auto rt = reconstruct(m, b.target_x, Domain::kTarget);
  EXPECT_NEAR(loss_recon(m, b.source_x, b.target_x).value,
              nn::mse_loss(rs, b.source_x).loss + nn::mse_loss(rt, b.target_x).loss, 1e-12);
}

TEST(LossTotal, ScalarIsSumOfTerms) {
  const Coefficients coef{0.7, 0.3, 0.6};
  auto m = tiny_model(13, coef);
  auto b = tiny_batch(13);
  const auto total = loss_total(m, b);
  const double senone = loss_senone(m, b.source_x, b.source_y).value;
  const double domain = loss_domain(m, b.source_x, b.target_x).value;
  const double diff = loss_diff(m, b.source_x, b.target_x).value;
  const double recon = loss_recon(m, b.source_x, b.target_x).value;
  EXPECT_NEAR(total.trace.loss_senone, senone, 1e-12);
  EXPECT_NEAR(total.trace.loss_domain, domain, 1e-12);
  EXPECT_NEAR(total.trace.loss_diff, diff, 1e-12);
  EXPECT_NEAR(total.trace.loss_recon, recon, 1e-12);
  EXPECT_NEAR(total.trace.loss_total, senone + domain + 0.3 * diff + 0.6 * recon, 1e-12);
}

TEST(LossTotal, ScalarDoesNotDependOnAlpha) {
  auto b = tiny_batch(14);
  auto m = tiny_model(14);
  std::vector<double> totals;
  for (double alpha : {0.0, 1.0, 8.0}) {
    m.coef.alpha = alpha;
    totals.push_back(loss_total(m, b).trace.loss_total);
  }
  EXPECT_EQ(totals[0], totals[1]);
  EXPECT_EQ(totals[1], totals[2]);
}

TEST(LossDomain, ReversedRouteIsMinusAlphaTimesPlain) {
  auto m = tiny_model(15, {2.5, 0.25, 0.25});
  auto b = tiny_batch(15);
  const auto rev = loss_domain(m, b.source_x, b.target_x, DomainRoute::kReversed);
  const auto plain = loss_domain(m, b.source_x, b.target_x, DomainRoute::kPlain);
  EXPECT_EQ(rev.value, plain.value);
  EXPECT_EQ(nn::flatten(*rev.grads.m_d), nn::flatten(*plain.grads.m_d));
  const auto r = nn::flatten(*rev.grads.m_c);
  const auto p = nn::flatten(*plain.grads.m_c);
  ASSERT_EQ(r.size(), p.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_NEAR(r[i], -2.5 * p[i], 1e-13 * std::max(1.0, std::abs(p[i])));
  }
}

// Applied dsn_step update of each network against finite differences of the
// objective that network is supposed to descend.
TEST(DsnStep, UpdatesMatchRoutedFiniteDifferences) {
  const Coefficients coef{1.7, 0.4, 0.8};
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const auto m0 = tiny_model(seed, coef);
    const auto b = tiny_batch(seed);
    auto stepped = m0;
    const double mu = 0.5;
    dsn_step(stepped, b, mu);

    const auto senone = [&](const DsnModel& m) { return loss_senone(m, b.source_x, b.source_y).value; };
    const auto domain = [&](const DsnModel& m) { return loss_domain(m, b.source_x, b.target_x).value; };
    const auto diff = [&](const DsnModel& m) { return loss_diff(m, b.source_x, b.target_x).value; };
    const auto recon = [&](const DsnModel& m) { return loss_recon(m, b.source_x, b.target_x).value; };

    struct Group {
      const char* name;
      Mlp DsnModel::*plain;
      std::optional<Mlp> DsnModel::*opt;
      std::function<double(const DsnModel&)> objective;
    };
    const std::vector<Group> groups{
        {"m_c", &DsnModel::m_c, nullptr,
         [&](const DsnModel& m) {
           return senone(m) - coef.alpha * domain(m) + coef.beta * diff(m) + coef.gamma * recon(m);
         }},
        {"m_y", &DsnModel::m_y, nullptr, senone},
        {"m_d", &DsnModel::m_d, nullptr, domain},
        {"m_p_s", nullptr, &DsnModel::m_p_s,
         [&](const DsnModel& m) { return coef.beta * diff(m) + coef.gamma * recon(m); }},
        {"m_p_t", nullptr, &DsnModel::m_p_t,
         [&](const DsnModel& m) { return coef.beta * diff(m) + coef.gamma * recon(m); }},
        {"m_r", nullptr, &DsnModel::m_r, recon},
    };
    for (const auto& g : groups) {
      const auto net_of = [&](const DsnModel& m) -> const Mlp& {
        return g.plain ? m.*g.plain : *(m.*g.opt);
      };
      const auto before = nn::flatten(net_of(m0));
      const auto after = nn::flatten(net_of(stepped));
      std::vector<double> applied(before.size());
      for (std::size_t i = 0; i < before.size(); ++i) applied[i] = (before[i] - after[i]) / mu;
      const auto loss = [&](std::span<const double> params) {
        DsnModel m = m0;
        nn::unflatten(g.plain ? m.*g.plain : *(m.*g.opt), params);
        return g.objective(m);
      };
      auto rep = nn::finite_diff_check(loss, before, applied, 1e-6, 1e-3);
      EXPECT_TRUE(rep.passed) << "seed " << seed << " " << g.name << " max rel "
                              << rep.max_rel_error << " at " << rep.worst_index;
    }
  }
}

TEST(DsnStep, ZeroLearningRateLeavesModelAndLosses) {
  auto m = tiny_model(24);
  const auto original = m;
  auto b = tiny_batch(24);
  const auto t1 = dsn_step(m, b, 0.0);
  const auto t2 = dsn_step(m, b, 0.0);
  EXPECT_EQ(m, original);
  EXPECT_EQ(t1.loss_total, t2.loss_total);
  EXPECT_EQ(t1.loss_senone, t2.loss_senone);
}

TEST(DsnStep, SenoneOnlyDescent) {
  auto m = tiny_model(25, {0.0, 0.0, 0.0}, false);
  auto b = tiny_batch(25, 16, 16);
  const double before = loss_senone(m, b.source_x, b.source_y).value;
  dsn_step(m, b, 1e-3);
  EXPECT_LT(loss_senone(m, b.source_x, b.source_y).value, before);
}

TEST(DsnStep, NonFiniteInputAbortsWithoutTouchingModel) {
  auto m = tiny_model(26);
  const auto original = m;
  auto b = tiny_batch(26);
  b.target_x(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(dsn_step(m, b, 0.1), DivergenceError);
  EXPECT_EQ(m, original);
}

TEST(DsnStep, RejectsInvalidBatch) {
  auto m = tiny_model(27);
  auto b = tiny_batch(27);
  b.source_y.pop_back();
  EXPECT_THROW(dsn_step(m, b, 0.1), DataError);
  auto w = tiny_batch(27);
  w.target_x = Matrix(3, kFeat + 1);
  EXPECT_THROW(dsn_step(m, w, 0.1), ShapeError);
  auto c = tiny_batch(27);
  c.source_y[0] = 7;
  EXPECT_THROW(dsn_step(m, c, 0.1), DataError);
}

TEST(DsnStep, SwappingDomainsPreservesDiffAndRecon) {
  auto m = tiny_model(28);
  auto b = tiny_batch(28, 5, 5);
  auto swapped = m;
  std::swap(swapped.m_p_s, swapped.m_p_t);
  EXPECT_EQ(loss_diff(m, b.source_x, b.target_x).value,
            loss_diff(swapped, b.target_x, b.source_x).value);
  EXPECT_EQ(loss_recon(m, b.source_x, b.target_x).value,
            loss_recon(swapped, b.target_x, b.source_x).value);
}

TEST(DsnStep, ZeroBetaGammaMatchesGrlOnlyModel) {
  const Coefficients coef{2.0, 0.0, 0.0};
  auto full = tiny_model(29, coef, true);
  auto grl_only = tiny_model(29, coef, false);
  ASSERT_EQ(full.m_c, grl_only.m_c);
  ASSERT_EQ(full.m_d, grl_only.m_d);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto b = tiny_batch(100 + s);
    const auto tf = dsn_step(full, b, 0.2);
    const auto tg = dsn_step(grl_only, b, 0.2);
    EXPECT_EQ(tf.loss_total, tg.loss_total);
  }
  EXPECT_EQ(full.m_c, grl_only.m_c);
  EXPECT_EQ(full.m_y, grl_only.m_y);
  EXPECT_EQ(full.m_d, grl_only.m_d);
}

TEST(Serialization, ModelRoundTripIsBitExact) {
  for (bool with_private : {true, false}) {
    auto m = tiny_model(30, {0.3, 1e-7, 12.5}, with_private);
    std::stringstream ss;
    write_model(ss, m);
    EXPECT_EQ(read_model(ss), m);
  }
}

TEST(Serialization, InconsistentManifestRejected) {
  auto m = tiny_model(31);
  std::stringstream ss;
  write_model(ss, m);
  std::string text = ss.str();
  text.replace(text.find("k 5"), 3, "k 6");
  std::stringstream bad(text);
  EXPECT_THROW(read_model(bad), DataError);
}

}  // namespace
}  // namespace dsn::model
