// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure. Usage: acceptance [--only name[,name...]] [--config path]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dsn/data.hpp"
#include "dsn/grl.hpp"
#include "dsn/model.hpp"
#include "dsn/nn.hpp"
#include "dsn/pipeline.hpp"
#include "dsn/rng.hpp"

namespace {

using namespace dsn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

void randomize_biases(nn::Mlp& net, Rng& rng) {
  for (auto& l : net.mutable_layers()) {
    for (double& b : l.bias) b = rng.uniform(-0.3, 0.3);
  }
}

// Toy DSN with at most 8 units per layer.
model::DsnModel toy_model(std::uint64_t seed, const model::Coefficients& coef) {
  Rng rng(seed);
  const nn::LayerSpec spec[] = {{5, 8, nn::Activation::kSigmoid},
                                {8, 6, nn::Activation::kSigmoid},
                                {6, 4, nn::Activation::kSoftmax}};
  auto src = nn::init_mlp(spec, rng);
  randomize_biases(src, rng);
  Rng d_rng = Rng::stream(seed, 13);
  Rng p_rng = Rng::stream(seed, 14);
  auto m = model::build_model(src, 1, coef, {{7}, {7}, {8}}, true, d_rng, p_rng);
  for (auto* net : {&m.m_d, &*m.m_p_s, &*m.m_p_t, &*m.m_r}) randomize_biases(*net, rng);
  return m;
}

model::DsnBatch toy_batch(std::uint64_t seed) {
  Rng rng(seed + 1000);
  model::DsnBatch b;
  b.source_x = random_matrix(7, 5, rng);
  b.target_x = random_matrix(6, 5, rng, 1.5);
  for (int i = 0; i < 7; ++i) b.source_y.push_back(static_cast<int>(rng.below(4)));
  return b;
}

Outcome gradient_oracles() {
  const auto t0 = Clock::now();
  double worst_nn = 0.0;
  double worst_routed = 0.0;
  bool ok = true;

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const nn::LayerSpec ce_spec[] = {{4, 8, nn::Activation::kSigmoid},
                                     {8, 8, nn::Activation::kRelu},
                                     {8, 5, nn::Activation::kSoftmax}};
    auto net = nn::init_mlp(ce_spec, rng);
    randomize_biases(net, rng);
    const auto x = random_matrix(6, 4, rng);
    std::vector<int> y;
    for (int i = 0; i < 6; ++i) y.push_back(static_cast<int>(rng.below(5)));
    auto fwd = nn::forward(net, x);
    auto ce = nn::cross_entropy_loss(fwd.output, y);
    auto back = nn::backward_from_logits(net, fwd.cache, ce.logit_grad);
    auto rep = nn::finite_diff_check(
        [&](const nn::Mlp& m) { return nn::cross_entropy_loss(nn::predict(m, x), y).loss; }, net,
        back.grads, 1e-5, 1e-4);
    worst_nn = std::max(worst_nn, rep.max_rel_error);
    ok = ok && rep.passed;

    const nn::LayerSpec mse_spec[] = {{4, 8, nn::Activation::kRelu},
                                      {8, 3, nn::Activation::kLinear}};
    auto reg = nn::init_mlp(mse_spec, rng);
    randomize_biases(reg, rng);
    const auto t = random_matrix(6, 3, rng);
    auto rf = nn::forward(reg, x);
    auto rb = nn::backward(reg, rf.cache, nn::mse_loss(rf.output, t).grad);
    auto rrep = nn::finite_diff_check(
        [&](const nn::Mlp& m) { return nn::mse_loss(nn::predict(m, x), t).loss; }, reg, rb.grads,
        1e-5, 1e-4);
    worst_nn = std::max(worst_nn, rrep.max_rel_error);
    ok = ok && rrep.passed;
  }

  const model::Coefficients coef{1.5, 0.5, 0.7};
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto m0 = toy_model(seed, coef);
    const auto b = toy_batch(seed);
    const double mu = 0.5;
    auto stepped = m0;
    model::dsn_step(stepped, b, mu);
    const auto senone = [&](const model::DsnModel& m) {
      return model::loss_senone(m, b.source_x, b.source_y).value;
    };
    const auto domain = [&](const model::DsnModel& m) {
      return model::loss_domain(m, b.source_x, b.target_x).value;
    };
    const auto diff = [&](const model::DsnModel& m) {
      return model::loss_diff(m, b.source_x, b.target_x).value;
    };
    const auto recon = [&](const model::DsnModel& m) {
      return model::loss_recon(m, b.source_x, b.target_x).value;
    };
    using Get = std::function<nn::Mlp&(model::DsnModel&)>;
    const std::vector<std::pair<Get, std::function<double(const model::DsnModel&)>>> groups{
        {[](model::DsnModel& m) -> nn::Mlp& { return m.m_c; },
         [&](const model::DsnModel& m) {
           return senone(m) - coef.alpha * domain(m) + coef.beta * diff(m) + coef.gamma * recon(m);
         }},
        {[](model::DsnModel& m) -> nn::Mlp& { return m.m_y; }, senone},
        {[](model::DsnModel& m) -> nn::Mlp& { return m.m_d; }, domain},
        {[](model::DsnModel& m) -> nn::Mlp& { return *m.m_p_s; },
         [&](const model::DsnModel& m) { return coef.beta * diff(m) + coef.gamma * recon(m); }},
        {[](model::DsnModel& m) -> nn::Mlp& { return *m.m_p_t; },
         [&](const model::DsnModel& m) { return coef.beta * diff(m) + coef.gamma * recon(m); }},
        {[](model::DsnModel& m) -> nn::Mlp& { return *m.m_r; }, recon},
    };
    for (const auto& [get, objective] : groups) {
      auto base = m0;
      const auto before = nn::flatten(get(base));
      const auto after = nn::flatten(get(stepped));
      std::vector<double> applied(before.size());
      for (std::size_t i = 0; i < before.size(); ++i) applied[i] = (before[i] - after[i]) / mu;
      auto rep = nn::finite_diff_check(
          [&](std::span<const double> p) {
            auto m = m0;
            nn::unflatten(get(m), p);
            return objective(m);
          },
          before, applied, 1e-6, 1e-3);
      worst_routed = std::max(worst_routed, rep.max_rel_error);
      ok = ok && rep.passed;
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 30.0;
  return {ok, "nn max rel " + fmt(worst_nn, 3) + " (<1e-4), routed max rel " +
                  fmt(worst_routed, 3) + " (<1e-3), " + fmt(secs, 3) + " s (<30 s)"};
}

Outcome grl_exactness() {
  Rng rng(42);
  const auto x = random_matrix(16, 9, rng, 10.0);
  bool ok = grl::forward(x) == x;
  for (double alpha : {0.0, 1.0, 8.0, 0.3}) {
    const auto g = grl::backward(x, {alpha});
    for (std::size_t i = 0; i < x.size(); ++i) ok = ok && g.values()[i] == -alpha * x.values()[i];
  }
  auto m = toy_model(7, {1.0, 0.25, 0.25});
  const auto b = toy_batch(7);
  std::vector<double> totals;
  for (double alpha : {0.0, 1.0, 8.0}) {
    m.coef.alpha = alpha;
    totals.push_back(model::loss_total(m, b).trace.loss_total);
  }
  ok = ok && totals[0] == totals[1] && totals[1] == totals[2];
  return {ok, "forward identity, backward -alpha*g exact; loss_total(alpha=0,1,8) = " +
                  fmt(totals[0], 17) + (totals[0] == totals[2] ? " (identical)" : " (differs)")};
}

Outcome diff_identities() {
  Rng rng(3);
  double worst_single = 0.0;
  for (int i = 0; i < 50; ++i) {
    const auto s = random_matrix(1, 6, rng);
    const auto p = random_matrix(1, 6, rng);
    const double expected = squared_frobenius(s) * squared_frobenius(p);
    worst_single = std::max(worst_single, std::abs(model::difference_term(s, p).value - expected) /
                                              std::max(1.0, expected));
  }
  const Matrix cs{{1.0, 0.0}, {1.0, 0.0}};
  const Matrix cp{{1.0, 0.0}, {-1.0, 0.0}};
  const double cancel = model::difference_term(cs, cp).value;

  double worst_batch = 0.0;
  for (std::size_t rows : {3u, 8u, 64u}) {
    const auto s = random_matrix(rows, 5, rng);
    const auto p = random_matrix(rows, 4, rng);
    // Sum of per-sample outer products, then the squared Frobenius norm.
    Matrix corr(5, 4);
    for (std::size_t i = 0; i < rows; ++i) {
      Matrix outer(5, 4);
      for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t c = 0; c < 4; ++c) outer(a, c) = s(i, a) * p(i, c);
      }
      add_scaled(corr, outer, 1.0 / static_cast<double>(rows));
    }
    const double expected = squared_frobenius(corr);
    worst_batch = std::max(worst_batch, std::abs(model::difference_term(s, p).value - expected) /
                                            std::max(1.0, expected));
  }
  const bool ok = worst_single <= 1e-12 && cancel == 0.0 && worst_batch <= 1e-12;
  return {ok, "single-sample err " + fmt(worst_single, 3) + ", cancellation " + fmt(cancel) +
                  ", batch oracle err " + fmt(worst_batch, 3)};
}

pipeline::ExperimentConfig small_config(std::uint64_t seed) {
  pipeline::ExperimentConfig cfg;
  cfg.synth.utterances_per_domain = 20;
  cfg.synth.frames_per_utterance = 50;
  cfg.pretrain_epochs = 5;
  cfg.epochs = 3;
  cfg.seed = seed;
  return cfg;
}

Outcome baseline_reduction() {
  bool ok = true;
  for (std::uint64_t seed : {1u, 2u}) {
    auto cfg = small_config(seed);
    cfg.coef = {1.0, 0.0, 0.0};
    const auto d = pipeline::prepare_data(cfg, false);
    const auto src = pipeline::pretrain_source(cfg, d.source_train).source_dnn;
    const auto g = pipeline::adapt_grl(cfg, src, d.source_train, d.target_adapt);
    const auto x = pipeline::adapt_dsn(cfg, src, d.source_train, d.target_adapt);
    ok = ok && g.model.m_c == x.model.m_c && g.model.m_y == x.model.m_y &&
         g.model.m_d == x.model.m_d;
    for (std::size_t e = 0; e < g.trace.size(); ++e) {
      ok = ok && g.trace[e].loss_senone == x.trace[e].loss_senone &&
           g.trace[e].loss_domain == x.trace[e].loss_domain;
    }
  }
  return {ok, ok ? "m_c, m_y, m_d and traces bit-identical (2 seeds)" : "models differ"};
}

struct TrendRun {
  double src_unadapted, src_grl, src_dsn;
  double tgt_unadapted, tgt_grl, tgt_dsn;
  double recon_first, recon_last;
};

std::vector<TrendRun> g_trend;
double g_trend_seconds = 0.0;

void run_trend(const pipeline::ExperimentConfig& base) {
  if (!g_trend.empty()) return;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = base;
    cfg.seed = seed;
    const auto d = pipeline::prepare_data(cfg, true);
    const auto src = pipeline::pretrain_source(cfg, d.source_train).source_dnn;
    const auto g = pipeline::adapt_grl(cfg, src, d.source_train, d.target_adapt);
    const auto x = pipeline::adapt_dsn(cfg, src, d.source_train, d.target_adapt);
    TrendRun r{};
    r.src_unadapted = pipeline::evaluate(src, d.source_test, "s").frame_error_rate;
    r.tgt_unadapted = pipeline::evaluate(src, d.target_test, "t").frame_error_rate;
    r.src_grl = pipeline::evaluate(g.model.m_c, g.model.m_y, d.source_test, "s").frame_error_rate;
    r.tgt_grl = pipeline::evaluate(g.model.m_c, g.model.m_y, d.target_test, "t").frame_error_rate;
    r.src_dsn = pipeline::evaluate(x.model.m_c, x.model.m_y, d.source_test, "s").frame_error_rate;
    r.tgt_dsn = pipeline::evaluate(x.model.m_c, x.model.m_y, d.target_test, "t").frame_error_rate;
    r.recon_first = x.trace.front().loss_recon;
    r.recon_last = x.trace.back().loss_recon;
    std::printf("  trend seed %llu: target unadapted %.4f grl %.4f dsn %.4f | source %.4f %.4f %.4f"
                " | recon %.3f -> %.3f\n",
                static_cast<unsigned long long>(seed), r.tgt_unadapted, r.tgt_grl, r.tgt_dsn,
                r.src_unadapted, r.src_grl, r.src_dsn, r.recon_first, r.recon_last);
    std::fflush(stdout);
    g_trend.push_back(r);
  }
  g_trend_seconds = seconds_since(t0);
}

Outcome trend(const pipeline::ExperimentConfig& base) {
  run_trend(base);
  std::vector<double> tu, tg, td, su, sg, sd;
  for (const auto& r : g_trend) {
    tu.push_back(r.tgt_unadapted);
    tg.push_back(r.tgt_grl);
    td.push_back(r.tgt_dsn);
    su.push_back(r.src_unadapted);
    sg.push_back(r.src_grl);
    sd.push_back(r.src_dsn);
  }
  const double mu = median(tu), mg = median(tg), md = median(td);
  const double degrade = std::max(median(sg), median(sd)) - median(su);
  const bool ok = mu > mg && mg >= md && (mu - mg) * 100.0 >= 2.0 && (mg - md) >= 0.0 &&
                  degrade * 100.0 < 5.0 && g_trend_seconds < 600.0;
  return {ok, "median target error unadapted " + fmt(mu) + " > GRL " + fmt(mg) + " >= DSN " +
                  fmt(md) + " (margins " + fmt((mu - mg) * 100, 3) + " / " +
                  fmt((mg - md) * 100, 3) + " points), source degradation " +
                  fmt(degrade * 100, 3) + " points, " + fmt(g_trend_seconds, 4) + " s"};
}

Outcome recon_dynamics(const pipeline::ExperimentConfig& base) {
  run_trend(base);
  std::size_t decreasing = 0;
  std::string detail;
  for (const auto& r : g_trend) {
    if (r.recon_last < r.recon_first) ++decreasing;
    detail += (detail.empty() ? "" : ", ") + fmt(r.recon_first, 4) + "->" + fmt(r.recon_last, 4);
  }
  return {decreasing == g_trend.size(),
          std::to_string(decreasing) + "/" + std::to_string(g_trend.size()) +
              " seeds decrease (epoch 1 -> 30: " + detail + ")"};
}

Outcome sweep_grid() {
  auto cfg = small_config(3);
  cfg.epochs = 2;
  const auto d = pipeline::prepare_data(cfg, true);
  const auto src = pipeline::pretrain_source(cfg, d.source_train).source_dnn;
  const std::vector<std::size_t> nh{1, 2, 3};
  const std::vector<double> alpha{1.0, 4.0, 8.0};
  const auto first = pipeline::sweep(cfg, src, d, nh, alpha);
  cfg.jobs = 3;
  const auto second = pipeline::sweep(cfg, src, d, nh, alpha);
  const std::string csv = first.to_csv();
  bool ok = csv == second.to_csv();
  ok = ok && csv.rfind("n_h,alpha=1,alpha=4,alpha=8,avg\n", 0) == 0;
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  ok = ok && lines == 4;
  for (const auto& row : first.grid) {
    for (const auto& cell : row) ok = ok && std::isfinite(cell.target_error);
  }
  return {ok, "3x3 grid with avg column, identical across reruns (jobs 1 vs 3)"};
}

Outcome unsupervised_audit() {
  const fs::path root = fs::temp_directory_path() / "dsn_acceptance_audit";
  fs::remove_all(root);
  auto cfg = small_config(4);
  pipeline::export_corpora(cfg, (root / "clean").string());
  fs::create_directories(root / "corrupt");
  for (const char* f : {pipeline::kSourceTrainFile, pipeline::kTargetAdaptFile,
                        pipeline::kTargetTestFile, pipeline::kSourceTestFile}) {
    fs::copy_file(root / "clean" / f, root / "corrupt" / f);
  }
  // Overwrite every label field of the adaptation corpus with junk.
  {
    std::ifstream in(root / "clean" / pipeline::kTargetAdaptFile);
    std::ofstream out(root / "corrupt" / pipeline::kTargetAdaptFile, std::ios::trunc);
    std::string line;
    std::getline(in, line);
    out << line << '\n';
    std::size_t n = 0;
    while (std::getline(in, line)) {
      std::size_t pos = 0;
      for (int k = 0; k < 3; ++k) pos = line.find(',', pos) + 1;
      const std::size_t end = line.find(',', pos);
      line.replace(pos, end - pos, n++ % 2 == 0 ? "7" : "#corrupt#");
      out << line << '\n';
    }
  }
  const auto adapt = [&](const fs::path& dir) {
    auto c = cfg;
    c.corpus_dir = dir.string();
    const auto d = pipeline::prepare_data(c, false);
    const auto src = pipeline::pretrain_source(c, d.source_train).source_dnn;
    return pipeline::adapt_dsn(c, src, d.source_train, d.target_adapt).model;
  };
  const auto clean = adapt(root / "clean");
  const auto corrupt = adapt(root / "corrupt");
  std::ostringstream a, b;
  model::write_model(a, clean);
  model::write_model(b, corrupt);
  const bool ok = clean == corrupt && a.str() == b.str();
  fs::remove_all(root);
  return {ok, ok ? "adapted model bit-identical with corrupted target labels"
                 : "target labels changed the model"};
}

Outcome serialization() {
  const fs::path root = fs::temp_directory_path() / "dsn_acceptance_io";
  fs::remove_all(root);
  fs::create_directories(root);
  auto cfg = small_config(6);
  const auto d = pipeline::prepare_data(cfg, true);
  const auto src = pipeline::pretrain_source(cfg, d.source_train).source_dnn;
  const auto x = pipeline::adapt_dsn(cfg, src, d.source_train, d.target_adapt).model;

  model::save_model((root / "m.dsn").string(), x);
  const auto x2 = model::load_model((root / "m.dsn").string());
  nn::save_mlp((root / "s.mlp").string(), src);
  const auto src2 = nn::load_mlp((root / "s.mlp").string());
  bool ok = x2 == x && src2 == src;

  const auto raw = data::synth_corpus(cfg.synth);
  for (const auto* c : {&raw.source_train, &raw.target_adapt, &raw.target_test}) {
    data::save_corpus((root / "c.corpus").string(), *c);
    ok = ok && data::load_corpus((root / "c.corpus").string()) == *c;
  }
  data::Corpus spliced = data::splice(raw.target_test, 2, 2);
  data::save_corpus((root / "sp.corpus").string(), spliced);
  ok = ok && data::load_corpus((root / "sp.corpus").string()) == spliced;

  const auto e1 = pipeline::evaluate(x.m_c, x.m_y, d.target_test, "t");
  const auto e2 = pipeline::evaluate(x2.m_c, x2.m_y, d.target_test, "t");
  ok = ok && e1 == e2;
  fs::remove_all(root);
  return {ok, "model, source dnn and corpora round-trip bit-exactly; evaluate unchanged (FER " +
                  fmt(e1.frame_error_rate) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only;
  std::string config_path = std::string(DSN_SOURCE_DIR) + "/configs/toy.cfg";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string t;
      while (std::getline(ss, t, ',')) only.push_back(t);
    } else if (flag == "--config") {
      config_path = argv[i + 1];
    }
  }
  pipeline::ExperimentConfig toy;
  try {
    toy = pipeline::load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << '\n';
    return 2;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-oracles", gradient_oracles},
      {"grl-exactness", grl_exactness},
      {"ldiff-identities", diff_identities},
      {"baseline-reduction", baseline_reduction},
      {"trend", [&] { return trend(toy); }},
      {"sweep", sweep_grid},
      {"unsupervised-audit", unsupervised_audit},
      {"reconstruction-dynamics", [&] { return recon_dynamics(toy); }},
      {"serialization", serialization},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome out;
    try {
      out = fn();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s [%s] %s\n", out.passed ? "PASS" : "FAIL", name.c_str(), out.detail.c_str());
    std::fflush(stdout);
    failures += out.passed ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
