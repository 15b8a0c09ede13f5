// dsn-adapt <mode> --config <path> [--out <dir>] [--seed N] [--n-h N]
//           [--alpha X] [--beta X] [--gamma X] [--jobs N]

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dsn/error.hpp"
#include "dsn/pipeline.hpp"
#include "dsn/text_io.hpp"

int main(int argc, char** argv) {
  using namespace dsn;
  CLI::App app{"Unsupervised domain adaptation with domain separation networks"};
  app.set_help_flag("-h,--help", "Print this help message and exit");

  std::string mode;
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_h;
  std::optional<std::size_t> jobs;
  std::optional<double> alpha, beta, gamma;

  app.add_option("mode", mode, "pretrain | adapt-grl | adapt-dsn | evaluate | sweep")->required();
  app.add_option("--config", config_path, "key = value configuration file")->required();
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "experiment seed");
  app.add_option("--n-h", n_h, "hidden layers assigned to the shared extractor");
  app.add_option("--alpha", alpha, "gradient reversal coefficient");
  app.add_option("--beta", beta, "difference loss weight");
  app.add_option("--gamma", gamma, "reconstruction loss weight");
  app.add_option("--jobs", jobs, "parallel sweep cells / evaluation threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return pipeline::kExitConfig;
  }

  try {
    pipeline::ExperimentConfig cfg = pipeline::load_config(config_path);
    cfg.mode = pipeline::parse_mode(mode);
    if (seed) cfg.seed = *seed;
    if (n_h) cfg.n_h = *n_h;
    if (alpha) cfg.coef.alpha = *alpha;
    if (beta) cfg.coef.beta = *beta;
    if (gamma) cfg.coef.gamma = *gamma;
    if (jobs) cfg.jobs = *jobs;
    pipeline::run(cfg, out_dir, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "dsn-adapt: " << e.what() << '\n';
    return pipeline::exit_code_for(e);
  }
  return pipeline::kExitOk;
}
