// flowcritic {train|eval|sample}: command-line front end.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowcritic/commands.hpp"

namespace fc = flowcritic;

namespace {

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::string> seed, out, levels, objective, steps, n_critic, lambda, precision;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key=value run configuration");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--levels", o.levels, "flow levels (1-3)");
  cmd->add_option("--objective", o.objective, "mle | wgan | combined | wgan_fast");
  cmd->add_option("--steps", o.steps, "total generator steps");
  cmd->add_option("--n-critic", o.n_critic, "critic updates per generator step");
  cmd->add_option("--lambda", o.lambda, "combined objective weight");
  cmd->add_option("--precision", o.precision, "f32 | f64");
}

fc::RunConfig resolve(const Overrides& o) {
  fc::RunConfig cfg = o.config ? fc::load_config(*o.config) : fc::RunConfig{};
  auto set = [&](const char* key, const std::optional<std::string>& v) {
    if (v) fc::set_config_value(cfg, key, *v);
  };
  set("seed", o.seed);
  set("out_dir", o.out);
  set("levels", o.levels);
  set("objective", o.objective);
  set("total_steps", o.steps);
  set("n_critic", o.n_critic);
  set("lambda", o.lambda);
  set("precision", o.precision);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Real-NVP flows trained by likelihood or by a Wasserstein critic"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, sample_o;
  std::optional<std::string> resume;
  auto* train = app.add_subcommand("train", "run a training loop");
  add_run_flags(train, train_o);
  train->add_option("--checkpoint", resume, "resume from this checkpoint");

  std::string eval_ckpt;
  std::string kinds = "wdist,bpd";
  std::size_t critic_budget = 2000, eval_n = 10000;
  auto* eval = app.add_subcommand("eval", "write evaluation reports");
  add_run_flags(eval, eval_o);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--kinds", kinds, "comma list of wdist,bpd,latents,nllhist,jrank,klgap");
  eval->add_option("--critic-budget", critic_budget, "independent critic updates");
  eval->add_option("--n", eval_n, "samples for klgap");

  std::string sample_ckpt, mode = "fresh";
  std::size_t sample_n = 64;
  std::optional<std::string> input;
  auto* samp = app.add_subcommand("sample", "draw samples from a checkpoint");
  add_run_flags(samp, sample_o);
  samp->add_option("--checkpoint", sample_ckpt, "checkpoint to sample")->required();
  samp->add_option("--n", sample_n, "number of samples");
  samp->add_option("--mode", mode, "fresh | partial_first | partial_second");
  samp->add_option("--input", input, "FC2D rows for partial modes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fc::kExitBadConfig;
  }

  try {
    if (*train) {
      fc::TrainOptions opts{resolve(train_o), std::nullopt};
      if (resume) opts.resume = *resume;
      return fc::cmd_train(opts, std::cerr);
    }
    if (*eval) {
      fc::EvalOptions opts;
      opts.config = resolve(eval_o);
      opts.checkpoint = eval_ckpt;
      opts.critic_budget = critic_budget;
      opts.samples = eval_n;
      std::size_t start = 0;
      while (start <= kinds.size()) {
        const auto comma = kinds.find(',', start);
        const auto end = comma == std::string::npos ? kinds.size() : comma;
        if (end > start) opts.kinds.push_back(kinds.substr(start, end - start));
        start = end + 1;
      }
      return fc::cmd_eval(opts, std::cerr);
    }
    fc::SampleOptions opts;
    const fc::RunConfig cfg = resolve(sample_o);
    opts.checkpoint = sample_ckpt;
    opts.out_dir = cfg.out_dir;
    opts.n = sample_n;
    opts.seed = cfg.seed;
    opts.mode = fc::parse_sample_mode(mode);
    if (input) opts.input = *input;
    return fc::cmd_sample(opts, std::cerr);
  } catch (...) {
    return fc::exit_code_for_current_exception(std::cerr);
  }
}
