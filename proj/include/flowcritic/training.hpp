#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "flowcritic/critic.hpp"
#include "flowcritic/datapipe.hpp"
#include "flowcritic/flow.hpp"
#include "flowcritic/optim.hpp"

namespace flowcritic {

enum class Objective : std::uint8_t { mle, wgan, combined, wgan_fast };

const char* objective_name(Objective o);
Objective parse_objective(const std::string& name);

struct TrainConfig {
  Objective objective = Objective::mle;
  std::size_t batch_size = 64;
  double lr_critic = 5e-5;
  double lr_generator = 5e-5;  ///< rmsprop, adversarial generator updates
  double lr_mle = 1e-3;        ///< adam, likelihood and combined updates
  double clip_c = 0.01;
  int n_critic = 5;
  int boost_updates = 100;
  int boost_first_steps = 25;
  int boost_every = 500;
  std::uint64_t total_generator_steps = 0;
  double combined_lambda = 0.0;
  std::uint64_t seed = 0;
  DType precision = DType::f32;
  std::uint64_t eval_interval = 250;
  std::size_t eval_rows = 2048;   ///< rows of each split used for NLL metrics
  std::size_t extra_samples = 64; ///< x_e batch for the fast critic

  void validate() const;
};

/// Critic updates before generator step `step` (0-based).
int critic_schedule(std::uint64_t step, const TrainConfig& cfg);

struct MetricsRow {
  std::uint64_t step = 0;
  double wall_ms = 0.0;
  std::string metric;
  double value = 0.0;
  std::string split;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

/// Everything besides model weights that a resumed run needs.
template <typename T>
struct RunState {
  std::uint64_t step = 0;
  OptState<T> gen_opt;
  OptState<T> critic_opt;
  OptState<T> embed_opt;
  Rng data_rng;     ///< minibatch indices
  Rng noise_rng;    ///< latent draws for the generator
  Rng dequant_rng;  ///< fresh dequantization noise
  double interval_loss_sum = 0.0;
  std::uint64_t interval_loss_count = 0;
  double last_critic_w = 0.0;  ///< W estimate from the latest critic update

  static RunState seeded(std::uint64_t seed);
  bool operator==(const RunState&) const = default;
};

/// Raised when a loss or gradient goes non-finite. `last_good_step` is the
/// step count of the last completed update.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::uint64_t last_good_step)
      : Error(what), last_good_step_(last_good_step) {}
  std::uint64_t last_good_step() const { return last_good_step_; }

 private:
  std::uint64_t last_good_step_;
};

/// Default critic for a dataset: synthetic data is scaled by 0.5, images are
/// mapped from [0, 1) to [-1, 1) and get a convolutional front end.
CriticConfig default_critic_config(const Dataset& data, double clip_c, std::size_t hidden = 64);

/// One training run over a generator and, for adversarial objectives, a
/// critic. Each step() is one generator update.
template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, FlowModel<T> generator, const Dataset& train, const Dataset* valid,
          std::optional<CriticConfig> critic = std::nullopt);

  void step();

  /// Runs until `total_generator_steps`, emitting metrics every
  /// `eval_interval` steps and at the end.
  void run(const MetricsSink& sink = {}, const std::function<void(const Trainer&)>& on_eval = {});

  void emit_metrics(const MetricsSink& sink) const;

  const TrainConfig& config() const { return cfg_; }
  const Dataset& train_data() const { return *train_; }
  const FlowModel<T>& generator() const { return gen_; }
  FlowModel<T>& generator() { return gen_; }
  const Critic<T>& critic() const;
  const FastCritic<T>& fast_critic() const;
  bool has_critic() const { return critic_.has_value() || fast_.has_value(); }
  bool is_fast() const { return fast_.has_value(); }

  /// Mutable access for checkpoint restore.
  ParamStore<T>& critic_params();
  ParamStore<T>& embed_params();

  const RunState<T>& state() const { return state_; }
  RunState<T>& state() { return state_; }

  double mean_nll(const Dataset& data) const;

 private:
  void build_graphs();
  void critic_update();
  void generator_update();
  Tensor<T> generated(std::size_t n);
  ParamView<T> critic_view() const;

  TrainConfig cfg_;
  FlowModel<T> gen_;
  const Dataset* train_;
  const Dataset* valid_;
  std::optional<Critic<T>> critic_;
  std::optional<FastCritic<T>> fast_;
  RunState<T> state_;

  Graph<T> mle_graph_;
  NodeId mle_loss_;
  Graph<T> critic_graph_;
  NodeId critic_loss_;
  NodeId critic_w_;
  Graph<T> gen_graph_;
  NodeId gen_loss_;
};

}  // namespace flowcritic
