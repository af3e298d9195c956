#include "flowcritic/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flowcritic {

namespace {

enum StreamTag : std::uint64_t { kDataStream = 1, kNoiseStream = 2, kDequantStream = 3, kCriticInit = 4 };

bool adversarial(Objective o) { return o != Objective::mle; }

}  // namespace

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::mle: return "mle";
    case Objective::wgan: return "wgan";
    case Objective::combined: return "combined";
    case Objective::wgan_fast: return "wgan_fast";
  }
  return "?";
}

Objective parse_objective(const std::string& name) {
  for (Objective o : {Objective::mle, Objective::wgan, Objective::combined, Objective::wgan_fast}) {
    if (name == objective_name(o)) return o;
  }
  throw InvalidArgument("unknown objective '" + name + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be positive");
  if (!(lr_critic > 0) || !(lr_generator > 0) || !(lr_mle > 0)) {
    throw InvalidArgument("learning rates must be positive");
  }
  if (!(clip_c > 0)) throw InvalidArgument("clip_c must be positive");
  if (n_critic < 1 || boost_updates < 1 || boost_every < 1 || boost_first_steps < 0) {
    throw InvalidArgument("critic schedule counts must be positive");
  }
  if (!(combined_lambda >= 0) || !std::isfinite(combined_lambda)) {
    throw InvalidArgument("lambda must be finite and non-negative");
  }
  if (eval_interval < 1) throw InvalidArgument("eval_interval must be positive");
  if (eval_rows < 1 || extra_samples < 1) throw InvalidArgument("sample counts must be positive");
}

int critic_schedule(std::uint64_t step, const TrainConfig& cfg) {
  const bool boost = step < static_cast<std::uint64_t>(cfg.boost_first_steps) ||
                     step % static_cast<std::uint64_t>(cfg.boost_every) == 0;
  return boost ? cfg.boost_updates : cfg.n_critic;
}

template <typename T>
RunState<T> RunState<T>::seeded(std::uint64_t seed) {
  RunState s;
  s.data_rng = Rng(stream_seed(seed, kDataStream));
  s.noise_rng = Rng(stream_seed(seed, kNoiseStream));
  s.dequant_rng = Rng(stream_seed(seed, kDequantStream));
  return s;
}

CriticConfig default_critic_config(const Dataset& data, double clip_c, std::size_t hidden) {
  CriticConfig c;
  c.dim = data.dim();
  c.hidden = hidden;
  c.clip_c = clip_c;
  if (data.origin == Origin::idx_images) {
    c.input_scale = 2.0;
    c.input_shift = -1.0;
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(c.dim))));
    if (side * side == c.dim) c.image_side = side;
  } else {
    c.input_scale = 0.5;
  }
  return c;
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, FlowModel<T> generator, const Dataset& train,
                    const Dataset* valid, std::optional<CriticConfig> critic)
    : cfg_(std::move(cfg)), gen_(std::move(generator)), train_(&train), valid_(valid),
      state_(RunState<T>::seeded(cfg_.seed)) {
  cfg_.validate();
  if (train.dim() != gen_.dim()) throw ShapeError("trainer: data and generator dims differ");
  if (valid && valid->dim() != gen_.dim()) throw ShapeError("trainer: validation dim differs");
  if (adversarial(cfg_.objective)) {
    CriticConfig cc = critic ? *critic : default_critic_config(train, cfg_.clip_c);
    cc.clip_c = cfg_.clip_c;
    if (cc.dim != gen_.dim()) throw ShapeError("trainer: critic and generator dims differ");
    const std::uint64_t init_seed = stream_seed(cfg_.seed, kCriticInit);
    if (cfg_.objective == Objective::wgan_fast) {
      fast_.emplace(cc, EmbedConfig{}, init_seed);
    } else {
      critic_.emplace(cc, init_seed);
    }
  }
  build_graphs();
}

template <typename T>
const Critic<T>& Trainer<T>::critic() const {
  if (fast_) return fast_->trunk();
  if (!critic_) throw InvalidArgument("trainer has no critic");
  return *critic_;
}

template <typename T>
const FastCritic<T>& Trainer<T>::fast_critic() const {
  if (!fast_) throw InvalidArgument("trainer has no fast critic");
  return *fast_;
}

template <typename T>
ParamStore<T>& Trainer<T>::critic_params() {
  if (fast_) return fast_->trunk().params();
  if (!critic_) throw InvalidArgument("trainer has no critic");
  return critic_->params();
}

template <typename T>
ParamStore<T>& Trainer<T>::embed_params() {
  if (!fast_) throw InvalidArgument("trainer has no fast critic");
  return fast_->embed_params();
}

template <typename T>
ParamView<T> Trainer<T>::critic_view() const {
  if (fast_) return fast_->view();
  return ParamView<T>(critic_->params());
}

template <typename T>
void Trainer<T>::build_graphs() {
  {
    Graph<T>& g = mle_graph_;
    mle_loss_ = g.neg(g.mean(append_log_prob(g, gen_, g.input("x", false))));
  }
  if (!has_critic()) return;

  {
    // Critic ascent on W = mean f(x_r) - mean f(x_g), written as descent on -W.
    Graph<T>& g = critic_graph_;
    g.freeze_prefix("flow.");
    const NodeId xr = g.input("x_real", false);
    const NodeId xg = g.input("x_gen", false);
    NodeId fr, fg;
    if (fast_) {
      const NodeId e = append_embedding(g, *fast_, g.input("x_extra", false));
      fr = append_fast_critic(g, *fast_, xr, e);
      fg = append_fast_critic(g, *fast_, xg, e);
    } else {
      fr = append_critic(g, *critic_, xr);
      fg = append_critic(g, *critic_, xg);
    }
    critic_w_ = append_wgan_objective(g, fr, fg);
    critic_loss_ = g.neg(critic_w_);
  }
  {
    Graph<T>& g = gen_graph_;
    g.freeze_prefix(critic().config().prefix);
    if (fast_) g.freeze_prefix(fast_->embed_config().prefix);
    const FlowNodes fwd = append_forward(g, gen_, g.input("z", false));
    NodeId fg;
    if (fast_) {
      // Extra samples enter as data; no gradient flows back through them.
      const NodeId xe = g.stop_gradient(g.input("x_extra", true));
      fg = append_fast_critic(g, *fast_, fwd.value, append_embedding(g, *fast_, xe));
    } else {
      fg = append_critic(g, critic(), fwd.value);
    }
    const NodeId adv = g.neg(g.mean(fg));
    if (cfg_.objective == Objective::combined) {
      const NodeId nll = g.neg(g.mean(append_log_prob(g, gen_, g.input("x", false))));
      gen_loss_ = g.add(nll, g.scale(adv, cfg_.combined_lambda));
    } else {
      gen_loss_ = adv;
    }
  }
}

template <typename T>
Tensor<T> Trainer<T>::generated(std::size_t n) {
  const Tensor<T> z = state_.noise_rng.template normal_matrix<T>(n, gen_.dim());
  return forward(gen_, z).value;
}

template <typename T>
void Trainer<T>::critic_update() {
  TensorMap<T> in;
  in.emplace("x_real", draw_batch<T>(*train_, cfg_.batch_size, state_.data_rng, state_.dequant_rng));
  in.emplace("x_gen", generated(cfg_.batch_size));
  if (fast_) in.emplace("x_extra", generated(cfg_.extra_samples));
  const auto acts = evaluate(critic_graph_, in, critic_view());
  const auto grads = backward(critic_graph_, acts, critic_loss_);
  state_.last_critic_w = static_cast<double>(acts[critic_w_].item());
  const RmspropConfig rc{cfg_.lr_critic, 0.99, 1e-8};
  if (fast_) {
    rmsprop_step(fast_->trunk().params(), grads.params, state_.critic_opt, rc);
    rmsprop_step(fast_->embed_params(), grads.params, state_.embed_opt, rc);
    fast_->clip();
  } else {
    rmsprop_step(critic_->params(), grads.params, state_.critic_opt, rc);
    critic_->clip();
  }
}

template <typename T>
void Trainer<T>::generator_update() {
  double loss = 0.0;
  TensorMap<T> grads;
  if (cfg_.objective == Objective::mle) {
    TensorMap<T> in;
    in.emplace("x", draw_batch<T>(*train_, cfg_.batch_size, state_.data_rng, state_.dequant_rng));
    const auto acts = evaluate(mle_graph_, in, ParamView<T>(gen_.params()));
    loss = static_cast<double>(acts[mle_loss_].item());
    grads = backward(mle_graph_, acts, mle_loss_).params;
    adam_step(gen_.params(), grads, state_.gen_opt, AdamConfig{cfg_.lr_mle});
  } else {
    TensorMap<T> in;
    in.emplace("z", state_.noise_rng.template normal_matrix<T>(cfg_.batch_size, gen_.dim()));
    if (fast_) in.emplace("x_extra", generated(cfg_.extra_samples));
    if (cfg_.objective == Objective::combined) {
      in.emplace("x", draw_batch<T>(*train_, cfg_.batch_size, state_.data_rng, state_.dequant_rng));
    }
    const ParamView<T> view = fast_ ? ParamView<T>{&gen_.params(), &fast_->trunk().params(),
                                                   &fast_->embed_params()}
                                    : ParamView<T>{&gen_.params(), &critic_->params()};
    const auto acts = evaluate(gen_graph_, in, view);
    loss = static_cast<double>(acts[gen_loss_].item());
    grads = backward(gen_graph_, acts, gen_loss_).params;
    if (cfg_.objective == Objective::combined) {
      adam_step(gen_.params(), grads, state_.gen_opt, AdamConfig{cfg_.lr_mle});
    } else {
      rmsprop_step(gen_.params(), grads, state_.gen_opt, RmspropConfig{cfg_.lr_generator});
    }
  }
  state_.interval_loss_sum += loss;
  state_.interval_loss_count += 1;
}

template <typename T>
void Trainer<T>::step() {
  try {
    if (has_critic()) {
      const int k = critic_schedule(state_.step, cfg_);
      for (int i = 0; i < k; ++i) critic_update();
    }
    generator_update();
  } catch (const NodeError& e) {
    throw TrainingAborted(std::string("non-finite value during training: ") + e.what(), state_.step);
  } catch (const NonFiniteValue& e) {
    throw TrainingAborted(std::string("non-finite value during training: ") + e.what(), state_.step);
  }
  state_.step += 1;
}

template <typename T>
double Trainer<T>::mean_nll(const Dataset& data) const {
  const std::size_t n = std::min(cfg_.eval_rows, data.size());
  const Tensor<T> x = take_rows(data.examples, 0, n).template cast<T>();
  const Tensor<T> lp = log_prob(gen_, x);
  double sum = 0.0;
  for (T v : lp.data()) sum += static_cast<double>(v);
  return -sum / static_cast<double>(n);
}

template <typename T>
void Trainer<T>::emit_metrics(const MetricsSink& sink) const {
  if (!sink) return;
  const std::uint64_t s = state_.step;
  const bool images = train_->origin == Origin::idx_images;
  auto nll_rows = [&](const Dataset& data, const char* split) {
    const double nll = mean_nll(data);
    sink({s, 0.0, "nll", nll, split});
    if (images) sink({s, 0.0, "bpd", bits_per_dim(-nll, gen_.dim()), split});
  };
  nll_rows(*train_, "train");
  if (valid_) nll_rows(*valid_, "valid");
  if (state_.interval_loss_count > 0) {
    sink({s, 0.0, "loss_gen",
          state_.interval_loss_sum / static_cast<double>(state_.interval_loss_count), "train"});
  }
  if (has_critic()) sink({s, 0.0, "w_critic", state_.last_critic_w, "train"});
}

template <typename T>
void Trainer<T>::run(const MetricsSink& sink, const std::function<void(const Trainer&)>& on_eval) {
  while (state_.step < cfg_.total_generator_steps) {
    step();
    if (state_.step % cfg_.eval_interval == 0 || state_.step == cfg_.total_generator_steps) {
      emit_metrics(sink);
      state_.interval_loss_sum = 0.0;
      state_.interval_loss_count = 0;
      if (on_eval) on_eval(*this);
    }
  }
}

template struct RunState<float>;
template struct RunState<double>;
template class Trainer<float>;
template class Trainer<double>;

}  // namespace flowcritic
