#include "flowcritic/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "flowcritic/optim.hpp"

namespace flowcritic {

template <typename T>
SampleSource<T> dataset_source(const Dataset& data) {
  if (data.size() == 0) throw InvalidArgument("dataset_source: empty dataset");
  return [&data](std::size_t n, Rng& rng) {
    // Index and noise draws share the caller's stream.
    return draw_batch<T>(data, n, rng, rng);
  };
}

template <typename T>
SampleSource<T> matrix_source(Tensor<T> rows) {
  if (rows.empty()) throw InvalidArgument("matrix_source: no rows");
  return [rows = std::move(rows)](std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.index(rows.rows());
    return gather_rows(rows, idx);
  };
}

template <typename T>
SampleSource<T> model_source(FlowModel<T> model) {
  return [model = std::move(model)](std::size_t n, Rng& rng) { return sample(model, n, rng).x; };
}

template <typename T>
IndependentCritic<T> train_independent_critic(const SampleSource<T>& valid,
                                              const SampleSource<T>& gen,
                                              const IndependentCriticConfig& cfg) {
  if (cfg.budget == 0) return {Critic<T>::zeros(cfg.critic), 0};
  if (cfg.batch_size < 1) throw InvalidArgument("independent critic: empty batch");
  IndependentCritic<T> ic{Critic<T>(cfg.critic, stream_seed(cfg.seed, 11)), 0};
  Graph<T> g;
  const NodeId w = append_wgan_objective(g, append_critic(g, ic.critic, g.input("a", false)),
                                         append_critic(g, ic.critic, g.input("b", false)));
  const NodeId loss = g.neg(w);
  Rng rng(stream_seed(cfg.seed, 12));
  OptState<T> opt;
  const RmspropConfig rc{cfg.lr, 0.99, 1e-8};
  for (std::size_t u = 0; u < cfg.budget; ++u) {
    TensorMap<T> in;
    in.emplace("a", valid(cfg.batch_size, rng));
    in.emplace("b", gen(cfg.batch_size, rng));
    const auto acts = evaluate(g, in, ParamView<T>(ic.critic.params()));
    rmsprop_step(ic.critic.params(), backward(g, acts, loss).params, opt, rc);
    ic.critic.clip();
    ic.updates += 1;
  }
  return ic;
}

template <typename T>
WEstimate w_hat(const IndependentCritic<T>& ic, const SampleSource<T>& a, const SampleSource<T>& b,
                std::size_t n_batches, std::size_t batch_size, std::uint64_t seed,
                std::size_t resamples) {
  if (n_batches < 1 || batch_size < 1) throw InvalidArgument("w_hat: need at least one batch");
  Rng rng(seed);
  WEstimate est;
  for (std::size_t i = 0; i < n_batches; ++i) {
    const Tensor<T> xa = a(batch_size, rng);
    const Tensor<T> xb = b(batch_size, rng);
    if (xa.rows() < batch_size || xb.rows() < batch_size) {
      throw InvalidArgument("w_hat: source yielded too few samples");
    }
    est.batch_values.push_back(wgan_objective(ic.critic, xa, xb));
  }
  double sum = 0.0;
  for (double v : est.batch_values) sum += v;
  est.value = sum / static_cast<double>(n_batches);

  if (resamples > 1) {
    Rng boot(stream_seed(seed, 0xB007));
    std::vector<double> means(resamples);
    for (auto& m : means) {
      double s = 0.0;
      for (std::size_t i = 0; i < n_batches; ++i) s += est.batch_values[boot.index(n_batches)];
      m = s / static_cast<double>(n_batches);
    }
    double mu = 0.0;
    for (double m : means) mu += m;
    mu /= static_cast<double>(resamples);
    double var = 0.0;
    for (double m : means) var += (m - mu) * (m - mu);
    est.bootstrap_std = std::sqrt(var / static_cast<double>(resamples - 1));
  }
  return est;
}

double pooled_std(const WEstimate& a, const WEstimate& b) {
  return std::hypot(a.bootstrap_std, b.bootstrap_std);
}

std::uint64_t Histogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

Histogram histogram(std::span<const double> values, std::size_t n_bins) {
  if (n_bins < 1) throw InvalidArgument("histogram: n_bins must be at least 1");
  if (values.empty()) throw InvalidArgument("histogram: no values");
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteValue("histogram: non-finite value");
  }
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  double lo = *mn, hi = *mx;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.edges.resize(n_bins + 1);
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (std::size_t i = 0; i <= n_bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.edges.back() = hi;
  h.counts.assign(n_bins, 0);
  for (double v : values) {
    auto bin = static_cast<std::size_t>((v - lo) / width);
    h.counts[std::min(bin, n_bins - 1)] += 1;
  }
  return h;
}

template <typename T>
std::vector<double> nll_values(const FlowModel<T>& model, const Tensor<T>& data) {
  if (data.empty()) throw InvalidArgument("nll: empty data");
  const Tensor<T> lp = log_prob(model, data);
  std::vector<double> out(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) out[i] = -static_cast<double>(lp[i]);
  return out;
}

template <typename T>
Histogram nll_histogram(const FlowModel<T>& model, const Tensor<T>& data, std::size_t n_bins) {
  if (n_bins < 1) throw InvalidArgument("histogram: n_bins must be at least 1");
  const auto v = nll_values(model, data);
  return histogram(v, n_bins);
}

template <typename T>
LatentStats latent_stats(const FlowModel<T>& model, const Tensor<T>& data,
                         std::array<std::size_t, 2> dims, GridSpec grid) {
  if (data.empty()) throw InvalidArgument("latent_stats: empty data");
  if (dims[0] >= model.dim() || dims[1] >= model.dim()) {
    throw InvalidArgument("latent_stats: dim out of range");
  }
  if (grid.bins < 1 || !(grid.hi > grid.lo)) throw InvalidArgument("latent_stats: bad grid");
  const Tensor<T> z = inverse(model, data).value;
  const std::size_t n = z.rows(), d = z.cols();
  LatentStats st;
  st.dims = dims;
  st.grid = grid;
  st.mean.assign(d, 0.0);
  st.std.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) st.mean[j] += static_cast<double>(z(i, j));
  }
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(z(i, j)) - st.mean[j];
      st.std[j] += c * c;
    }
  }
  for (auto& s : st.std) s = std::sqrt(s / static_cast<double>(n));

  st.counts.assign(grid.bins * grid.bins, 0);
  const double width = (grid.hi - grid.lo) / static_cast<double>(grid.bins);
  auto cell = [&](double v) -> std::ptrdiff_t {
    if (v < grid.lo || v > grid.hi) return -1;
    return static_cast<std::ptrdiff_t>(
        std::min(static_cast<std::size_t>((v - grid.lo) / width), grid.bins - 1));
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = cell(static_cast<double>(z(i, dims[0])));
    const auto b = cell(static_cast<double>(z(i, dims[1])));
    if (a < 0 || b < 0) continue;
    st.counts[static_cast<std::size_t>(a) * grid.bins + static_cast<std::size_t>(b)] += 1;
  }
  return st;
}

namespace {

// Row i of every probe's Jacobian in one reverse pass per output dim.
template <typename T>
std::vector<Tensor<double>> batched_jacobians(const FlowModel<T>& model, const Tensor<T>& probes) {
  const std::size_t p = probes.rows(), d = model.dim();
  Graph<T> g;
  const NodeId z0 = g.input("z0", true);
  const FlowNodes out = append_forward(g, model, z0);
  const auto acts = evaluate(g, TensorMap<T>{{"z0", probes}}, ParamView<T>(model.params()));
  std::vector<Tensor<double>> jac(p, Tensor<double>::matrix(d, d));
  for (std::size_t i = 0; i < d; ++i) {
    Tensor<T> cot = Tensor<T>::matrix(p, d);
    for (std::size_t r = 0; r < p; ++r) cot(r, i) = T(1);
    const auto grads = vjp(g, acts, out.value, cot);
    const Tensor<T>& gz = grads.inputs.at("z0");
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t j = 0; j < d; ++j) jac[r](i, j) = static_cast<double>(gz(r, j));
    }
  }
  return jac;
}

}  // namespace

template <typename T>
Tensor<double> flow_jacobian(const FlowModel<T>& model, std::span<const T> z0) {
  if (z0.size() != model.dim()) throw ShapeError("flow_jacobian: probe width mismatch");
  Tensor<T> probe = Tensor<T>::matrix(1, model.dim());
  std::copy(z0.begin(), z0.end(), probe.data().begin());
  return batched_jacobians(model, probe).front();
}

std::vector<double> singular_values(const Tensor<double>& a, int max_sweeps) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) throw ShapeError("singular_values: need rows >= cols");
  // One-sided Jacobi: orthogonalise columns; their norms are the singular values.
  std::vector<double> u(a.storage());
  auto col = [&](std::size_t r, std::size_t c) -> double& { return u[r * n + c]; };
  const double eps = 1e-15;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t r = 0; r < m; ++r) {
          alpha += col(r, p) * col(r, p);
          beta += col(r, q) * col(r, q);
          gamma += col(r, p) * col(r, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < m; ++r) {
          const double up = col(r, p), uq = col(r, q);
          col(r, p) = c * up - s * uq;
          col(r, q) = s * up + c * uq;
        }
      }
    }
  }
  if (!converged) {
    throw ConvergenceError("Jacobi SVD did not converge in " + std::to_string(max_sweeps) +
                           " sweeps");
  }
  std::vector<double> sv(n);
  for (std::size_t c = 0; c < n; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < m; ++r) s += col(r, c) * col(r, c);
    sv[c] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::size_t numerical_rank(const std::vector<double>& sv, double tol_ratio) {
  if (sv.empty()) return 0;
  const double cut = tol_ratio * sv.front();
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s > cut; }));
}

template <typename T>
std::vector<ProbeRank> jacobian_rank(const FlowModel<T>& model, const Tensor<T>& probes,
                                     double tol_ratio, double fd_tol) {
  if (!(tol_ratio > 0 && tol_ratio < 1)) throw InvalidArgument("tol_ratio must be in (0, 1)");
  if (model.dim() > 64) throw InvalidArgument("jacobian_rank: D must be at most 64");
  if (probes.cols() != model.dim()) throw ShapeError("jacobian_rank: probe width mismatch");
  const FlowModel<double> md = model.template cast<double>();
  const Tensor<double> pd = probes.template cast<double>();
  const auto jac = batched_jacobians(md, pd);
  const std::size_t d = model.dim();

  std::vector<ProbeRank> out(probes.rows());
  parallel_for(probes.rows(), [&](std::size_t p) {
    // Central differences, all 2D perturbed points in one forward pass.
    const double h = 1e-6;
    Tensor<double> pts = Tensor<double>::matrix(2 * d, d);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        pts(2 * j, k) = pd(p, k);
        pts(2 * j + 1, k) = pd(p, k);
      }
      pts(2 * j, j) += h;
      pts(2 * j + 1, j) -= h;
    }
    const Tensor<double> f = forward(md, pts).value;
    double worst = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        const double fd = (f(2 * j, i) - f(2 * j + 1, i)) / (2.0 * h);
        const double a = jac[p](i, j);
        worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
      }
    }
    out[p].fd_error = worst;
    if (!(worst <= fd_tol)) {
      throw ConvergenceError("jacobian probe " + std::to_string(p) +
                             ": reverse mode disagrees with finite differences (" +
                             std::to_string(worst) + ")");
    }
    try {
      out[p].singular_values = singular_values(jac[p]);
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("jacobian probe " + std::to_string(p) + ": " + e.what());
    }
    out[p].rank = numerical_rank(out[p].singular_values, tol_ratio);
  });
  return out;
}

template <typename T>
FlowModel<T> gaussian_shift_flow(const std::vector<double>& mu) {
  const std::size_t d = mu.size();
  if (d < 2) throw InvalidArgument("gaussian_shift_flow: need D >= 2");
  FlowModel<T> model(d, 1, 4);
  for (int parity = 0; parity < 2; ++parity) {
    std::vector<std::uint8_t> mask(d);
    for (std::size_t i = 0; i < d; ++i) mask[i] = (i % 2 == static_cast<std::size_t>(parity)) ? 1 : 0;
    append_identity_coupling(model, mask, static_cast<std::uint64_t>(parity));
    const AffineCoupling& layer = model.layers().back();
    Tensor<T>& bt = model.params().at(layer.prefix + "bt");
    for (std::size_t i = 0; i < d; ++i) {
      if (layer.updates(i)) bt[i] = static_cast<T>(mu[i]);
    }
  }
  return model;
}

template <typename T>
Discriminator<T> make_discriminator(std::size_t dim, const DiscriminatorConfig& cfg) {
  if (dim < 1 || cfg.hidden < 1) throw InvalidArgument("discriminator: empty layer");
  Discriminator<T> d{cfg, dim, {}};
  Rng rng(stream_seed(cfg.seed, 21));
  auto init = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor<T> w = Tensor<T>::matrix(fan_in, fan_out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : w.data()) x = static_cast<T>(rng.normal() * sd);
    return w;
  };
  const std::string& p = cfg.prefix;
  d.params[p + "w1"] = init(dim, cfg.hidden);
  d.params[p + "b1"] = Tensor<T>::matrix(1, cfg.hidden);
  d.params[p + "w2"] = init(cfg.hidden, cfg.hidden);
  d.params[p + "b2"] = Tensor<T>::matrix(1, cfg.hidden);
  d.params[p + "w3"] = Tensor<T>::matrix(cfg.hidden, 1);
  d.params[p + "b3"] = Tensor<T>::matrix(1, 1);
  return d;
}

template <typename T>
NodeId append_disc_logit(Graph<T>& g, const Discriminator<T>& d, NodeId x) {
  const std::string& p = d.cfg.prefix;
  const NodeId h1 = g.leaky_relu(g.affine(x, g.param(p + "w1"), g.param(p + "b1")), d.cfg.leak);
  const NodeId h2 = g.leaky_relu(g.affine(h1, g.param(p + "w2"), g.param(p + "b2")), d.cfg.leak);
  return g.affine(h2, g.param(p + "w3"), g.param(p + "b3"));
}

template <typename T>
NodeId append_disc_loss(Graph<T>& g, const Discriminator<T>& d, NodeId x_prior, NodeId x_q) {
  // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l).
  const NodeId lp = append_disc_logit(g, d, x_prior);
  const NodeId lq = append_disc_logit(g, d, x_q);
  return g.add(g.mean(g.softplus(g.neg(lp))), g.mean(g.softplus(lq)));
}

template <typename T>
KlGap kl_gap(const FlowModel<T>& flow_q, const DiscriminatorConfig& disc, std::size_t n) {
  if (n < 1) throw InvalidArgument("kl_gap: n must be positive");
  const std::size_t dim = flow_q.dim();
  Rng rng(stream_seed(disc.seed, 31));
  KlGap out;

  const Samples<T> s = sample(flow_q, n, rng);
  const Tensor<T> lp = prior_logpdf(s.x);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += static_cast<double>(s.log_prob[i]) - static_cast<double>(lp[i]);
  }
  out.kl_unbiased = sum / static_cast<double>(n);

  Discriminator<T> d = make_discriminator<T>(dim, disc);
  Graph<T> g;
  const NodeId loss = append_disc_loss(g, d, g.input("x_prior", false), g.input("x_q", false));
  OptState<T> opt;
  for (std::size_t u = 0; u < disc.updates; ++u) {
    TensorMap<T> in;
    in.emplace("x_prior", rng.normal_matrix<T>(disc.batch_size, dim));
    in.emplace("x_q", sample(flow_q, disc.batch_size, rng).x);
    const auto acts = evaluate(g, in, ParamView<T>(d.params));
    try {
      adam_step(d.params, backward(g, acts, loss).params, opt, AdamConfig{disc.lr});
    } catch (const NonFiniteValue& e) {
      throw NonFiniteValue(std::string("KL discriminator diverged: ") + e.what());
    }
  }

  Graph<T> ge;
  const NodeId logit = append_disc_logit(ge, d, ge.input("z", false));
  const Tensor<T> l = evaluate(ge, TensorMap<T>{{"z", s.x}}, ParamView<T>(d.params))[logit];
  double ls = 0.0;
  for (T v : l.data()) ls += static_cast<double>(v);
  out.kl_disc = -ls / static_cast<double>(n);
  return out;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("FLOWCRITIC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

#define FLOWCRITIC_INSTANTIATE(T)                                                                 \
  template SampleSource<T> dataset_source<T>(const Dataset&);                                     \
  template SampleSource<T> matrix_source(Tensor<T>);                                              \
  template SampleSource<T> model_source(FlowModel<T>);                                            \
  template IndependentCritic<T> train_independent_critic(                                         \
      const SampleSource<T>&, const SampleSource<T>&, const IndependentCriticConfig&);            \
  template WEstimate w_hat(const IndependentCritic<T>&, const SampleSource<T>&,                   \
                           const SampleSource<T>&, std::size_t, std::size_t, std::uint64_t,       \
                           std::size_t);                                                          \
  template std::vector<double> nll_values(const FlowModel<T>&, const Tensor<T>&);                 \
  template Histogram nll_histogram(const FlowModel<T>&, const Tensor<T>&, std::size_t);           \
  template LatentStats latent_stats(const FlowModel<T>&, const Tensor<T>&,                        \
                                    std::array<std::size_t, 2>, GridSpec);                        \
  template std::vector<ProbeRank> jacobian_rank(const FlowModel<T>&, const Tensor<T>&, double,    \
                                                double);                                          \
  template Tensor<double> flow_jacobian(const FlowModel<T>&, std::span<const T>);                 \
  template FlowModel<T> gaussian_shift_flow<T>(const std::vector<double>&);                       \
  template Discriminator<T> make_discriminator<T>(std::size_t, const DiscriminatorConfig&);       \
  template NodeId append_disc_logit(Graph<T>&, const Discriminator<T>&, NodeId);                  \
  template NodeId append_disc_loss(Graph<T>&, const Discriminator<T>&, NodeId, NodeId);           \
  template KlGap kl_gap(const FlowModel<T>&, const DiscriminatorConfig&, std::size_t);

FLOWCRITIC_INSTANTIATE(float)
FLOWCRITIC_INSTANTIATE(double)
#undef FLOWCRITIC_INSTANTIATE

}  // namespace flowcritic
