#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "flowcritic/evaluation.hpp"
#include "flowcritic/training.hpp"

using namespace flowcritic;

namespace {

const RingMixture kRing{8, 2.0, 0.5, 1};

Splits ring_splits(std::size_t n, std::uint64_t seed) {
  return split_and_augment(synth_ring(n, kRing, seed), {0.8, 0.1, 0.1}, false, seed);
}

IndependentCriticConfig critic_cfg(const Dataset& d, std::size_t budget) {
  IndependentCriticConfig ic;
  ic.critic = default_critic_config(d, 0.01, 32);
  ic.budget = budget;
  ic.seed = 5;
  return ic;
}

FlowModel<double> two_by_three_layer() {
  FlowModel<double> m(2, 1, 8);
  append_identity_coupling(m, {1, 0}, 1);
  auto& p = m.params();
  p.at("flow.c00.bs")[1] = std::atanh(std::log(2.0) / 4.0);
  p.at("flow.c00.bt")[1] = 3.0;
  return m;
}

FlowModel<double> perturbed(int levels, std::size_t dim, std::uint64_t seed, double sd) {
  auto m = build_nvp<double>(levels, dim, 8, seed);
  Rng rng(seed + 100);
  for (auto& [name, p] : m.params()) {
    for (auto& x : p.data()) x += sd * rng.normal();
  }
  return m;
}

double gauss_logpdf(const std::vector<double>& x, const std::vector<double>& mu) {
  double q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) q += (x[i] - mu[i]) * (x[i] - mu[i]);
  return -0.5 * q - 0.5 * static_cast<double>(x.size()) * std::log(2 * std::numbers::pi);
}

}  // namespace

TEST_CASE("zero budget gives the zero critic and zero estimate") {
  const Splits sp = ring_splits(2000, 1);
  const auto ident = FlowModel<float>::identity(2);
  const auto ic = train_independent_critic<float>(dataset_source<float>(sp.valid), model_source<float>(ident),
                                                  critic_cfg(sp.train, 0));
  CHECK(ic.updates == 0);
  for (const auto& [name, p] : ic.critic.params()) {
    for (float v : p.data()) CHECK(v == 0.0f);
  }
  const auto w = w_hat(ic, dataset_source<float>(sp.valid), model_source<float>(ident), 10, 64, 2);
  CHECK(w.value == 0.0);
  CHECK(w.bootstrap_std == 0.0);
}

TEST_CASE("independent critic separates prior samples from the ring") {
  const Splits sp = ring_splits(6000, 2);
  const auto ident = FlowModel<float>::identity(2);
  const auto cfg = critic_cfg(sp.train, 2000);
  const auto ic = train_independent_critic<float>(dataset_source<float>(sp.valid), model_source<float>(ident), cfg);
  CHECK(ic.updates == 2000);
  CHECK(max_abs_param(ic.critic.params(), ic.critic.clip_set()) <= cfg.critic.clip_c);
  const auto w = w_hat(ic, dataset_source<float>(sp.valid), model_source<float>(ident), 50, 128, 3);
  CHECK(w.batch_values.size() == 50);
  CHECK(w.bootstrap_std > 0.0);
  CHECK(w.value > 10 * w.bootstrap_std);
  // Same source on both sides.
  const auto same = w_hat(ic, dataset_source<float>(sp.valid), dataset_source<float>(sp.valid), 50, 128, 4);
  CHECK(std::abs(same.value) < 3 * same.bootstrap_std);
}

TEST_CASE("critic between two halves of one large sample set finds nothing") {
  const Dataset all = synth_ring(100000, kRing, 3);
  const auto a = take_rows(all.examples, 0, 50000).cast<float>();
  const auto b = take_rows(all.examples, 50000, 100000).cast<float>();
  const auto ic = train_independent_critic<float>(matrix_source<float>(a), matrix_source<float>(b),
                                                  critic_cfg(all, 2000));
  const auto w = w_hat(ic, matrix_source<float>(a), matrix_source<float>(b), 100, 256, 6);
  CHECK(std::abs(w.value) < 3 * w.bootstrap_std);
}

TEST_CASE("w_hat mean and bootstrap spread") {
  // A critic with a constant output: every batch difference is zero.
  const Splits sp = ring_splits(500, 4);
  IndependentCritic<double> ic{Critic<double>::zeros(default_critic_config(sp.train, 0.01, 4)), 0};
  ic.critic.params().at("critic.b3")[0] = 0.5;
  const auto w = w_hat(ic, dataset_source<double>(sp.valid), dataset_source<double>(sp.train), 20, 16, 1);
  CHECK(w.value == 0.0);
  WEstimate x{1.0, 0.3, {}}, y{2.0, 0.4, {}};
  CHECK(pooled_std(x, y) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS(w_hat(ic, dataset_source<double>(sp.valid), dataset_source<double>(sp.train), 0, 16, 1));
}

TEST_CASE("w_hat averages per-batch differences") {
  // Critic f(x) = w * leaky(leaky(x0)) in its positive region reduces to a
  // linear function of x0, so the estimate is w times the mean-x0 gap.
  CriticConfig cc;
  cc.dim = 1;
  cc.hidden = 1;
  cc.input_scale = 1.0;
  IndependentCritic<double> ic{Critic<double>::zeros(cc), 1};
  auto& p = ic.critic.params();
  p.at("critic.w1")[0] = 1.0;
  p.at("critic.w2")[0] = 1.0;
  p.at("critic.w3")[0] = 0.25;
  Tensor<double> ones = Tensor<double>::matrix(10, 1);
  Tensor<double> threes = Tensor<double>::matrix(10, 1);
  for (auto& v : ones.data()) v = 1.0;
  for (auto& v : threes.data()) v = 3.0;
  const auto w = w_hat(ic, matrix_source<double>(threes), matrix_source<double>(ones), 7, 5, 2);
  CHECK(w.value == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(w.bootstrap_std == doctest::Approx(0.0).epsilon(1e-14));
  for (double v : w.batch_values) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("histogram bins") {
  const std::vector<double> one{2.5};
  const auto h1 = histogram(one, 4);
  CHECK(h1.total() == 1);
  CHECK(std::count_if(h1.counts.begin(), h1.counts.end(), [](auto c) { return c > 0; }) == 1);

  const std::vector<double> v{0.0, 1.0, 2.0, 3.0, 4.0, 4.0};
  const auto h = histogram(v, 4);
  CHECK(h.edges.size() == 5);
  CHECK(h.edges.front() == 0.0);
  CHECK(h.edges.back() == 4.0);
  CHECK(h.counts == std::vector<std::uint64_t>{1, 1, 1, 3});
  CHECK(h.total() == v.size());

  const std::vector<double> empty;
  CHECK_THROWS_AS(histogram(empty, 3), InvalidArgument);
  CHECK_THROWS_AS(histogram(v, 0), InvalidArgument);
}

TEST_CASE("NLL values and histogram of a model") {
  const auto m = two_by_three_layer();
  Rng rng(3);
  const auto x = rng.normal_matrix<double>(300, 2);
  const auto nll = nll_values(m, x);
  const auto lp = log_prob(m, x);
  REQUIRE(nll.size() == 300);
  for (std::size_t i = 0; i < 300; ++i) CHECK(nll[i] == -lp[i]);
  const auto h = nll_histogram(m, x, 12);
  CHECK(h.total() == 300);
  CHECK(h.edges.front() == *std::min_element(nll.begin(), nll.end()));
  CHECK(h.edges.back() == *std::max_element(nll.begin(), nll.end()));
}

TEST_CASE("latent stats recover the prior on a model's own samples") {
  const auto m = perturbed(1, 4, 3, 0.1);
  const auto s = sample(m, 10000, 17);
  const auto st = latent_stats(m, s.x, {1, 3});
  REQUIRE(st.mean.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(st.mean[i]) < 0.1);
    CHECK(st.std[i] >= 0.9);
    CHECK(st.std[i] <= 1.1);
  }
  CHECK(st.counts.size() == st.grid.bins * st.grid.bins);
  std::uint64_t total = 0;
  for (auto c : st.counts) total += c;
  CHECK(total <= 10000);
  CHECK(total > 9990);
  CHECK_THROWS_AS(latent_stats(m, s.x, {0, 4}), InvalidArgument);
}

TEST_CASE("latent stats of a shifted and scaled data set") {
  // Identity model: the latent is the data, so moments are plain statistics.
  const auto m = FlowModel<double>::identity(2);
  Tensor<double> x = Tensor<double>::matrix(4, 2);
  const double vals[] = {1, 10, 3, 10, 5, 10, 7, 10};
  std::copy(vals, vals + 8, x.data().begin());
  const auto st = latent_stats(m, x, {0, 1}, GridSpec{2, 0.0, 8.0});
  CHECK(st.mean[0] == 4.0);
  CHECK(st.std[0] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-14));
  CHECK(st.mean[1] == 10.0);
  CHECK(st.std[1] == 0.0);
  // Second dim at 10 lies outside [0, 8]; every row is dropped.
  for (auto c : st.counts) CHECK(c == 0);
}

TEST_CASE("singular values against closed forms") {
  Tensor<double> d = Tensor<double>::matrix(3, 3);
  d(0, 0) = -2;
  d(1, 1) = 5;
  d(2, 2) = 0.5;
  const auto sd = singular_values(d);
  CHECK(sd[0] == doctest::Approx(5).epsilon(1e-12));
  CHECK(sd[1] == doctest::Approx(2).epsilon(1e-12));
  CHECK(sd[2] == doctest::Approx(0.5).epsilon(1e-12));

  // 2x2: s^2 are the roots of s^4 - |A|_F^2 s^2 + det^2.
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    Tensor<double> a = rng.normal_matrix<double>(2, 2);
    const double f = a(0, 0) * a(0, 0) + a(0, 1) * a(0, 1) + a(1, 0) * a(1, 0) + a(1, 1) * a(1, 1);
    const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    const double disc = std::sqrt(f * f - 4 * det * det);
    const auto s = singular_values(a);
    CHECK(s[0] == doctest::Approx(std::sqrt((f + disc) / 2)).epsilon(1e-10));
    CHECK(s[1] == doctest::Approx(std::sqrt(std::max(0.0, (f - disc) / 2))).epsilon(1e-8));
  }

  // Tall matrix with orthogonal columns.
  Tensor<double> t = Tensor<double>::matrix(4, 2);
  t(0, 0) = 3;
  t(1, 0) = 4;
  t(2, 1) = 1;
  const auto st = singular_values(t);
  REQUIRE(st.size() == 2);
  CHECK(st[0] == doctest::Approx(5).epsilon(1e-12));
  CHECK(st[1] == doctest::Approx(1).epsilon(1e-12));

  CHECK(numerical_rank({1.0, 0.5, 1e-4}, 1e-3) == 2);
  CHECK(numerical_rank({2.0, 2.0}, 1e-3) == 2);
  CHECK(numerical_rank({0.0, 0.0}, 1e-3) == 0);
}

TEST_CASE("Jacobian rank of hand-checked models") {
  Rng rng(6);
  const auto probes = rng.normal_matrix<double>(5, 2);
  for (const auto& r : jacobian_rank(FlowModel<double>::identity(2), probes)) {
    CHECK(r.rank == 2);
    CHECK(r.singular_values[0] == doctest::Approx(1));
    CHECK(r.singular_values[1] == doctest::Approx(1));
  }
  for (const auto& r : jacobian_rank(two_by_three_layer(), probes)) {
    CHECK(r.rank == 2);
    CHECK(r.singular_values[0] == doctest::Approx(2).epsilon(1e-12));
    CHECK(r.singular_values[1] == doctest::Approx(1).epsilon(1e-12));
    CHECK(r.fd_error < 1e-6);
  }
}

TEST_CASE("flow Jacobian matches central differences") {
  const auto m = perturbed(2, 4, 8, 0.2);
  Rng rng(9);
  const auto z = rng.normal_matrix<double>(1, 4);
  const auto j = flow_jacobian(m, std::span<const double>(z.data()));
  const double h = 1e-6;
  for (std::size_t c = 0; c < 4; ++c) {
    Tensor<double> zp = z, zm = z;
    zp(0, c) += h;
    zm(0, c) -= h;
    const auto fp = forward(m, zp).value;
    const auto fm = forward(m, zm).value;
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(j(r, c) == doctest::Approx((fp(0, r) - fm(0, r)) / (2 * h)).epsilon(1e-6));
    }
  }
  // log|det J| agrees with the flow's own log-determinant.
  double lu_logdet = 0.0;
  Tensor<double> a = j;
  for (std::size_t k = 0; k < 4; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < 4; ++r) {
      if (std::abs(a(r, k)) > std::abs(a(piv, k))) piv = r;
    }
    for (std::size_t c = 0; c < 4; ++c) std::swap(a(k, c), a(piv, c));
    lu_logdet += std::log(std::abs(a(k, k)));
    for (std::size_t r = k + 1; r < 4; ++r) {
      const double f = a(r, k) / a(k, k);
      for (std::size_t c = k; c < 4; ++c) a(r, c) -= f * a(k, c);
    }
  }
  CHECK(lu_logdet == doctest::Approx(forward(m, z).logdet.item()).epsilon(1e-9));
}

TEST_CASE("stacked contractions lower the numerical rank") {
  // Three couplings that each scale dim 1 by e^-4 give e^-12 < 1e-3.
  FlowModel<double> m(2, 1, 8);
  for (int k = 0; k < 3; ++k) append_identity_coupling(m, {1, 0}, k);
  for (int k = 0; k < 3; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "flow.c%02d.bs", k);
    m.params().at(name)[1] = -50.0;
  }
  Rng rng(10);
  const auto ranks = jacobian_rank(m, rng.normal_matrix<double>(5, 2));
  REQUIRE(ranks.size() == 5);
  for (const auto& r : ranks) {
    CHECK(r.rank == 1);
    CHECK(r.singular_values[1] == doctest::Approx(std::exp(-12.0)).epsilon(1e-9));
  }
  const auto loose = jacobian_rank(m, rng.normal_matrix<double>(2, 2), 1e-7);
  for (const auto& r : loose) CHECK(r.rank == 2);
}

TEST_CASE("Gaussian shift flow") {
  const std::vector<double> mu{1.5, -2.0, 0.25};
  const auto m = gaussian_shift_flow<double>(mu);
  const auto s = sample(m, 20000, 3);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < s.x.rows(); ++i) mean += s.x(i, d);
    mean /= static_cast<double>(s.x.rows());
    CHECK(std::abs(mean - mu[d]) < 0.03);
  }
  for (std::size_t i = 0; i < 20; ++i) {
    std::vector<double> x{s.x(i, 0), s.x(i, 1), s.x(i, 2)};
    CHECK(s.log_prob[i] == doctest::Approx(gauss_logpdf(x, mu)).epsilon(1e-12));
  }
}

TEST_CASE("unbiased KL estimates") {
  DiscriminatorConfig quick;
  quick.updates = 1;
  // q = p gives zero per sample.
  const auto zero = kl_gap(FlowModel<double>::identity(3), quick, 1000);
  CHECK(zero.kl_unbiased == 0.0);
  // Closed form ||mu||^2 / 2.
  const std::vector<double> mu{1.0, -2.0};
  const auto shifted = kl_gap(gaussian_shift_flow<double>(mu), quick, 100000);
  CHECK(shifted.kl_unbiased == doctest::Approx(2.5).epsilon(0.02));
  // An extra identity coupling leaves the distribution and the estimate alone.
  auto m = perturbed(1, 2, 12, 0.2);
  const auto before = kl_gap(m, quick, 5000);
  append_identity_coupling(m, {0, 1}, 99);
  const auto after = kl_gap(m, quick, 5000);
  CHECK(std::abs(after.kl_unbiased - before.kl_unbiased) < 1e-9);
}

TEST_CASE("discriminator loss is minimised by the log-ratio logit") {
  // Check the sign convention through one gradient: with a zero network the
  // loss is 2 log 2 and its gradient on the output bias is the label balance.
  DiscriminatorConfig cfg;
  cfg.hidden = 4;
  auto d = make_discriminator<double>(2, cfg);
  for (auto& [name, p] : d.params) {
    for (auto& v : p.data()) v = 0.0;
  }
  Graph<double> g;
  const NodeId loss = append_disc_loss(g, d, g.input("x_prior", false), g.input("x_q", false));
  Rng rng(1);
  TensorMap<double> in;
  in.emplace("x_prior", rng.normal_matrix<double>(8, 2));
  in.emplace("x_q", rng.normal_matrix<double>(8, 2));
  const auto acts = evaluate<double>(g, in, ParamView<double>(d.params));
  CHECK(acts[loss].item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-14));
  // With the logit fixed at b, the loss is -log s(b) - log s(-b), symmetric in b.
  for (auto& [name, p] : d.params) {
    if (name.ends_with("b3")) p[0] = 0.7;
  }
  const auto acts2 = evaluate<double>(g, in, ParamView<double>(d.params));
  const double s = 1 / (1 + std::exp(-0.7));
  CHECK(acts2[loss].item() == doctest::Approx(-std::log(s) - std::log(1 - s)).epsilon(1e-12));
}

TEST_CASE("discriminator KL on a shifted Gaussian") {
  // The optimal logit is -mu.z + |mu|^2/2, so kl_disc should come close to
  // the true value of 0.5 when the shift is small.
  DiscriminatorConfig cfg;
  cfg.updates = 1500;
  cfg.hidden = 16;
  cfg.seed = 2;
  const auto r = kl_gap(gaussian_shift_flow<double>({1.0, 0.0}), cfg, 20000);
  CHECK(r.kl_unbiased == doctest::Approx(0.5).epsilon(0.05));
  CHECK(r.kl_disc == doctest::Approx(0.5).epsilon(0.2));
}

TEST_CASE("parallel_for visits each index once and rethrows") {
  std::vector<std::atomic<int>> hits(257);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                    if (i == 7) throw std::runtime_error("boom");
                  }),
                  std::runtime_error);
  parallel_for(0, [](std::size_t) { FAIL("called on empty range"); });
}

TEST_CASE("worker thread count honours the environment") {
  ::setenv("FLOWCRITIC_THREADS", "3", 1);
  CHECK(worker_threads() == 3);
  ::setenv("FLOWCRITIC_THREADS", "0", 1);
  CHECK(worker_threads() >= 1);
  ::setenv("FLOWCRITIC_THREADS", "x", 1);
  CHECK(worker_threads() >= 1);
  ::setenv("FLOWCRITIC_THREADS", "4", 1);
  std::vector<std::atomic<int>> hits(40);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  ::unsetenv("FLOWCRITIC_THREADS");
}
