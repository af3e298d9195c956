#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "flowcritic/graph.hpp"
#include "flowcritic/optim.hpp"
#include "flowcritic/rng.hpp"

using namespace flowcritic;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>(Shape{r, c}, std::move(v));
}

Tensor<double> random_mat(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  Tensor<double> t = Tensor<double>::matrix(r, c);
  for (auto& x : t.data()) x = lo + (hi - lo) * rng.uniform();
  return t;
}

// Builds loss = sum(w0 * op(x)) so every output element carries a distinct
// random weight, then checks d loss / dx against central differences.
double op_grad_error(const std::function<NodeId(Graph<double>&, NodeId, NodeId)>& op,
                     Shape xs, Shape ys, Shape out, double lo, double hi, std::uint64_t seed) {
  Rng rng(seed);
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId y = g.input("y");
  const NodeId r = op(g, x, y);
  const NodeId loss = g.sum(g.mul(r, g.constant(random_mat(rng, out[0], out[1]))));
  TensorMap<double> in{{"x", random_mat(rng, xs[0], xs[1], lo, hi)},
                       {"y", random_mat(rng, ys[0], ys[1], lo, hi)}};
  ParamStore<double> none;
  const double ex = grad_check(graph_input_fn(g, loss, in, none, "x"), in["x"], 1e-6);
  const double ey = grad_check(graph_input_fn(g, loss, in, none, "y"), in["y"], 1e-6);
  return std::max(ex, ey);
}

}  // namespace

TEST_CASE("affine with identity weight and zero bias is the identity") {
  Graph<double> g;
  const NodeId out = g.affine(g.input("x"), g.param("w"), g.param("b"));
  ParamStore<double> p{{"w", mat(2, 2, {1, 0, 0, 1})}, {"b", mat(1, 2, {0, 0})}};
  const auto acts = evaluate<double>(g, {{"x", mat(1, 2, {1, 2})}}, p);
  CHECK(acts[out] == mat(1, 2, {1, 2}));
}

TEST_CASE("sigmoid(0) is one half") {
  Graph<double> g;
  const NodeId out = g.sigmoid(g.input("x"));
  CHECK(evaluate<double>(g, {{"x", mat(1, 1, {0})}}, ParamStore<double>{})[out].item() == 0.5);
}

TEST_CASE("matmul agrees with a triple loop") {
  Rng rng(1);
  const auto a = random_mat(rng, 3, 3), b = random_mat(rng, 3, 3);
  Graph<double> g;
  const NodeId out = g.matmul(g.input("a"), g.input("b"));
  const auto got = evaluate<double>(g, {{"a", a}, {"b", b}}, ParamStore<double>{})[out];
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      CHECK(std::abs(got(i, j) - s) < 1e-12);
    }
  }
}

TEST_CASE("shape mismatch names the node") {
  Graph<double> g;
  g.set_scope("layer7");
  const NodeId out = g.matmul(g.input("a"), g.input("b"));
  try {
    evaluate<double>(g, {{"a", Tensor<double>::matrix(2, 3)}, {"b", Tensor<double>::matrix(2, 3)}},
             ParamStore<double>{});
    FAIL("expected a shape error");
  } catch (const NodeShapeError& e) {
    CHECK(e.node() == out.index);
    CHECK(e.label() == "layer7");
  }
}

TEST_CASE("non-finite intermediate reports the node id") {
  Graph<double> g;
  const NodeId out = g.log(g.input("x"));
  try {
    evaluate<double>(g, {{"x", mat(1, 1, {-1})}}, ParamStore<double>{});
    FAIL("expected a non-finite error");
  } catch (const NonFiniteError& e) {
    CHECK(e.node() == out.index);
  }
}

TEST_CASE("x squared at 3 has gradient 6") {
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(g.square(x));
  const auto acts = evaluate<double>(g, {{"x", mat(1, 1, {3})}}, ParamStore<double>{});
  CHECK(backward(g, acts, loss).inputs.at("x").item() == 6.0);
}

TEST_CASE("sum of tanh at zero has unit gradient") {
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(g.tanh(x));
  const auto acts = evaluate<double>(g, {{"x", Tensor<double>::matrix(2, 3)}}, ParamStore<double>{});
  const auto grad = backward(g, acts, loss).inputs.at("x");
  for (double v : grad.data()) CHECK(v == 1.0);
}

TEST_CASE("two-layer net gradients match central differences") {
  Rng rng(2);
  Graph<double> g;
  const NodeId x = g.input("x", false);
  const NodeId h = g.tanh(g.affine(x, g.param("w1"), g.param("b1")));
  const NodeId o = g.affine(h, g.param("w2"), g.param("b2"));
  const NodeId loss = g.mean(g.square(g.sub(o, g.input("y", false))));
  ParamStore<double> p{{"w1", random_mat(rng, 3, 5)},
                       {"b1", random_mat(rng, 1, 5)},
                       {"w2", random_mat(rng, 5, 2)},
                       {"b2", random_mat(rng, 1, 2)}};
  TensorMap<double> in{{"x", random_mat(rng, 4, 3)}, {"y", random_mat(rng, 4, 2)}};
  for (const auto& [name, value] : p) {
    CAPTURE(name);
    CHECK(grad_check(graph_param_fn(g, loss, in, p, name), value, 1e-5) < 1e-6);
  }
}

TEST_CASE("backward rejects a non-scalar seed and a stale forward") {
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId y = g.tanh(x);
  const auto acts = evaluate<double>(g, {{"x", Tensor<double>::matrix(2, 2)}}, ParamStore<double>{});
  CHECK_THROWS_AS(backward(g, acts, y), ShapeError);
  Graph<double> other;
  const NodeId s = other.sum(other.input("x"));
  CHECK_THROWS_AS(backward(other, acts, s), Error);
}

TEST_CASE("stop-gradient yields exactly zero gradient") {
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId z = g.input("z");
  const NodeId loss = g.sum(g.mul(g.stop_gradient(x), g.exp(z)));
  const auto acts = evaluate<double>(g, {{"x", mat(1, 2, {1.5, -2})}, {"z", mat(1, 2, {0.3, 0.1})}},
                             ParamStore<double>{});
  const auto grads = backward(g, acts, loss);
  for (double v : grads.inputs.at("x").data()) CHECK(v == 0.0);
  CHECK(grads.inputs.at("z")[0] == doctest::Approx(1.5 * std::exp(0.3)));

  Graph<double> h;
  const NodeId xi = h.input("x", false);
  const NodeId l2 = h.sum(h.square(xi));
  const auto a2 = evaluate<double>(h, {{"x", mat(1, 1, {2})}}, ParamStore<double>{});
  const auto g2 = backward(h, a2, l2);
  CHECK((!g2.inputs.contains("x") || g2.inputs.at("x").item() == 0.0));
}

TEST_CASE("every op kind passes a finite-difference check") {
  using B = std::function<NodeId(Graph<double>&, NodeId, NodeId)>;
  struct Case {
    const char* name;
    B op;
    Shape x, y, out;
    double lo, hi;
  };
  const Case cases[] = {
      {"add", [](auto& g, NodeId a, NodeId b) { return g.add(a, b); }, {3, 4}, {3, 4}, {3, 4}, -1, 1},
      {"add_row", [](auto& g, NodeId a, NodeId b) { return g.add(a, b); }, {3, 4}, {1, 4}, {3, 4}, -1, 1},
      {"add_col", [](auto& g, NodeId a, NodeId b) { return g.add(a, b); }, {3, 4}, {3, 1}, {3, 4}, -1, 1},
      {"add_scalar_bcast", [](auto& g, NodeId a, NodeId b) { return g.add(a, b); }, {2, 3}, {1, 1}, {2, 3}, -1, 1},
      {"sub", [](auto& g, NodeId a, NodeId b) { return g.sub(a, b); }, {2, 5}, {1, 5}, {2, 5}, -1, 1},
      {"mul", [](auto& g, NodeId a, NodeId b) { return g.mul(a, b); }, {4, 3}, {4, 3}, {4, 3}, -1, 1},
      {"mul_col", [](auto& g, NodeId a, NodeId b) { return g.mul(a, b); }, {4, 3}, {4, 1}, {4, 3}, -1, 1},
      {"matmul", [](auto& g, NodeId a, NodeId b) { return g.matmul(a, b); }, {2, 3}, {3, 4}, {2, 4}, -1, 1},
      {"affine", [](auto& g, NodeId a, NodeId b) { return g.affine(a, b, g.slice_cols(a, 0, 2)); }, {1, 3}, {3, 2}, {1, 2}, -1, 1},
      {"neg", [](auto& g, NodeId a, NodeId b) { return g.add(g.neg(a), b); }, {3, 3}, {3, 3}, {3, 3}, -1, 1},
      {"scale", [](auto& g, NodeId a, NodeId b) { return g.add(g.scale(a, -2.5), b); }, {2, 2}, {2, 2}, {2, 2}, -1, 1},
      {"add_scalar", [](auto& g, NodeId a, NodeId b) { return g.mul(g.add_scalar(a, 0.7), b); }, {2, 2}, {2, 2}, {2, 2}, -1, 1},
      {"tanh", [](auto& g, NodeId a, NodeId b) { return g.mul(g.tanh(a), b); }, {3, 4}, {3, 4}, {3, 4}, -2, 2},
      {"sigmoid", [](auto& g, NodeId a, NodeId b) { return g.mul(g.sigmoid(a), b); }, {3, 4}, {3, 4}, {3, 4}, -3, 3},
      {"exp", [](auto& g, NodeId a, NodeId b) { return g.mul(g.exp(a), b); }, {2, 3}, {2, 3}, {2, 3}, -1, 1},
      {"log", [](auto& g, NodeId a, NodeId b) { return g.mul(g.log(a), b); }, {2, 3}, {2, 3}, {2, 3}, 0.5, 2},
      {"leaky_relu", [](auto& g, NodeId a, NodeId b) { return g.mul(g.leaky_relu(a, 0.2), b); }, {3, 3}, {3, 3}, {3, 3}, 0.1, 1},
      {"leaky_relu_neg", [](auto& g, NodeId a, NodeId b) { return g.mul(g.leaky_relu(a, 0.2), b); }, {3, 3}, {3, 3}, {3, 3}, -1, -0.1},
      {"square", [](auto& g, NodeId a, NodeId b) { return g.mul(g.square(a), b); }, {2, 4}, {2, 4}, {2, 4}, -1, 1},
      {"softplus", [](auto& g, NodeId a, NodeId b) { return g.mul(g.softplus(a), b); }, {2, 4}, {2, 4}, {2, 4}, -3, 3},
      {"sum", [](auto& g, NodeId a, NodeId b) { return g.mul(g.sum(g.mul(a, a)), b); }, {3, 3}, {1, 1}, {1, 1}, -1, 1},
      {"mean", [](auto& g, NodeId a, NodeId b) { return g.mul(g.mean(g.mul(a, a)), b); }, {3, 3}, {1, 1}, {1, 1}, -1, 1},
      {"row_sum", [](auto& g, NodeId a, NodeId b) { return g.mul(g.row_sum(g.mul(a, a)), b); }, {4, 3}, {4, 1}, {4, 1}, -1, 1},
      {"col_mean", [](auto& g, NodeId a, NodeId b) { return g.mul(g.col_mean(g.mul(a, a)), b); }, {4, 3}, {1, 3}, {1, 3}, -1, 1},
      {"slice_cols", [](auto& g, NodeId a, NodeId b) { return g.mul(g.slice_cols(a, 1, 3), b); }, {2, 4}, {2, 2}, {2, 2}, -1, 1},
      {"concat_cols", [](auto& g, NodeId a, NodeId b) { return g.concat_cols(g.tanh(a), b); }, {2, 3}, {2, 2}, {2, 5}, -1, 1},
      {"conv2d", [](auto& g, NodeId a, NodeId b) { return g.conv2d(a, b, g.slice_cols(g.sum(b), 0, 1), ConvGeometry{1, 3, 3, 1}); }, {2, 9}, {1, 9}, {2, 9}, -1, 1},
      {"conv2d_channels", [](auto& g, NodeId a, NodeId b) { return g.conv2d(a, b, g.slice_cols(g.col_mean(b), 0, 2), ConvGeometry{2, 3, 3, 2}); }, {2, 18}, {2, 18}, {2, 18}, -1, 1},
  };
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(op_grad_error(c.op, c.x, c.y, c.out, c.lo, c.hi, seed++) < 1e-4);
  }
}

TEST_CASE("evaluate is pure") {
  Rng rng(3);
  Graph<double> g;
  const NodeId out = g.col_mean(g.tanh(g.affine(g.input("x"), g.param("w"), g.param("b"))));
  ParamStore<double> p{{"w", random_mat(rng, 3, 4)}, {"b", random_mat(rng, 1, 4)}};
  TensorMap<double> in{{"x", random_mat(rng, 50, 3)}};
  CHECK(evaluate<double>(g, in, p)[out] == evaluate<double>(g, in, p)[out]);
}

TEST_CASE("col_mean is exactly permutation invariant") {
  Rng rng(4);
  const auto a = random_mat(rng, 64, 3, -1e3, 1e3);
  std::vector<std::size_t> idx(64);
  for (std::size_t i = 0; i < 64; ++i) idx[i] = (i * 37 + 5) % 64;
  Graph<double> g;
  const NodeId out = g.col_mean(g.input("x"));
  const auto m1 = evaluate<double>(g, {{"x", a}}, ParamStore<double>{})[out];
  const auto m2 = evaluate<double>(g, {{"x", gather_rows(a, std::span<const std::size_t>(idx))}},
                           ParamStore<double>{})[out];
  CHECK(m1 == m2);
}

TEST_CASE("grad_check of a linear function is round-off") {
  ScalarFn fn;
  const Tensor<double> coef = mat(1, 3, {0.5, -2, 3});
  fn.value = [&](const Tensor<double>& p) { return 0.5 * p[0] - 2 * p[1] + 3 * p[2] + 1; };
  fn.gradient = [&](const Tensor<double>&) { return coef; };
  CHECK(grad_check(fn, mat(1, 3, {1, 2, 3}), 1e-5) < 1e-10);
}

TEST_CASE("grad_check rejects non-finite values") {
  ScalarFn fn;
  fn.value = [](const Tensor<double>& p) { return std::log(p[0]); };
  fn.gradient = [](const Tensor<double>& p) { return Tensor<double>::scalar(1 / p[0]); };
  CHECK_THROWS_AS(grad_check(fn, Tensor<double>::scalar(1e-9), 1e-6), NonFiniteValue);
}

TEST_CASE("rmsprop: zero gradient leaves params unchanged") {
  ParamStore<double> p{{"w", mat(1, 2, {0.3, -0.4})}};
  OptState<double> st;
  rmsprop_step(p, {{"w", Tensor<double>::matrix(1, 2)}}, st, RmspropConfig{});
  CHECK(p.at("w") == mat(1, 2, {0.3, -0.4}));
}

TEST_CASE("rmsprop: single step hand arithmetic") {
  ParamStore<double> p{{"w", Tensor<double>::scalar(0)}};
  OptState<double> st;
  rmsprop_step(p, {{"w", Tensor<double>::scalar(1)}}, st, RmspropConfig{0.1, 0.9, 1e-8});
  CHECK(st.second.at("w").item() == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(p.at("w").item() == doctest::Approx(-0.1 / std::sqrt(0.1 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("rmsprop: constant gradient steps shrink") {
  ParamStore<double> p{{"w", Tensor<double>::scalar(0)}};
  OptState<double> st;
  const RmspropConfig cfg{0.1, 0.9, 1e-8};
  rmsprop_step(p, {{"w", Tensor<double>::scalar(1)}}, st, cfg);
  const double d1 = -p.at("w").item();
  rmsprop_step(p, {{"w", Tensor<double>::scalar(1)}}, st, cfg);
  const double d2 = -p.at("w").item() - d1;
  CHECK(d2 < d1);
  CHECK(st.second.at("w").item() > 0.1);
}

TEST_CASE("rmsprop: NaN gradient throws with state untouched") {
  ParamStore<double> p{{"a", Tensor<double>::scalar(1)}, {"b", Tensor<double>::scalar(2)}};
  OptState<double> st;
  const auto before_p = p;
  TensorMap<double> g{{"a", Tensor<double>::scalar(1)}, {"b", Tensor<double>::scalar(NAN)}};
  CHECK_THROWS_AS(rmsprop_step(p, g, st, RmspropConfig{}), NonFiniteValue);
  CHECK(p == before_p);
  CHECK(st == OptState<double>{});
}

TEST_CASE("adam: zero gradient on fresh state leaves params unchanged") {
  ParamStore<double> p{{"w", mat(1, 2, {0.3, -0.4})}};
  OptState<double> st;
  adam_step(p, {{"w", Tensor<double>::matrix(1, 2)}}, st, AdamConfig{});
  CHECK(p.at("w") == mat(1, 2, {0.3, -0.4}));
}

TEST_CASE("adam: first unit-gradient step moves by lr") {
  ParamStore<double> p{{"w", Tensor<double>::scalar(0)}};
  OptState<double> st;
  adam_step(p, {{"w", Tensor<double>::scalar(1)}}, st, AdamConfig{});
  // Bias correction makes the step lr * 1 / (1 + eps).
  CHECK(p.at("w").item() == doctest::Approx(-1e-3).epsilon(1e-7));
  CHECK(std::abs(p.at("w").item() + 1e-3) <= 1e-3 * 1e-8 * 1.01);
}

TEST_CASE("adam: 20-step scalar simulation") {
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double p = 0.5, m = 0, v = 0;
  ParamStore<double> params{{"w", Tensor<double>::scalar(0.5)}};
  OptState<double> st;
  for (int t = 1; t <= 20; ++t) {
    const double g = std::sin(0.7 * t) + 0.1 * t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
    adam_step(params, {{"w", Tensor<double>::scalar(g)}}, st, AdamConfig{lr, b1, b2, eps});
  }
  CHECK(std::abs(params.at("w").item() - p) < 1e-12);
  CHECK(st.step == 20);
}

TEST_CASE("adam: NaN gradient throws with state untouched") {
  ParamStore<double> p{{"w", Tensor<double>::scalar(1)}};
  OptState<double> st;
  CHECK_THROWS_AS(adam_step(p, {{"w", Tensor<double>::scalar(INFINITY)}}, st, AdamConfig{}),
                  NonFiniteValue);
  CHECK(p.at("w").item() == 1.0);
  CHECK(st.step == 0);
}

TEST_CASE("clip_to_box projects onto the box") {
  ParamStore<double> p{{"critic.w", mat(1, 4, {0.5, -0.5, 0.005, -0.01})},
                       {"embed.w", mat(1, 1, {0.5})}};
  const ClipSet set{"critic.w"};
  clip_to_box(p, 0.01, set);
  CHECK(p.at("critic.w") == mat(1, 4, {0.01, -0.01, 0.005, -0.01}));
  CHECK(p.at("embed.w").item() == 0.5);
  const auto once = p;
  clip_to_box(p, 0.01, set);
  CHECK(p == once);
  CHECK(max_abs_param(p, set) == 0.01);
}

TEST_CASE("clip_to_box is the max-norm projection") {
  Rng rng(5);
  const double c = 0.3;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore<double> p{{"w", random_mat(rng, 3, 3, -1, 1)}};
    const auto orig = p.at("w");
    clip_to_box(p, c, ClipSet{"w"});
    double dist = 0, lower = 0;
    for (std::size_t i = 0; i < orig.size(); ++i) {
      dist = std::max(dist, std::abs(p.at("w")[i] - orig[i]));
      lower = std::max(lower, std::abs(orig[i]) - c);
    }
    CHECK(dist == doctest::Approx(std::max(lower, 0.0)));
  }
}
