#include <cmath>
#include <numeric>

#include "deq/deq.hpp"
#include "deq/head.hpp"
#include "deq/ops.hpp"
#include "deq/transformer.hpp"
#include "deq/trellis.hpp"
#include "deq/universality.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deq;
using deq::testing::numeric_gradient;
using deq::testing::random_params;
using deq::testing::random_tensor;

namespace {

// ⟨c, f(z, x, θ, ctx)⟩ differentiated numerically in every argument and
// compared with the closed-form VJP.
void check_vjp_against_fd(const DifferentiableFn& f, const Tensor& z, const Tensor& x,
                          const ParamSet& params, const SequenceContext& ctx, double tol) {
  const Tensor cot = random_tensor(z.shape(), 99);
  const FnGrads g = vjp(f, z, x, params, ctx, cot, Wrt::all());
  auto probe = [&](const Tensor& zz, const Tensor& xx, const ParamSet& pp, const SequenceContext& cc) {
    return dot(cot, f.forward(zz, xx, pp, cc));
  };
  CHECK(relative_error(g.z, numeric_gradient([&](const Tensor& t) { return probe(t, x, params, ctx); }, z),
                       1e-8) < tol);
  CHECK(relative_error(g.x, numeric_gradient([&](const Tensor& t) { return probe(z, t, params, ctx); }, x),
                       1e-8) < tol);
  for (const auto& [name, value] : params) {
    CAPTURE(name);
    const Tensor fd = numeric_gradient(
        [&, n = name](const Tensor& t) {
          ParamSet p = params;
          p[n] = t;
          return probe(z, x, p, ctx);
        },
        value);
    CHECK(relative_error(g.params[name], fd, 1e-8) < tol);
  }
  if (ctx.length() > 0) {
    const Tensor fd_h = numeric_gradient(
        [&](const Tensor& t) { return probe(z, x, params, SequenceContext{t, ctx.input}); }, ctx.hidden);
    const Tensor fd_x = numeric_gradient(
        [&](const Tensor& t) { return probe(z, x, params, SequenceContext{ctx.hidden, t}); }, ctx.input);
    CHECK(relative_error(g.context.hidden, fd_h, 1e-8) < tol);
    CHECK(relative_error(g.context.input, fd_x, 1e-8) < tol);
  }
}

void check_causal(const DifferentiableFn& f, const ParamSet& params, std::size_t steps, std::size_t t0) {
  const Tensor z = random_tensor({2, steps, f.hidden_width()}, 5, 0.5);
  const Tensor x = random_tensor({2, steps, f.input_width()}, 6);
  Tensor x2 = x;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < f.input_width(); ++c) x2.at(n, t0, c) += 0.7;
  }
  const Tensor a = f.forward(z, x, params), b = f.forward(z, x2, params);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t t = 0; t < steps; ++t) {
      double diff = 0.0;
      for (std::size_t c = 0; c < f.hidden_width(); ++c) diff += std::abs(a.at(n, t, c) - b.at(n, t, c));
      if (t < t0) {
        CHECK(diff == 0.0);
      } else if (t == t0) {
        CHECK(diff > 0.0);
      }
    }
  }
}

}  // namespace

TEST_CASE("trellis: zero weights at z = 0 give zero output") {
  TrellisCell cell({3, 4, 2, 1});
  ParamSet params;
  for (const auto& info : cell.param_layout()) params.add(info.name, Tensor(info.shape));
  const Tensor out = cell.forward(Tensor({1, 4, 8}), random_tensor({1, 4, 3}, 1), params);
  CHECK(max_abs(out) == 0.0);
}

TEST_CASE("trellis: shape contract") {
  TrellisCell cell({3, 8, 2, 1});
  const ParamSet params = init_params(cell.param_layout(), 3);
  const Tensor out = cell.forward(random_tensor({1, 4, 16}, 1), random_tensor({1, 4, 3}, 2), params);
  CHECK(out.shape() == Shape{1, 4, 16});
}

TEST_CASE("trellis: causal in the input") {
  TrellisCell cell({3, 4, 3, 2});
  const ParamSet params = random_params(cell, 11, 0.5);
  check_causal(cell, params, 9, 3);
  check_causal(cell, params, 9, 0);
  check_causal(cell, params, 9, 8);
}

TEST_CASE("trellis: vjp matches finite differences") {
  TrellisCell cell({3, 2, 3, 2});
  const ParamSet params = random_params(cell, 21, 0.6);
  const Tensor z = random_tensor({2, 5, 4}, 22), x = random_tensor({2, 5, 3}, 23);
  SUBCASE("no context") { check_vjp_against_fd(cell, z, x, params, {}, 1e-6); }
  SUBCASE("context longer than the window") {
    check_vjp_against_fd(cell, z, x, params, {random_tensor({2, 6, 4}, 24), random_tensor({2, 6, 3}, 25)},
                         1e-6);
  }
  SUBCASE("context shorter than the window") {
    check_vjp_against_fd(cell, z, x, params, {random_tensor({2, 3, 4}, 26), random_tensor({2, 3, 3}, 27)},
                         1e-6);
  }
}

TEST_CASE("trellis: context equals running the joined sequence") {
  TrellisCell cell({2, 3, 3, 2});
  const ParamSet params = random_params(cell, 31, 0.5);
  const Tensor z = random_tensor({1, 10, 6}, 32), x = random_tensor({1, 10, 2}, 33);
  const Tensor whole = cell.forward(z, x, params);
  const SequenceContext ctx{slice(z, 1, 0, 6), slice(x, 1, 0, 6)};
  const Tensor tail = cell.forward(slice(z, 1, 6, 10), slice(x, 1, 6, 10), params, ctx);
  CHECK(max_abs(tail - slice(whole, 1, 6, 10)) < 1e-14);
}

TEST_CASE("trellis: bind agrees with forward") {
  TrellisCell cell({2, 3, 2, 1});
  const ParamSet params = random_params(cell, 41, 0.5);
  const Tensor z = random_tensor({2, 4, 6}, 42), x = random_tensor({2, 4, 2}, 43);
  const SequenceContext ctx{random_tensor({2, 2, 6}, 44), random_tensor({2, 2, 2}, 45)};
  CHECK(cell.bind(x, params, ctx)(z) == cell.forward(z, x, params, ctx));
}

namespace {

// Straight-line loops over every position, head and key.
Tensor naive_transformer(const TransformerDims& dims, const Tensor& z, const Tensor& x,
                         const ParamSet& prm, const SequenceContext& ctx) {
  const std::size_t N = z.dim(0), T = z.dim(1), d = dims.width, p = dims.input, H = dims.heads;
  const std::size_t M = ctx.length(), P = M + T, dh = d / H, R = dims.max_offset;
  auto hid = [&](std::size_t n, std::size_t j, std::size_t c) {
    return j < M ? ctx.hidden.at(n, j, c) : z.at(n, j - M, c);
  };
  auto inp = [&](std::size_t n, std::size_t j, std::size_t c) {
    return j < M ? ctx.input.at(n, j, c) : x.at(n, j - M, c);
  };
  auto ln = [&](std::vector<double> v, const Tensor& gain, const Tensor& bias) {
    double mean = 0.0, var = 0.0;
    for (double e : v) mean += e / d;
    for (double e : v) var += (e - mean) * (e - mean) / d;
    for (std::size_t c = 0; c < d; ++c) v[c] = (v[c] - mean) / std::sqrt(var + kLayerNormEps) * gain[c] + bias[c];
    return v;
  };
  Tensor out({N, T, d});
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<std::vector<double>> qkv(P, std::vector<double>(3 * d, 0.0));
    for (std::size_t j = 0; j < P; ++j) {
      for (std::size_t o = 0; o < 3 * d; ++o) {
        for (std::size_t c = 0; c < d; ++c) qkv[j][o] += hid(n, j, c) * prm["W_qkv"].at(c, o);
        for (std::size_t c = 0; c < p; ++c) qkv[j][o] += inp(n, j, c) * prm["W_x"].at(c, o);
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = M + t;
      std::vector<double> att(d, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> w(i + 1);
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
          s = s / std::sqrt(double(dh)) + prm["pos_bias"].at(h, std::min(i - j, R - 1));
          w[j] = std::exp(s);
          total += w[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t c = 0; c < dh; ++c) att[h * dh + c] += w[j] / total * qkv[j][2 * d + h * dh + c];
        }
      }
      std::vector<double> pre(d);
      for (std::size_t o = 0; o < d; ++o) {
        double a = prm["b_o"][o];
        for (std::size_t c = 0; c < d; ++c) a += att[c] * prm["W_o"].at(c, o);
        double inj = 0.0;
        for (std::size_t c = 0; c < p; ++c) inj += inp(n, i, c) * prm["W_x"].at(c, 2 * d + o);
        pre[o] = a + inj;
      }
      const std::vector<double> h1 = ln(pre, prm["ln1.gain"], prm["ln1.bias"]);
      std::vector<double> phi = h1;
      std::vector<double> inner(4 * d);
      for (std::size_t u = 0; u < 4 * d; ++u) {
        double a = prm["ffn.b1"][u];
        for (std::size_t c = 0; c < d; ++c) a += h1[c] * prm["ffn.W1"].at(c, u);
        inner[u] = a > 0 ? a : 0.0;
      }
      for (std::size_t o = 0; o < d; ++o) {
        double a = prm["ffn.b2"][o];
        for (std::size_t u = 0; u < 4 * d; ++u) a += inner[u] * prm["ffn.W2"].at(u, o);
        phi[o] += a;
      }
      const std::vector<double> y = ln(phi, prm["ln2.gain"], prm["ln2.bias"]);
      for (std::size_t c = 0; c < d; ++c) out.at(n, t, c) = y[c];
    }
  }
  return out;
}

}  // namespace

TEST_CASE("transformer: heads must divide width") {
  CHECK_THROWS_AS(TransformerCell({3, 8, 3, 4}), std::invalid_argument);
}

TEST_CASE("transformer: matches the scalar-loop oracle") {
  const TransformerDims dims{3, 8, 2, 3};
  TransformerCell cell(dims);
  const ParamSet params = random_params(cell, 51, 0.4);
  const Tensor z = random_tensor({2, 4, 8}, 52), x = random_tensor({2, 4, 3}, 53);
  CHECK(max_abs(cell.forward(z, x, params) - naive_transformer(dims, z, x, params, {})) < 1e-10);
  const SequenceContext ctx{random_tensor({2, 2, 8}, 54), random_tensor({2, 2, 3}, 55)};
  CHECK(max_abs(cell.forward(z, x, params, ctx) - naive_transformer(dims, z, x, params, ctx)) < 1e-10);
}

TEST_CASE("transformer: a single position attends to its own value") {
  const TransformerDims dims{2, 4, 2, 4};
  TransformerCell cell(dims);
  ParamSet params = random_params(cell, 61, 0.5);
  const Tensor z = random_tensor({1, 1, 4}, 62), x = random_tensor({1, 1, 2}, 63);
  const Tensor v = slice(linear(z, params["W_qkv"]) + linear(x, params["W_x"]), 2, 8, 12);
  Tensor pre1 = linear(v, params["W_o"], params["b_o"]);
  pre1 += slice(linear(x, params["W_x"]), 2, 8, 12);
  const Tensor h1 = layer_norm(pre1, params["ln1.gain"], params["ln1.bias"]);
  const Tensor phi = h1 + linear(relu(linear(h1, params["ffn.W1"], params["ffn.b1"])), params["ffn.W2"],
                                 params["ffn.b2"]);
  const Tensor expected = layer_norm(phi, params["ln2.gain"], params["ln2.bias"]);
  CHECK(max_abs(cell.forward(z, x, params) - expected) < 1e-13);
}

TEST_CASE("transformer: causal in the input") {
  TransformerCell cell({3, 8, 2, 6});
  const ParamSet params = random_params(cell, 71, 0.5);
  check_causal(cell, params, 8, 5);
  check_causal(cell, params, 8, 0);
}

TEST_CASE("transformer: output is layer-normalized") {
  TransformerCell cell({3, 8, 2, 6});
  ParamSet params = random_params(cell, 81, 0.5);
  for (double& v : params["ln2.gain"].data()) v = 1.0;
  for (double& v : params["ln2.bias"].data()) v = 0.0;
  const Tensor out = cell.forward(random_tensor({2, 5, 8}, 82), random_tensor({2, 5, 3}, 83), params);
  for (std::size_t r = 0; r < 10; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 8; ++c) mean += out[r * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) var += (out[r * 8 + c] - mean) * (out[r * 8 + c] - mean) / 8;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("transformer: vjp matches finite differences") {
  TransformerCell cell({3, 4, 2, 3});
  const ParamSet params = random_params(cell, 91, 0.5);
  const Tensor z = random_tensor({2, 4, 4}, 92), x = random_tensor({2, 4, 3}, 93);
  SUBCASE("no context") { check_vjp_against_fd(cell, z, x, params, {}, 1e-6); }
  SUBCASE("with context") {
    check_vjp_against_fd(cell, z, x, params, {random_tensor({2, 3, 4}, 94), random_tensor({2, 3, 3}, 95)},
                         1e-6);
  }
}

TEST_CASE("transformer: bind agrees with forward") {
  TransformerCell cell({3, 8, 2, 6});
  const ParamSet params = random_params(cell, 101, 0.5);
  const Tensor z = random_tensor({2, 4, 8}, 102), x = random_tensor({2, 4, 3}, 103);
  const SequenceContext ctx{random_tensor({2, 2, 8}, 104), random_tensor({2, 2, 3}, 105)};
  CHECK(cell.bind(x, params, ctx)(z) == cell.forward(z, x, params, ctx));
  CHECK_THROWS_AS(cell.bind(x, params, ctx)(Tensor({2, 5, 8})), ShapeError);
}

TEST_CASE("head: squared error at the target is zero") {
  OutputHead head{3, 2, LossKind::SquaredError};
  ParamSet hp = init_params(head.param_layout(), 7);
  const Tensor z = random_tensor({2, 3, 3}, 8);
  const Tensor target = linear(z, hp["W"], hp["b"]);
  const HeadResult r = apply_head_and_loss(head, hp, z, target);
  CHECK(r.loss == 0.0);
  CHECK(max_abs(r.dl_dz) == 0.0);
}

TEST_CASE("head: uniform logits give ln q") {
  OutputHead head{4, 10, LossKind::CrossEntropy};
  ParamSet hp = init_params(head.param_layout(), 1).zeros_like();
  Tensor targets({2, 3}, {0, 1, 2, 3, 4, 9});
  CHECK(apply_head_and_loss(head, hp, random_tensor({2, 3, 4}, 2), targets).loss ==
        doctest::Approx(std::log(10.0)).epsilon(1e-14));
}

TEST_CASE("head: gradients match finite differences") {
  for (LossKind kind : {LossKind::CrossEntropy, LossKind::SquaredError}) {
    OutputHead head{3, 4, kind};
    ParamSet params = init_params(head.param_layout(), 3);
    params["b"] = random_tensor({4}, 4);
    for (double& v : params["W"].data()) v *= 10;
    const Tensor z = random_tensor({2, 3, 3}, 5);
    const Tensor targets = kind == LossKind::CrossEntropy ? Tensor({2, 3}, {0, 3, 1, 2, 2, 0})
                                                          : random_tensor({2, 3, 4}, 6);
    const HeadResult r = apply_head_and_loss(head, params, z, targets);
    const Tensor fd_z = numeric_gradient(
        [&](const Tensor& t) { return apply_head_and_loss(head, params, t, targets).loss; }, z);
    CHECK(relative_error(r.dl_dz, fd_z, 1e-8) < 1e-6);
    for (const char* name : {"W", "b"}) {
      const Tensor fd = numeric_gradient(
          [&](const Tensor& t) {
            ParamSet p = params;
            p[name] = t;
            return apply_head_and_loss(head, p, z, targets).loss;
          },
          params[name]);
      CHECK(relative_error(r.grads[name], fd, 1e-8) < 1e-6);
    }
  }
}

TEST_CASE("head: class index out of range") {
  OutputHead head{2, 3, LossKind::CrossEntropy};
  const ParamSet params = init_params(head.param_layout(), 1);
  CHECK_THROWS_AS(apply_head_and_loss(head, params, Tensor({1, 2, 2}), Tensor({1, 2}, {0, 3})),
                  std::out_of_range);
  CHECK_THROWS_AS(apply_head_and_loss(head, params, Tensor({1, 2, 2}), Tensor({1, 2}, {-1, 0})),
                  std::out_of_range);
}

TEST_CASE("init: deterministic, biases zero, weight variance") {
  const std::vector<ParamInfo> layout{{"w", {100000}, ParamRole::Weight},
                                      {"b", {7}, ParamRole::Bias},
                                      {"g", {5}, ParamRole::Gain}};
  const ParamSet a = init_params(layout, 1234), b = init_params(layout, 1234);
  CHECK(a == b);
  CHECK(!(a == init_params(layout, 1235)));
  CHECK(max_abs(a["b"]) == 0.0);
  CHECK(max_abs(a["g"]) > 0.0);
  const auto& w = a["w"];
  double mean = 0.0, var = 0.0;
  for (double v : w.data()) mean += v / w.size();
  for (double v : w.data()) var += (v - mean) * (v - mean) / (w.size() - 1);
  CHECK(std::abs(var - 0.0025) / 0.0025 < 0.05);
}

namespace {

std::vector<MlpLayer> random_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  const Activation acts[] = {Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Identity};
  std::vector<MlpLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.push_back({random_tensor({widths[i + 1], widths[i]}, seed + 2 * i),
                      random_tensor({widths[i + 1]}, seed + 2 * i + 1), acts[(seed + i) % 4]});
  }
  return layers;
}

Tensor direct_mlp(const std::vector<MlpLayer>& layers, Tensor a) {
  for (const MlpLayer& l : layers) {
    Tensor next({l.weight.dim(0)});
    for (std::size_t r = 0; r < l.weight.dim(0); ++r) {
      double acc = l.bias[r];
      for (std::size_t c = 0; c < l.weight.dim(1); ++c) acc += l.weight.at(r, c) * a[c];
      next[r] = activate(l.activation, acc);
    }
    a = std::move(next);
  }
  return a;
}

}  // namespace

TEST_CASE("weight-tied: single layer degenerates to one application") {
  const auto layers = random_mlp({4, 3}, 1);
  const WeightTiedNet net = build_weight_tied_from_mlp(layers);
  CHECK(max_abs(net.w_z) == 0.0);
  const Tensor x = random_tensor({4}, 2);
  CHECK(max_abs(net.output(net.run(x, 1)) - direct_mlp(layers, x)) == 0.0);
}

TEST_CASE("weight-tied: W_z is block subdiagonal") {
  const auto layers = random_mlp({4, 7, 5, 3}, 10);
  const WeightTiedNet net = build_weight_tied_from_mlp(layers);
  const auto block_of = [&](std::size_t i) {
    std::size_t b = 0;
    while (net.offsets[b + 1] <= i) ++b;
    return b;
  };
  for (std::size_t r = 0; r < net.state_width(); ++r) {
    for (std::size_t c = 0; c < net.state_width(); ++c) {
      if (net.w_z.at(r, c) != 0.0) CHECK(block_of(r) == block_of(c) + 1);
    }
    if (block_of(r) > 0) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(net.w_x.at(r, c) == 0.0);
    }
  }
}

TEST_CASE("weight-tied: reproduces the explicit network") {
  const Tensor x = random_tensor({4}, 20);
  const auto layers = random_mlp({4, 7, 5, 3}, 21);
  const WeightTiedNet net = build_weight_tied_from_mlp(layers);
  CHECK(max_abs(net.output(net.run(x, 3)) - direct_mlp(layers, x)) <= 1e-12);

  std::mt19937_64 rng(22);
  for (std::size_t depth = 1; depth <= 5; ++depth) {
    std::vector<std::size_t> widths;
    for (std::size_t i = 0; i <= depth; ++i) widths.push_back(1 + rng() % 8);
    const auto deep = random_mlp(widths, 100 + depth);
    const Tensor in = random_tensor({widths[0]}, 200 + depth);
    const WeightTiedNet tied = build_weight_tied_from_mlp(deep);
    CAPTURE(depth);
    CHECK(max_abs(tied.output(tied.run(in, depth)) - direct_mlp(deep, in)) <= 1e-12);
    // More applications than layers leave the last block fixed.
    CHECK(max_abs(tied.output(tied.run(in, depth + 3)) - direct_mlp(deep, in)) <= 1e-12);
  }
}

TEST_CASE("weight-tied: mismatched layer widths") {
  auto layers = random_mlp({4, 7, 5}, 30);
  layers[1].weight = random_tensor({5, 6}, 31);
  CHECK_THROWS_AS(build_weight_tied_from_mlp(layers), ShapeError);
}

namespace {

ParamSet contractive_affine(std::size_t d, std::size_t p, std::uint64_t seed, double scale) {
  ParamSet prm;
  prm.add("A", random_tensor({d, d}, seed, scale / static_cast<double>(d)));
  prm.add("U", random_tensor({p, d}, seed + 1));
  prm.add("b", random_tensor({d}, seed + 2));
  return prm;
}

ParamSet joined(const ParamSet& p1, const ParamSet& p2) {
  ParamSet out = p1.prefixed("f1.");
  out.merge(p2.prefixed("v2."));
  return out;
}

}  // namespace

TEST_CASE("stacked equilibria: joint root equals the sequential pipeline") {
  auto f1 = std::make_shared<PositionwiseFn>(6, 3, Activation::Identity);
  auto v2 = std::make_shared<PositionwiseFn>(5, 6, Activation::Identity);
  auto gamma = stack_gamma(f1, v2);
  const ParamSet p1 = contractive_affine(6, 3, 1, 0.8), p2 = contractive_affine(5, 6, 4, 0.8);
  const ParamSet joint = joined(p1, p2);
  const Tensor x = random_tensor({2, 3, 3}, 7);

  DeqLayer l1{f1}, l2{v2}, lg{gamma};
  for (DeqLayer* l : {&l1, &l2, &lg}) l->forward_cfg = {1e-11, 60, 1.0, 4};
  const EquilibriumResult r1 = deq_forward(l1, x, p1);
  const EquilibriumResult r2 = deq_forward(l2, r1.solution, p2);
  const EquilibriumResult rg = deq_forward(lg, x, joint);
  REQUIRE(r1.converged);
  REQUIRE(r2.converged);
  REQUIRE(rg.converged);
  CHECK(max_abs(slice(rg.solution, 2, 6, 11) - r2.solution) < 1e-6);
  CHECK(max_abs(slice(rg.solution, 2, 0, 6) - r1.solution) < 1e-6);
}

TEST_CASE("stacked equilibria: passthrough second stage") {
  auto f1 = std::make_shared<PositionwiseFn>(3, 2, Activation::Tanh);
  auto v2 = std::make_shared<PositionwiseFn>(3, 3, Activation::Identity);
  ParamSet p2;
  p2.add("A", Tensor({3, 3}));
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  p2.add("U", eye);
  p2.add("b", Tensor({3}));
  const ParamSet p1 = contractive_affine(3, 2, 11, 0.5);
  DeqLayer lg{stack_gamma(f1, v2)};
  lg.forward_cfg = {1e-12, 60, 1.0, 4};
  const EquilibriumResult rg = deq_forward(lg, random_tensor({1, 4, 2}, 12), joined(p1, p2));
  REQUIRE(rg.converged);
  CHECK(max_abs(slice(rg.solution, 2, 0, 3) - slice(rg.solution, 2, 3, 6)) < 1e-10);
}

TEST_CASE("stacked equilibria: constant first stage reduces to one equilibrium") {
  auto f1 = std::make_shared<PositionwiseFn>(3, 2, Activation::Identity);
  auto v2 = std::make_shared<PositionwiseFn>(4, 3, Activation::Tanh);
  ParamSet p1 = contractive_affine(3, 2, 21, 0.5);
  p1["A"] = Tensor({3, 3});
  const ParamSet p2 = contractive_affine(4, 3, 24, 0.7);
  const Tensor x = random_tensor({2, 2, 2}, 25);
  const Tensor r = linear(x, p1["U"], p1["b"]);

  DeqLayer lg{stack_gamma(f1, v2)}, l2{v2};
  lg.forward_cfg = l2.forward_cfg = {1e-12, 60, 1.0, 4};
  const EquilibriumResult rg = deq_forward(lg, x, joined(p1, p2));
  const EquilibriumResult r2 = deq_forward(l2, r, p2);
  CHECK(max_abs(slice(rg.solution, 2, 3, 7) - r2.solution) < 1e-10);
}

TEST_CASE("stacked equilibria: width mismatch") {
  auto f1 = std::make_shared<PositionwiseFn>(3, 2);
  auto v2 = std::make_shared<PositionwiseFn>(4, 5);
  CHECK_THROWS(stack_gamma(f1, v2));
}
