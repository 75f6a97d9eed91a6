#include <cmath>

#include "deq/deq.hpp"
#include "deq/head.hpp"
#include "deq/ops.hpp"
#include "deq/transformer.hpp"
#include "deq/trellis.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deq;
using deq::testing::random_params;
using deq::testing::random_tensor;

namespace {

constexpr SolverConfig kTight{1e-12, 100, 1.0, 4};

DeqLayer tight_layer(std::shared_ptr<const DifferentiableFn> f, SolverKind solver = SolverKind::Broyden) {
  DeqLayer layer{std::move(f)};
  layer.forward_cfg = kTight;
  layer.backward_cfg = kTight;
  layer.solver = solver;
  return layer;
}

ParamSet scalar_params(double a, double u, double b) {
  ParamSet p;
  p.add("A", Tensor({1, 1}, {a}));
  p.add("U", Tensor({1, 1}, {u}));
  p.add("b", Tensor({1}, {b}));
  return p;
}

// ⟨c, z*(θ, x)⟩ for a fixed random c.
double solved_loss(const DeqLayer& layer, const Tensor& x, const ParamSet& p, const Tensor& c) {
  return dot(c, deq_forward(layer, x, p).solution);
}

}  // namespace

TEST_CASE("forward: map constant in z is solved by one Broyden step") {
  auto f = std::make_shared<PositionwiseFn>(3, 2, Activation::Tanh);
  ParamSet p;
  p.add("A", Tensor({3, 3}));
  p.add("U", random_tensor({2, 3}, 1));
  p.add("b", Tensor({3}));
  const Tensor x = random_tensor({2, 4, 2}, 2);
  const EquilibriumResult r = deq_forward(tight_layer(f), x, p);
  CHECK(r.converged);
  CHECK(r.iters == 1);
  CHECK(max_abs(r.solution - tanh(linear(x, p["U"]))) < 1e-15);
}

TEST_CASE("forward: f(z; x) = x") {
  auto f = std::make_shared<PositionwiseFn>(1, 1);
  const Tensor x = random_tensor({3, 5, 1}, 3);
  const EquilibriumResult r = deq_forward(tight_layer(f), x, scalar_params(0.0, 1.0, 0.0));
  CHECK(r.solution == x);
}

TEST_CASE("forward: trellis equilibrium equals a long fixed-point run") {
  auto cell = std::make_shared<TrellisCell>(TrellisDims{3, 4, 3, 2});
  const ParamSet p = random_params(*cell, 4, 0.3);
  const Tensor x = random_tensor({2, 10, 3}, 5);
  DeqLayer layer = tight_layer(cell);
  layer.forward_cfg.tol = 1e-10;
  const EquilibriumResult r = deq_forward(layer, x, p);
  REQUIRE(r.converged);
  const VectorMap fz = cell->bind(x, p, {});
  Tensor z({2, 10, 8});
  for (int i = 0; i < 500; ++i) z = fz(z);
  CHECK(max_abs(r.solution - z) < 1e-6);

  const EquilibriumResult fp = deq_forward(tight_layer(cell, SolverKind::FixedPoint), x, p);
  CHECK(max_abs(fp.solution - r.solution) < 1e-10);
}

TEST_CASE("forward: retains only x and z*") {
  auto cell = std::make_shared<TrellisCell>(TrellisDims{2, 3, 2, 1});
  ActivationLedger ledger;
  deq_forward(tight_layer(cell), random_tensor({1, 6, 2}, 6), random_params(*cell, 7, 0.3), {}, &ledger);
  CHECK(ledger.count() == 2);
  CHECK(ledger.tags() == std::vector<std::string>{"x", "z_star"});
}

TEST_CASE("backward: closed-form scalar cases") {
  auto f = std::make_shared<PositionwiseFn>(1, 1);
  const Tensor x({1, 1, 1}, {0.0});
  {
    // f = θ, ℓ = z*² at θ = 1.5
    const ParamSet p = scalar_params(0.0, 0.0, 1.5);
    const DeqLayer layer = tight_layer(f);
    const Tensor z = deq_forward(layer, x, p).solution;
    CHECK(z[0] == 1.5);
    const Gradients g = deq_backward(layer, z, x, p, 2.0 * z);
    CHECK(g.wrt_params["b"][0] == doctest::Approx(3.0).epsilon(1e-12));
  }
  {
    // f = z/2 + b, ℓ = z*
    const ParamSet p = scalar_params(0.5, 0.0, 0.7);
    const DeqLayer layer = tight_layer(f);
    const Tensor z = deq_forward(layer, x, p).solution;
    CHECK(z[0] == doctest::Approx(1.4).epsilon(1e-12));
    const Gradients g = deq_backward(layer, z, x, p, Tensor({1, 1, 1}, {1.0}));
    CHECK(g.wrt_params["b"][0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(g.warnings.empty());
  }
}

TEST_CASE("backward: finite differences through the re-solved equilibrium") {
  auto cell = std::make_shared<TrellisCell>(TrellisDims{2, 2, 2, 1});
  const ParamSet p = random_params(*cell, 8, 0.5);
  const Tensor x = random_tensor({2, 4, 2}, 9);
  const Tensor c = random_tensor({2, 4, 4}, 10);
  const DeqLayer layer = tight_layer(cell);
  const EquilibriumResult fwd = deq_forward(layer, x, p);
  REQUIRE(fwd.converged);
  const Gradients g = deq_backward(layer, fwd.solution, x, p, c);
  CHECK(g.backward.converged);
  for (const auto& [name, value] : p) {
    CAPTURE(name);
    const Tensor fd = deq::testing::numeric_gradient(
        [&, n = name](const Tensor& t) {
          ParamSet q = p;
          q[n] = t;
          return solved_loss(layer, x, q, c);
        },
        value, 1e-5);
    CHECK(relative_error(g.wrt_params[name], fd) <= 1e-5);
  }
  const Tensor fd_x = deq::testing::numeric_gradient(
      [&](const Tensor& t) { return solved_loss(layer, t, p, c); }, x, 1e-5);
  CHECK(relative_error(g.wrt_input, fd_x) <= 1e-5);
}

TEST_CASE("backward: implicit gradients equal backprop through a converged unrolled stack") {
  const Tensor c = random_tensor({2, 6, 8}, 11);
  auto check = [&](std::shared_ptr<const DifferentiableFn> f, const ParamSet& p, const Tensor& x) {
    CAPTURE(f->name());
    DeqLayer layer = tight_layer(f);
    layer.forward_cfg.tol = 1e-11;
    const EquilibriumResult fwd = deq_forward(layer, x, p);
    REQUIRE(fwd.converged);
    const Gradients implicit = deq_backward(layer, fwd.solution, x, p, c);
    const UnrolledForward unrolled = unrolled_forward(*f, x, p, 200);
    CHECK(max_abs(unrolled.output() - fwd.solution) < 1e-9);
    const Gradients explicit_g = unrolled_backward(*f, unrolled, x, p, c);
    CHECK(relative_error(implicit.wrt_input, explicit_g.wrt_input) <= 1e-4);
    for (const auto& [name, value] : p) {
      CAPTURE(name);
      CHECK(relative_error(implicit.wrt_params[name], explicit_g.wrt_params[name], 1e-12) <= 1e-4);
    }
  };
  auto trellis = std::make_shared<TrellisCell>(TrellisDims{3, 4, 2, 1});
  check(trellis, random_params(*trellis, 12, 0.3), random_tensor({2, 6, 3}, 13));
  auto transformer = std::make_shared<TransformerCell>(TransformerDims{3, 8, 2, 6});
  check(transformer, init_params(transformer->param_layout(), 14), random_tensor({2, 6, 3}, 15));
}

TEST_CASE("backward: warns on an unconverged forward state") {
  auto cell = std::make_shared<TrellisCell>(TrellisDims{2, 2, 2, 1});
  const ParamSet p = random_params(*cell, 16, 0.5);
  const Tensor x = random_tensor({1, 4, 2}, 17);
  const DeqLayer layer = tight_layer(cell);
  const Gradients g = deq_backward(layer, random_tensor({1, 4, 4}, 18), x, p, random_tensor({1, 4, 4}, 19));
  REQUIRE(g.warnings.size() == 1);
  CHECK(g.warnings[0].find("forward residual") != std::string::npos);
}

TEST_CASE("sgd step") {
  ParamSet theta;
  theta.add("w", Tensor({1}, {1.0}));
  ParamSet grad;
  grad.add("w", Tensor({1}, {2.0}));
  CHECK(sgd_step(theta, grad, 0.1)["w"][0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(sgd_step(theta, grad, 0.0) == theta);
  CHECK(sgd_step(theta, grad.zeros_like(), 0.5) == theta);
}

TEST_CASE("subsequence backward equals the full backward") {
  auto run = [](std::shared_ptr<const DifferentiableFn> f, const ParamSet& p, std::size_t steps,
                std::size_t split, const Tensor& dl) {
    const Tensor x = random_tensor({2, steps, f->input_width()}, 20);
    const DeqLayer layer = tight_layer(f);
    const EquilibriumResult fwd = deq_forward(layer, x, p);
    REQUIRE(fwd.converged);
    const Gradients full = deq_backward(layer, fwd.solution, x, p, dl);
    const Gradients parts = subsequence_backward(layer, fwd.solution, x, p, dl, split);
    CHECK(relative_error(parts.wrt_input, full.wrt_input, 1e-12) <= 1e-6);
    for (const auto& [name, value] : p) {
      CAPTURE(name);
      CHECK(relative_error(parts.wrt_params[name], full.wrt_params[name], 1e-12) <= 1e-6);
    }
  };
  SUBCASE("trellis, T = 16 split 8 + 8") {
    auto cell = std::make_shared<TrellisCell>(TrellisDims{3, 3, 3, 2});
    run(cell, random_params(*cell, 21, 0.3), 16, 8, random_tensor({2, 16, 6}, 22));
  }
  SUBCASE("transformer, T = 16 split 8 + 8") {
    auto cell = std::make_shared<TransformerCell>(TransformerDims{3, 8, 2, 16});
    run(cell, init_params(cell->param_layout(), 23), 16, 8, random_tensor({2, 16, 8}, 24));
  }
  SUBCASE("uneven split") {
    auto cell = std::make_shared<TrellisCell>(TrellisDims{3, 3, 2, 3});
    run(cell, random_params(*cell, 25, 0.3), 11, 3, random_tensor({2, 11, 6}, 26));
  }
  SUBCASE("loss only on the first half") {
    auto cell = std::make_shared<TrellisCell>(TrellisDims{3, 3, 3, 1});
    Tensor dl = random_tensor({2, 12, 6}, 27);
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t t = 6; t < 12; ++t) {
        for (std::size_t c = 0; c < 6; ++c) dl.at(n, t, c) = 0.0;
      }
    }
    run(cell, random_params(*cell, 28, 0.3), 12, 6, dl);
  }
  SUBCASE("map constant in z") {
    auto f = std::make_shared<PositionwiseFn>(3, 2, Activation::Tanh);
    ParamSet p = random_params(*f, 29, 0.5);
    p["A"] = Tensor({3, 3});
    run(f, p, 8, 4, random_tensor({2, 8, 3}, 30));
  }
  SUBCASE("split must lie inside the sequence") {
    auto f = std::make_shared<PositionwiseFn>(1, 1);
    const Tensor z({1, 4, 1});
    CHECK_THROWS(subsequence_backward(tight_layer(f), z, z, scalar_params(0, 0, 0), z, 0));
    CHECK_THROWS(subsequence_backward(tight_layer(f), z, z, scalar_params(0, 0, 0), z, 4));
  }
}

TEST_CASE("retained activations are constant in budget and solver, linear when unrolled") {
  auto cell = std::make_shared<TrellisCell>(TrellisDims{3, 4, 2, 1});
  const ParamSet p = random_params(*cell, 31, 0.3);
  const Tensor x = random_tensor({2, 8, 3}, 32);
  std::vector<std::size_t> counts;
  for (SolverKind solver : {SolverKind::Broyden, SolverKind::FixedPoint}) {
    for (int budget : {5, 30, 60}) counts.push_back(count_retained_activations(tight_layer(cell, solver), x, p, budget));
  }
  for (std::size_t c : counts) CHECK(c == counts.front());
  CHECK(counts.front() == 2);
  const std::size_t u5 = count_retained_activations_unrolled(*cell, x, p, 5);
  const std::size_t u30 = count_retained_activations_unrolled(*cell, x, p, 30);
  const std::size_t u60 = count_retained_activations_unrolled(*cell, x, p, 60);
  CHECK(u30 - u5 == 25);
  CHECK(u60 - u30 == 30);
}
