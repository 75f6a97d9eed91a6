#include <Eigen/Dense>
#include <cmath>

#include "deq/rootfind.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deq;
using deq::testing::random_tensor;

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Vec to_vec(const Tensor& t) { return Eigen::Map<const Vec>(t.ptr(), static_cast<Eigen::Index>(t.size())); }
Tensor to_tensor(const Vec& v) { return Tensor({static_cast<std::size_t>(v.size())}, {v.data(), v.data() + v.size()}); }

// Random W rescaled to the given spectral norm.
Mat contraction(std::size_t n, double norm, std::uint64_t seed) {
  const Tensor t = random_tensor({n, n}, seed);
  Mat w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double s = Eigen::JacobiSVD<Mat>(w).singularValues()(0);
  return w * (norm / s);
}

VectorMap affine(const Mat& w, const Vec& b) {
  return [w, b](const Tensor& z) { return to_tensor(w * to_vec(z) + b); };
}

VectorMap residual_of(const VectorMap& f) {
  return [f](const Tensor& z) { return f(z) - z; };
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS(SolverConfig{0.0}.validate());
  CHECK_THROWS(SolverConfig{1e-5, 0}.validate());
  CHECK_THROWS(SolverConfig{1e-5, 5, 1.5}.validate());
  CHECK_THROWS(SolverConfig{1e-5, 5, 1.0, -1}.validate());
  CHECK_NOTHROW(SolverConfig{}.validate());
}

TEST_CASE("fixed point: constant map converges in one iteration") {
  const Tensor x = random_tensor({2, 3, 4}, 1);
  const EquilibriumResult r = fixed_point_iterate([&](const Tensor&) { return x; }, Tensor(x.shape()), {});
  CHECK(r.converged);
  CHECK(r.iters == 1);
  CHECK(r.solution == x);
  CHECK(r.trace.size() == 2);
}

TEST_CASE("fixed point: scalar contraction has a geometric trace") {
  const VectorMap f = [](const Tensor& z) { return Tensor({1}, {0.5 * z[0] + 1.0}); };
  const EquilibriumResult r = fixed_point_iterate(f, Tensor({1}), {1e-10, 100});
  CHECK(r.converged);
  CHECK(r.solution[0] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(r.trace.size() == static_cast<std::size_t>(r.iters) + 1);
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] / r.trace[i - 1] == doctest::Approx(0.5));

  const auto rows = residual_trace(r);
  CHECK(rows.size() == static_cast<std::size_t>(r.iters));
  // ‖z⁽ⁱ⁾ − z⁽ⁱ⁻¹⁾‖ = 2^{1−i}, ‖z⁽ⁱ⁻¹⁾‖ = 2 − 2^{2−i}.
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const double k = static_cast<double>(i + 1);
    CHECK(rows[i].rel_step == doctest::Approx(std::pow(2.0, 1 - k) / (2 - std::pow(2.0, 2 - k))));
    CHECK(rows[i].rel_step < rows[i - 1].rel_step);
  }
}

TEST_CASE("fixed point: matches the dense solve of (I − W)z = b") {
  const std::size_t n = 20;
  const Mat w = contraction(n, 0.7, 2);
  const Vec b = to_vec(random_tensor({n}, 3));
  const EquilibriumResult r = fixed_point_iterate(affine(w, b), Tensor({n}), {1e-12, 200});
  REQUIRE(r.converged);
  const Vec exact = (Mat::Identity(n, n) - w).lu().solve(b);
  CHECK((to_vec(r.solution) - exact).norm() < 1e-8);
}

TEST_CASE("solvers: non-finite values report the iteration") {
  int calls = 0;
  const VectorMap blowup = [&](const Tensor& z) {
    ++calls;
    Tensor out = z;
    out[0] = calls >= 3 ? std::nan("") : z[0] + 1.0;
    return out;
  };
  try {
    fixed_point_iterate(blowup, Tensor({2}), {1e-8, 10});
    FAIL("expected a solver error");
  } catch (const SolverError& e) {
    CHECK(std::string(e.what()).find("iteration 2") != std::string::npos);
  }
  const VectorMap bad = [](const Tensor& z) { return Tensor::full(z.shape(), std::nan("")); };
  CHECK_THROWS_AS(broyden_solve(bad, Tensor({2}), {}), SolverError);
}

TEST_CASE("broyden: root at the start point") {
  const EquilibriumResult r = broyden_solve([](const Tensor& z) { return -1.0 * z; }, Tensor({5}), {});
  CHECK(r.converged);
  CHECK(r.iters == 0);
  CHECK(r.residual_norm == 0.0);
  CHECK(r.trace.size() == 1);
  CHECK(residual_trace(r).size() == 1);
}

TEST_CASE("broyden: affine g = −z/2 + b is solved exactly on the second step") {
  const Tensor b = random_tensor({6}, 4);
  const VectorMap g = [&](const Tensor& z) { return b - 0.5 * z; };
  const EquilibriumResult r = broyden_solve(g, Tensor({6}), {1e-12, 10, 1.0, 0});
  CHECK(r.converged);
  CHECK(r.iters == 2);
  CHECK(max_abs(r.solution - 2.0 * b) < 1e-14);
  // First step lands on b.
  const EquilibriumResult one = broyden_solve(g, Tensor({6}), {1e-12, 1, 1.0, 0});
  CHECK(max_abs(one.solution - b) < 1e-15);
}

TEST_CASE("broyden: agrees with fixed point on a random contraction, with fewer evaluations") {
  const std::size_t n = 64;
  const Mat w = contraction(n, 0.8, 5);
  const Vec b = to_vec(random_tensor({n}, 6));
  // Mildly nonlinear: f(z) = tanh(Wz + b) keeps the Jacobian norm ≤ 0.8.
  const VectorMap f = [&](const Tensor& z) {
    Vec v = w * to_vec(z) + b;
    for (auto& e : v) e = std::tanh(e);
    return to_tensor(v);
  };
  const SolverConfig cfg{1e-10, 200, 1.0, 4};
  const EquilibriumResult fp = fixed_point_iterate(f, Tensor({n}), cfg);
  const EquilibriumResult br = broyden_solve(residual_of(f), Tensor({n}), cfg);
  REQUIRE(fp.converged);
  REQUIRE(br.converged);
  CHECK(max_abs(fp.solution - br.solution) < 1e-8);
  CHECK(norm2(fp.solution - br.solution) <= 10 * cfg.tol);
  CHECK(br.evaluations < fp.evaluations);
}

TEST_CASE("broyden: Sherman-Morrison and secant properties hold at every update") {
  const std::size_t n = 24;
  const Mat w = contraction(n, 0.9, 7);
  const Vec b = to_vec(random_tensor({n}, 8));
  const VectorMap f = [&](const Tensor& z) {
    Vec v = w * to_vec(z) + b;
    for (auto& e : v) e = std::tanh(e);
    return to_tensor(v);
  };
  Mat dense = -Mat::Identity(n, n);
  const Tensor probe = random_tensor({n}, 9);
  int updates = 0;
  const BroydenObserver check = [&](const BroydenState& s, const Tensor& dz, const Tensor& dg, bool applied) {
    const Vec dzv = to_vec(dz), dgv = to_vec(dg);
    if (applied) {
      const Vec bdg = dense * dgv;
      dense += (dzv - bdg) * (dzv.transpose() * dense) / dzv.dot(bdg);
      CHECK((to_vec(s.apply(dg)) - dzv).norm() <= 1e-8 * std::max(1.0, dzv.norm()));
      ++updates;
    } else if (s.rank() == 0) {
      dense = -Mat::Identity(n, n);
    }
    CHECK((to_vec(s.apply(probe)) - dense * to_vec(probe)).norm() < 1e-10);
    CHECK((to_vec(s.apply_transpose(probe)) - dense.transpose() * to_vec(probe)).norm() < 1e-10);
    const std::vector<double> m = s.dense();
    const Mat from_state = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        m.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    CHECK((from_state - dense).norm() < 1e-10);
  };
  const EquilibriumResult r = broyden_solve(residual_of(f), Tensor({n}), {1e-12, 40, 1.0, 4}, check);
  CHECK(updates > 3);
  CHECK(r.converged);
}

TEST_CASE("broyden: skipped update on a degenerate secant pair") {
  BroydenState s(3);
  const Tensor dz({3}, {1, 0, 0}), dg({3}, {0, 1, 0});  // Δzᵀ(−I)Δg = 0
  CHECK_FALSE(s.update(dz, dg));
  CHECK(s.rank() == 0);
  CHECK(s.update(dz, Tensor({3}, {-2, 0, 0})));
  CHECK(s.rank() == 1);
}

TEST_CASE("broyden: accepted residuals never increase with line search") {
  const std::size_t n = 30;
  const Mat w = contraction(n, 2.5, 10);  // not a contraction: the line search has work to do
  const Vec b = to_vec(random_tensor({n}, 11));
  const VectorMap f = [&](const Tensor& z) {
    Vec v = w * to_vec(z) + b;
    for (auto& e : v) e = std::tanh(e);
    return to_tensor(v);
  };
  const EquilibriumResult r = broyden_solve(residual_of(f), Tensor({n}), {1e-10, 40, 1.0, 4});
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1]);
  CHECK(r.trace.size() == static_cast<std::size_t>(r.iters) + 1);
  CHECK(r.step_norms.size() == static_cast<std::size_t>(r.iters));
  CHECK(r.converged == (r.residual_norm < 1e-10));
}

TEST_CASE("broyden: iteration limit returns the best iterate without raising") {
  const std::size_t n = 16;
  const Mat w = contraction(n, 0.95, 12);
  const Vec b = to_vec(random_tensor({n}, 13));
  const VectorMap f = [&](const Tensor& z) {
    Vec v = w * to_vec(z) + b;
    for (auto& e : v) e = std::tanh(3 * e);
    return to_tensor(v);
  };
  const VectorMap g = residual_of(f);
  const EquilibriumResult r = broyden_solve(g, Tensor({n}), {1e-14, 3, 1.0, 0});
  CHECK_FALSE(r.converged);
  CHECK(r.iters == 3);
  CHECK(r.residual_norm == *std::min_element(r.trace.begin(), r.trace.end()));
  CHECK(norm2(g(r.solution)) == doctest::Approx(r.residual_norm).epsilon(1e-12));
}

TEST_CASE("linear vjp solve: constant map, zero rhs and the dense transpose oracle") {
  const Tensor rhs = random_tensor({2, 3, 2}, 14);
  const VectorMap minus_identity = [](const Tensor& x) { return -1.0 * x; };
  const EquilibriumResult c = solve_linear_vjp(minus_identity, rhs, {1e-12, 10});
  CHECK(c.converged);
  CHECK(max_abs(c.solution - rhs) < 1e-12);

  const EquilibriumResult z = solve_linear_vjp(minus_identity, Tensor(rhs.shape()), {1e-12, 10});
  CHECK(z.iters == 0);
  CHECK(max_abs(z.solution) == 0.0);

  const std::size_t n = 32;
  const Mat j = contraction(n, 0.6, 15);
  const Vec r = to_vec(random_tensor({n}, 16));
  const VectorMap jtvp = [&](const Tensor& x) {
    const Vec xv = to_vec(x);
    return to_tensor(j.transpose() * xv - xv);
  };
  const SolverConfig cfg{1e-12, 60};
  const EquilibriumResult s = solve_linear_vjp(jtvp, to_tensor(r), cfg);
  REQUIRE(s.converged);
  const Vec exact = (j.transpose() - Mat::Identity(n, n)).lu().solve(-r);
  CHECK((to_vec(s.solution) - exact).norm() < 1e-8);
  CHECK(norm2(jtvp(s.solution) + to_tensor(r)) < cfg.tol);
}
