#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "deq/function.hpp"
#include "deq/tensor.hpp"

namespace deq {

/// Stopping rule and step control shared by all solvers. The tolerance is an
/// absolute bound on the ℓ2 norm of the residual over the whole flattened
/// batch.
struct SolverConfig {
  double tol = 1e-5;
  int max_iters = 30;
  double alpha = 1.0;
  int line_search_halvings = 4;

  void validate() const;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EquilibriumResult {
  Tensor solution;
  double residual_norm = 0.0;
  int iters = 0;
  bool converged = false;
  /// Residual norm at the start and after every iteration (iters + 1 entries).
  std::vector<double> trace;
  /// ‖z⁽ⁱ⁺¹⁾ − z⁽ⁱ⁾‖ for every iteration (iters entries).
  std::vector<double> step_norms;
  /// ‖z⁽ⁱ⁾‖ for every iterate (iters + 1 entries).
  std::vector<double> iterate_norms;
  /// Number of residual (or f) evaluations spent, including line-search trials.
  int evaluations = 0;
};

/// Limited-memory inverse-Jacobian estimate B = −I + Σᵢ uᵢvᵢᵀ.
class BroydenState {
 public:
  explicit BroydenState(std::size_t n) : n_(n) {}

  std::size_t dimension() const noexcept { return n_; }
  std::size_t rank() const noexcept { return us_.size(); }

  /// B·v without materializing B.
  Tensor apply(const Tensor& v) const;
  /// Bᵀ·v
  Tensor apply_transpose(const Tensor& v) const;
  /// Good-Broyden update B⁺ = B + (Δz − BΔg)/(ΔzᵀBΔg) · ΔzᵀB.
  /// Skipped (returns false) when |ΔzᵀBΔg| < 1e-12·‖Δz‖‖Δg‖.
  bool update(const Tensor& dz, const Tensor& dg);
  void reset();

  /// Dense n×n row-major copy of B; meant for tests at small n.
  std::vector<double> dense() const;

 private:
  std::size_t n_;
  std::vector<std::vector<double>> us_, vs_;
};

/// Called after every Broyden update attempt with the state after the update.
using BroydenObserver =
    std::function<void(const BroydenState& after, const Tensor& dz, const Tensor& dg, bool applied)>;

/// Naive iteration z ← f(z) until ‖f(z) − z‖₂ < tol.
EquilibriumResult fixed_point_iterate(const VectorMap& f, const Tensor& z0, const SolverConfig& cfg);

/// Root of g by z⁽ⁱ⁺¹⁾ = z⁽ⁱ⁾ − α·B·g(z⁽ⁱ⁾), B updated by Sherman–Morrison.
/// With line_search_halvings > 0, a step is accepted only if it lowers ‖g‖;
/// if no trial does, z stays put and B still absorbs the secant pair.
/// Returns the best iterate seen when the iteration limit is hit.
EquilibriumResult broyden_solve(const VectorMap& g, const Tensor& z0, const SolverConfig& cfg,
                                const BroydenObserver& observer = {});

/// Solves x·J_g + rhs = 0 for x, where jtvp(x) = x·J_g = x·∂f/∂z − x is
/// provided through one VJP per call. Starts from x = 0.
EquilibriumResult solve_linear_vjp(const VectorMap& jtvp, const Tensor& rhs, const SolverConfig& cfg);

struct TraceRow {
  int iter = 0;
  double residual_norm = 0.0;
  double rel_step = 0.0;
};

/// One row per iteration i = 1..iters: the residual after the step and
/// ‖z⁽ⁱ⁾ − z⁽ⁱ⁻¹⁾‖/‖z⁽ⁱ⁻¹⁾‖ (‖z⁽ⁱ⁾‖ is the denominator when z⁽ⁱ⁻¹⁾ = 0).
/// A run that converged at its start point yields the single row (0, r₀, 0).
std::vector<TraceRow> residual_trace(const EquilibriumResult& result);

}  // namespace deq
