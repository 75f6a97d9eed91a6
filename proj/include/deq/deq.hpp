#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "deq/function.hpp"
#include "deq/rootfind.hpp"

namespace deq {

enum class SolverKind { Broyden, FixedPoint };

std::string_view to_string(SolverKind kind);
SolverKind parse_solver_kind(std::string_view name);

/// An equilibrium layer z* = RootFind(f(z; x) − z).
struct DeqLayer {
  std::shared_ptr<const DifferentiableFn> f;
  SolverConfig forward_cfg{};
  SolverConfig backward_cfg{1e-8, 30, 1.0, 4};
  SolverKind solver = SolverKind::Broyden;
};

/// Records the sequence-sized tensors kept alive from the forward pass until
/// the backward pass of one training step.
class ActivationLedger {
 public:
  void retain(std::string tag, const Tensor& t);
  void clear();
  std::size_t count() const noexcept { return tags_.size(); }
  std::size_t retained_elements() const noexcept { return elements_; }
  const std::vector<std::string>& tags() const noexcept { return tags_; }

 private:
  std::vector<std::string> tags_;
  std::size_t elements_ = 0;
};

/// Solves for z* starting from z = 0. Retains only x and z* in the ledger.
EquilibriumResult deq_forward(const DeqLayer& layer, const Tensor& x, const ParamSet& params,
                              const SequenceContext& ctx = {}, ActivationLedger* ledger = nullptr);

struct Gradients {
  ParamSet wrt_params;
  Tensor wrt_input;
  /// Gradient w.r.t. the preceding context; only filled when requested.
  SequenceContext wrt_context;
  double loss = 0.0;
  /// Diagnostics of the backward linear solve.
  EquilibriumResult backward;
  std::vector<std::string> warnings;
};

/// Implicit backward pass: solves u·J_g = −∂ℓ/∂z* with Broyden, then returns
/// u·∂f/∂θ and u·∂f/∂x. Warns when ‖f(z*) − z*‖ > 10·forward tol.
Gradients deq_backward(const DeqLayer& layer, const Tensor& z_star, const Tensor& x,
                       const ParamSet& params, const Tensor& dl_dz, const SequenceContext& ctx = {},
                       bool want_context = false);

/// θ⁺ = θ − lr·∂ℓ/∂θ
ParamSet sgd_step(ParamSet theta, const ParamSet& grads, double lr);

/// Backward pass split at time `split`: the second half is treated as its own
/// equilibrium with the first half as fixed left context, then its context
/// gradient is folded into the first half's cotangent.
Gradients subsequence_backward(const DeqLayer& layer, const Tensor& z_star, const Tensor& x,
                               const ParamSet& params, const Tensor& dl_dz, std::size_t split,
                               const SequenceContext& ctx = {});

/// Explicit weight-tied stack z⁽ᵏ⁺¹⁾ = f(z⁽ᵏ⁾; x) from z⁽⁰⁾ = 0, keeping every
/// iterate for ordinary backpropagation.
struct UnrolledForward {
  std::vector<Tensor> iterates;  // depth + 1 entries, iterates.back() is the output
  const Tensor& output() const { return iterates.back(); }
};

UnrolledForward unrolled_forward(const DifferentiableFn& f, const Tensor& x, const ParamSet& params,
                                 int depth, const SequenceContext& ctx = {},
                                 ActivationLedger* ledger = nullptr);
Gradients unrolled_backward(const DifferentiableFn& f, const UnrolledForward& fwd, const Tensor& x,
                            const ParamSet& params, const Tensor& dl_dz,
                            const SequenceContext& ctx = {});

/// Runs one forward + backward step with the given solver budget on the
/// loss ½‖z*‖² and returns the ledger count at backward time.
std::size_t count_retained_activations(const DeqLayer& layer, const Tensor& x,
                                       const ParamSet& params, int iteration_budget);
/// Same measurement for an unrolled stack of the given depth.
std::size_t count_retained_activations_unrolled(const DifferentiableFn& f, const Tensor& x,
                                                const ParamSet& params, int depth);

}  // namespace deq
