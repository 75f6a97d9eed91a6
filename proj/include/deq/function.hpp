#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "deq/tensor.hpp"

namespace deq {

/// Frames that precede the current sequence: previous hidden states (N,L,d)
/// and the inputs they were computed from (N,L,p). L may be 0.
struct SequenceContext {
  Tensor hidden;
  Tensor input;

  std::size_t length() const { return hidden.rank() == 3 ? hidden.dim(1) : 0; }
};

/// Which arguments a VJP should produce gradients for.
struct Wrt {
  bool z = false;
  bool x = false;
  bool params = false;
  bool context = false;

  static Wrt all() { return {true, true, true, true}; }
};

/// Output of a VJP. Tensors not requested by Wrt are left empty.
struct FnGrads {
  Tensor z;
  Tensor x;
  ParamSet params;
  SequenceContext context;
};

enum class ParamRole { Weight, Bias, Gain };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamRole role = ParamRole::Weight;
};

/// z ↦ f(z) with the input and parameters held fixed.
using VectorMap = std::function<Tensor(const Tensor&)>;

/// f_θ(z; x): maps a hidden sequence (N,T,d) to a hidden sequence of the same
/// shape, given inputs (N,T,p), parameters and optional preceding context.
/// Implementations must be deterministic and causal in time.
class DifferentiableFn {
 public:
  virtual ~DifferentiableFn() = default;

  virtual std::string name() const = 0;
  virtual std::size_t hidden_width() const = 0;
  virtual std::size_t input_width() const = 0;
  virtual std::vector<ParamInfo> param_layout() const = 0;

  virtual Tensor forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                         const SequenceContext& ctx) const = 0;
  virtual FnGrads vjp(const Tensor& z, const Tensor& x, const ParamSet& params,
                      const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt) const = 0;

  /// Closure over fixed (x, θ, ctx). Cells override this to precompute the
  /// z-independent input injection once per sequence.
  virtual VectorMap bind(const Tensor& x, const ParamSet& params, const SequenceContext& ctx) const;

  Tensor forward(const Tensor& z, const Tensor& x, const ParamSet& params) const {
    return forward(z, x, params, {});
  }

  /// Checks (z, x) against the declared widths; returns (N, T).
  std::pair<std::size_t, std::size_t> check_args(const Tensor& z, const Tensor& x) const;
  /// Checks every declared parameter is present with the declared shape.
  void check_params(const ParamSet& params) const;
};

/// vᵀ·∂f/∂(selected args) at (z, x, θ, ctx), validating the cotangent shape.
FnGrads vjp(const DifferentiableFn& fn, const Tensor& z, const Tensor& x, const ParamSet& params,
            const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt);

enum class Activation { Identity, Tanh, Relu, Sigmoid };

double activate(Activation a, double v);
/// Derivative expressed through the activation output y = activate(a, v).
double activate_grad_from_output(Activation a, double y);

/// Per-position map f(z; x) = act(z·A + x·U + b) with no temporal mixing.
/// Parameters "A" (d,d), "U" (p,d), "b" (d).
class PositionwiseFn final : public DifferentiableFn {
 public:
  PositionwiseFn(std::size_t d, std::size_t p, Activation act = Activation::Identity)
      : d_(d), p_(p), act_(act) {}

  std::string name() const override { return "positionwise"; }
  std::size_t hidden_width() const override { return d_; }
  std::size_t input_width() const override { return p_; }
  std::vector<ParamInfo> param_layout() const override;

  using DifferentiableFn::forward;
  Tensor forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                 const SequenceContext& ctx) const override;
  FnGrads vjp(const Tensor& z, const Tensor& x, const ParamSet& params, const SequenceContext& ctx,
              const Tensor& cotangent, Wrt wrt) const override;

 private:
  std::size_t d_, p_;
  Activation act_;
};

/// Γ(w; x) = [f1(w₁; x), v2(w₂; w₁)] on hidden width r + d, where w₁ is the
/// first r features and w₂ the last d. Parameters are stored with prefixes
/// "f1." and "v2.".
class StackedFn final : public DifferentiableFn {
 public:
  StackedFn(std::shared_ptr<const DifferentiableFn> first,
            std::shared_ptr<const DifferentiableFn> second);

  std::string name() const override { return "stacked(" + first_->name() + "," + second_->name() + ")"; }
  std::size_t hidden_width() const override { return r_ + d_; }
  std::size_t input_width() const override { return first_->input_width(); }
  std::vector<ParamInfo> param_layout() const override;

  using DifferentiableFn::forward;
  Tensor forward(const Tensor& w, const Tensor& x, const ParamSet& params,
                 const SequenceContext& ctx) const override;
  FnGrads vjp(const Tensor& w, const Tensor& x, const ParamSet& params, const SequenceContext& ctx,
              const Tensor& cotangent, Wrt wrt) const override;

 private:
  std::shared_ptr<const DifferentiableFn> first_, second_;
  std::size_t r_, d_;
};

/// Builds Γ from f1: (R^r, R^p) → R^r and v2: (R^d, R^r) → R^d.
std::shared_ptr<StackedFn> stack_gamma(std::shared_ptr<const DifferentiableFn> f1,
                                       std::shared_ptr<const DifferentiableFn> v2);

}  // namespace deq
