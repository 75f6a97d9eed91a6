#pragma once

#include "deq/function.hpp"

namespace deq {

struct TransformerDims {
  std::size_t input = 1;       // p
  std::size_t width = 8;       // d
  std::size_t heads = 2;       // H, must divide d
  std::size_t max_offset = 32; // R: bias table covers offsets 0..R−1, larger offsets clip to R−1
};

/// Weight-tied transformer layer in equilibrium form.
///
/// Over P = M + T positions (M context frames followed by the current ones):
///
///   x̃   = x·W_x                                   (P, 3d), computed once
///   qkv = z·W_qkv + x̃
///   a   = MultiHeadCausal(q, k, v; pos_bias)·W_o + b_o
///   h   = LN₁(x̃_v + a)                            current positions only
///   f   = LN₂(h + relu(h·W₁ + b₁)·W₂ + b₂)
///
/// x̃_v is the value slice of the injection. Logits for query position i and
/// key j ≤ i are q·k/√(d/H) + pos_bias[head, min(i − j, R − 1)].
class TransformerCell final : public DifferentiableFn {
 public:
  explicit TransformerCell(TransformerDims dims);

  const TransformerDims& dims() const noexcept { return dims_; }
  std::string name() const override { return "transformer"; }
  std::size_t hidden_width() const override { return dims_.width; }
  std::size_t input_width() const override { return dims_.input; }
  std::vector<ParamInfo> param_layout() const override;

  using DifferentiableFn::forward;
  Tensor forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                 const SequenceContext& ctx) const override;
  FnGrads vjp(const Tensor& z, const Tensor& x, const ParamSet& params, const SequenceContext& ctx,
              const Tensor& cotangent, Wrt wrt) const override;
  VectorMap bind(const Tensor& x, const ParamSet& params, const SequenceContext& ctx) const override;

 private:
  struct Bound;
  struct Trace;
  Bound prepare(const Tensor& x, const ParamSet& params, const SequenceContext& ctx) const;
  Tensor apply(const Bound& b, const Tensor& z, Trace* trace) const;

  TransformerDims dims_;
};

}  // namespace deq
