#pragma once

#include "deq/function.hpp"

namespace deq {

struct TrellisDims {
  std::size_t input = 1;     // p
  std::size_t half = 4;      // m; hidden width is 2m
  std::size_t kernel = 2;    // k
  std::size_t dilation = 1;  // s
};

/// Weight-tied TrellisNet layer in equilibrium form.
///
/// The hidden state packs (cell, hidden) halves of width m each. The
/// convolution reads only the hidden half:
///
///   x̃       = x·W_x + b_x                         (N,T,4m), computed once
///   pre     = Conv1D([u, hidden]; W_z, k, s) + x̃
///   (c', h') = lstm_gated_activation(pre, cell)
///   f(z; x) = [c', h']
///
/// u is the hidden half of the last (k−1)s context frames, zero-padded in
/// front when the context is shorter (zero padding when there is none).
class TrellisCell final : public DifferentiableFn {
 public:
  explicit TrellisCell(TrellisDims dims);

  const TrellisDims& dims() const noexcept { return dims_; }
  std::string name() const override { return "trellis"; }
  std::size_t hidden_width() const override { return 2 * dims_.half; }
  std::size_t input_width() const override { return dims_.input; }
  std::vector<ParamInfo> param_layout() const override;

  using DifferentiableFn::forward;
  Tensor forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                 const SequenceContext& ctx) const override;
  FnGrads vjp(const Tensor& z, const Tensor& x, const ParamSet& params, const SequenceContext& ctx,
              const Tensor& cotangent, Wrt wrt) const override;
  VectorMap bind(const Tensor& x, const ParamSet& params, const SequenceContext& ctx) const override;

 private:
  Tensor injection(const Tensor& x, const ParamSet& params) const;
  Tensor left_frames(const SequenceContext& ctx, std::size_t batch) const;
  Tensor apply(const Tensor& z, const Tensor& injected, const Tensor& left, const Tensor& w_z) const;

  TrellisDims dims_;
};

}  // namespace deq
