#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "deq/tensor.hpp"

namespace deq {

/// Tags for the primitive set. Every primitive has a forward rule and a
/// closed-form vector-Jacobian rule.
enum class OpKind {
  MatMul,         // (M,K) x (K,N)
  Add,            // equal shapes
  Mul,            // equal shapes, elementwise
  Sigmoid,
  Tanh,
  Relu,
  SoftmaxMasked,  // last axis; −inf logits are masked and produce exactly 0
  Concat,         // along OpSpec::axis, any number of operands
  Slice,          // [begin, end) along OpSpec::axis
};

struct OpSpec {
  OpKind kind;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

std::string_view op_name(OpKind kind);

Tensor primitive_forward(const OpSpec& op, std::span<const Tensor> operands);
/// One gradient per operand, each shaped like that operand.
std::vector<Tensor> primitive_vjp(const OpSpec& op, std::span<const Tensor> operands,
                                  const Tensor& cotangent);

// Typed entry points used by the model cells.

/// x(..., K) · W(K, N) + b(N) → (..., N); b may be empty.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});
struct LinearGrads {
  Tensor x, w, b;
};
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& cotangent, bool want_x = true,
                       bool want_w = true, bool want_b = false);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax_masked(const Tensor& logits);
/// Given y = softmax_masked(x) and cotangent g, returns gᵀ ∂y/∂x.
Tensor softmax_masked_vjp(const Tensor& y, const Tensor& cotangent);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Writes `part` into x[begin:begin+len] along axis (the adjoint of slice).
void slice_assign_add(Tensor& x, std::size_t axis, std::size_t begin, const Tensor& part);

/// Dilated causal convolution. input (N,T,c_in), kernel (k,c_in,c_out),
/// left_context (N,(k−1)s,c_in) or empty for zero padding.
Tensor causal_conv1d(const Tensor& input, const Tensor& kernel, std::size_t dilation,
                     const Tensor& left_context = {});
struct Conv1dGrads {
  Tensor input, kernel, left_context;
};
Conv1dGrads causal_conv1d_vjp(const Tensor& input, const Tensor& kernel, std::size_t dilation,
                              const Tensor& left_context, const Tensor& cotangent);

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gain/bias.
Tensor layer_norm(const Tensor& input, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);
struct LayerNormGrads {
  Tensor input, gain, bias;
};
LayerNormGrads layer_norm_vjp(const Tensor& input, const Tensor& gain, const Tensor& cotangent,
                              double eps = kLayerNormEps);

/// LSTM gating. preact (...,4m) split as (input, forget, candidate, output);
/// cell = σ(f)⊙cell_prev + σ(i)⊙tanh(g); hidden = σ(o)⊙tanh(cell).
struct LstmOutput {
  Tensor cell, hidden;
};
LstmOutput lstm_gated_activation(const Tensor& preact, const Tensor& cell_prev);
struct LstmGrads {
  Tensor preact, cell_prev;
};
LstmGrads lstm_gated_activation_vjp(const Tensor& preact, const Tensor& cell_prev,
                                    const Tensor& d_cell, const Tensor& d_hidden);

}  // namespace deq
