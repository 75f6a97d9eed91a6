#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "deq/function.hpp"

namespace deq {

enum class LossKind { CrossEntropy, SquaredError };

std::string_view to_string(LossKind kind);

/// Position-wise projection h(z) = z·W + b from width d to q outputs, plus
/// the loss it is trained under.
struct OutputHead {
  std::size_t width = 1;    // d
  std::size_t outputs = 1;  // q
  LossKind loss = LossKind::CrossEntropy;

  std::vector<ParamInfo> param_layout() const;
};

struct HeadResult {
  double loss = 0.0;
  /// ∂ℓ/∂z, same shape as z.
  Tensor dl_dz;
  /// Gradients for "W" and "b".
  ParamSet grads;
  /// h(z), shape (N, T, q).
  Tensor outputs;
};

/// Cross-entropy targets are class indices (N, T) stored as doubles; squared
/// error targets are (N, T, q). The loss is the mean over the N·T positions:
/// −log softmax(h)[y] or ‖h − y‖² respectively.
HeadResult apply_head_and_loss(const OutputHead& head, const ParamSet& params, const Tensor& z,
                               const Tensor& targets);

/// Fraction of positions whose arg-max output equals the class target.
double accuracy(const Tensor& outputs, const Tensor& targets);

inline constexpr double kInitStd = 0.05;

/// Weights and gains i.i.d. N(0, kInitStd²), biases zero, drawn in layout order.
ParamSet init_params(const std::vector<ParamInfo>& layout, std::uint64_t seed);

}  // namespace deq
