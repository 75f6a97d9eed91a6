#pragma once

#include <vector>

#include "deq/function.hpp"

namespace deq {

/// One explicit layer a ↦ σ(W·a + b) in column-vector convention: W is
/// (out × in), b has length out.
struct MlpLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::Identity;
};

/// A single weight-tied, input-injected layer z̃ ↦ σ̃(W_z·z̃ + W_x·x + b̃) whose
/// state stacks one block per original layer.
struct WeightTiedNet {
  Tensor w_z;                      // (D, D), nonzero only on the first block subdiagonal
  Tensor w_x;                      // (D, p), first block row holds W⁽¹⁾
  Tensor bias;                     // (D)
  std::vector<Activation> sigma;   // per coordinate
  std::vector<std::size_t> offsets;  // block starts, plus D at the end

  std::size_t state_width() const { return bias.size(); }
  std::size_t depth() const { return offsets.empty() ? 0 : offsets.size() - 1; }

  Tensor step(const Tensor& z, const Tensor& x) const;
  /// `applications` steps from z̃ = 0.
  Tensor run(const Tensor& x, std::size_t applications) const;
  /// Last block of the state.
  Tensor output(const Tensor& z) const;
};

/// Embeds an explicit network of k layers into one weight-tied layer: k
/// applications from zero reproduce the network's output in the last block.
WeightTiedNet build_weight_tied_from_mlp(const std::vector<MlpLayer>& layers);

}  // namespace deq
