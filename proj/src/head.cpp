#include "deq/head.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "deq/ops.hpp"

namespace deq {

std::string_view to_string(LossKind kind) {
  return kind == LossKind::CrossEntropy ? "cross-entropy" : "squared-error";
}

std::vector<ParamInfo> OutputHead::param_layout() const {
  return {{"W", {width, outputs}, ParamRole::Weight}, {"b", {outputs}, ParamRole::Bias}};
}

HeadResult apply_head_and_loss(const OutputHead& head, const ParamSet& params, const Tensor& z,
                               const Tensor& targets) {
  if (z.rank() != 3 || z.dim(2) != head.width) {
    throw ShapeError("head: z must be (N, T, " + std::to_string(head.width) + "), got " +
                     to_string(z.shape()));
  }
  const std::size_t N = z.dim(0), T = z.dim(1), q = head.outputs, rows = N * T;
  HeadResult r;
  r.outputs = linear(z, params["W"], params["b"]);
  Tensor d_out(r.outputs.shape());
  const double inv = rows ? 1.0 / static_cast<double>(rows) : 0.0;

  if (head.loss == LossKind::CrossEntropy) {
    if (targets.shape() != Shape{N, T}) {
      throw ShapeError("head: cross-entropy targets must be (" + std::to_string(N) + ", " +
                       std::to_string(T) + "), got " + to_string(targets.shape()));
    }
    for (std::size_t i = 0; i < rows; ++i) {
      const double y = targets[i];
      if (!(y >= 0.0) || y >= static_cast<double>(q) || y != std::floor(y)) {
        throw std::out_of_range("head: class index " + std::to_string(y) + " at position " +
                                std::to_string(i) + " outside [0, " + std::to_string(q) + ")");
      }
      const double* logit = r.outputs.ptr() + i * q;
      double peak = logit[0];
      for (std::size_t c = 1; c < q; ++c) peak = std::max(peak, logit[c]);
      double total = 0.0;
      for (std::size_t c = 0; c < q; ++c) total += std::exp(logit[c] - peak);
      const auto cls = static_cast<std::size_t>(y);
      r.loss += (peak + std::log(total) - logit[cls]) * inv;
      double* g = d_out.ptr() + i * q;
      for (std::size_t c = 0; c < q; ++c) g[c] = std::exp(logit[c] - peak) / total * inv;
      g[cls] -= inv;
    }
  } else {
    if (targets.shape() != r.outputs.shape()) {
      throw ShapeError("head: squared-error targets must be " + to_string(r.outputs.shape()) +
                       ", got " + to_string(targets.shape()));
    }
    for (std::size_t i = 0; i < r.outputs.size(); ++i) {
      const double e = r.outputs[i] - targets[i];
      r.loss += e * e * inv;
      d_out[i] = 2.0 * e * inv;
    }
  }
  LinearGrads g = linear_vjp(z, params["W"], d_out, true, true, true);
  r.dl_dz = std::move(g.x);
  r.grads.add("W", std::move(g.w));
  r.grads.add("b", std::move(g.b));
  return r;
}

double accuracy(const Tensor& outputs, const Tensor& targets) {
  const std::size_t q = outputs.shape().back(), rows = outputs.size() / q;
  if (targets.size() != rows) throw ShapeError("accuracy: targets do not match outputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double* o = outputs.ptr() + i * q;
    const auto best = static_cast<std::size_t>(std::max_element(o, o + q) - o);
    if (static_cast<double>(best) == targets[i]) ++hits;
  }
  return rows ? static_cast<double>(hits) / static_cast<double>(rows) : 0.0;
}

ParamSet init_params(const std::vector<ParamInfo>& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  ParamSet out;
  for (const ParamInfo& info : layout) {
    Tensor t(info.shape);
    if (info.role != ParamRole::Bias) {
      for (double& v : t.data()) v = normal(rng);
    }
    out.add(info.name, std::move(t));
  }
  return out;
}

}  // namespace deq
