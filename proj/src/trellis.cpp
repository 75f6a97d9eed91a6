#include "deq/trellis.hpp"

#include "deq/ops.hpp"

namespace deq {

TrellisCell::TrellisCell(TrellisDims dims) : dims_(dims) {
  if (dims_.input == 0 || dims_.half == 0) throw std::invalid_argument("trellis: widths must be >= 1");
  if (dims_.kernel == 0) throw std::invalid_argument("trellis: kernel size must be >= 1");
  if (dims_.dilation == 0) throw std::invalid_argument("trellis: dilation must be >= 1");
}

std::vector<ParamInfo> TrellisCell::param_layout() const {
  const std::size_t m = dims_.half;
  return {{"W_x", {dims_.input, 4 * m}, ParamRole::Weight},
          {"b_x", {4 * m}, ParamRole::Bias},
          {"W_z", {dims_.kernel, m, 4 * m}, ParamRole::Weight}};
}

Tensor TrellisCell::injection(const Tensor& x, const ParamSet& params) const {
  return linear(x, params["W_x"], params["b_x"]);
}

Tensor TrellisCell::left_frames(const SequenceContext& ctx, std::size_t batch) const {
  const std::size_t need = (dims_.kernel - 1) * dims_.dilation;
  const std::size_t have = ctx.length();
  if (need == 0 || have == 0) return {};
  if (ctx.hidden.dim(0) != batch || ctx.hidden.dim(2) != hidden_width()) {
    throw ShapeError("trellis: context must be (" + std::to_string(batch) + ", L, " +
                     std::to_string(hidden_width()) + "), got " + to_string(ctx.hidden.shape()));
  }
  const std::size_t take = std::min(need, have);
  const Tensor tail = slice(slice(ctx.hidden, 1, have - take, have), 2, dims_.half, 2 * dims_.half);
  if (take == need) return tail;
  const Tensor parts[] = {Tensor({batch, need - take, dims_.half}), tail};
  return concat(parts, 1);
}

Tensor TrellisCell::apply(const Tensor& z, const Tensor& injected, const Tensor& left,
                          const Tensor& w_z) const {
  const std::size_t m = dims_.half;
  const Tensor cell = slice(z, 2, 0, m);
  const Tensor hidden = slice(z, 2, m, 2 * m);
  Tensor pre = causal_conv1d(hidden, w_z, dims_.dilation, left);
  pre += injected;
  const LstmOutput out = lstm_gated_activation(pre, cell);
  const Tensor parts[] = {out.cell, out.hidden};
  return concat(parts, 2);
}

Tensor TrellisCell::forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                            const SequenceContext& ctx) const {
  check_args(z, x);
  return apply(z, injection(x, params), left_frames(ctx, z.dim(0)), params["W_z"]);
}

VectorMap TrellisCell::bind(const Tensor& x, const ParamSet& params, const SequenceContext& ctx) const {
  check_params(params);
  Tensor injected = injection(x, params);
  Tensor left = left_frames(ctx, x.dim(0));
  Tensor w_z = params["W_z"];
  return [this, injected = std::move(injected), left = std::move(left),
          w_z = std::move(w_z)](const Tensor& z) { return apply(z, injected, left, w_z); };
}

FnGrads TrellisCell::vjp(const Tensor& z, const Tensor& x, const ParamSet& params,
                         const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt) const {
  check_args(z, x);
  const std::size_t m = dims_.half;
  const std::size_t batch = z.dim(0);
  const Tensor cell = slice(z, 2, 0, m);
  const Tensor hidden = slice(z, 2, m, 2 * m);
  const Tensor left = left_frames(ctx, batch);
  Tensor pre = causal_conv1d(hidden, params["W_z"], dims_.dilation, left);
  pre += injection(x, params);

  const LstmGrads gl = lstm_gated_activation_vjp(pre, cell, slice(cotangent, 2, 0, m),
                                                 slice(cotangent, 2, m, 2 * m));
  const Conv1dGrads gc = causal_conv1d_vjp(hidden, params["W_z"], dims_.dilation, left, gl.preact);

  FnGrads g;
  if (wrt.z) {
    const Tensor parts[] = {gl.cell_prev, gc.input};
    g.z = concat(parts, 2);
  }
  if (wrt.x || wrt.params) {
    LinearGrads gi = linear_vjp(x, params["W_x"], gl.preact, wrt.x, wrt.params, wrt.params);
    if (wrt.x) g.x = std::move(gi.x);
    if (wrt.params) {
      g.params.add("W_x", std::move(gi.w));
      g.params.add("b_x", std::move(gi.b));
      g.params.add("W_z", gc.kernel);
    }
  }
  if (wrt.context && ctx.length() > 0) {
    g.context.hidden = Tensor(ctx.hidden.shape());
    g.context.input = Tensor(ctx.input.shape());
    const std::size_t need = (dims_.kernel - 1) * dims_.dilation;
    const std::size_t have = ctx.length();
    const std::size_t take = std::min(need, have);
    if (take > 0) {
      // Only the real (non-padded) frames map back onto the context.
      const Tensor used = slice(gc.left_context, 1, need - take, need);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t t = 0; t < take; ++t) {
          for (std::size_t j = 0; j < m; ++j) {
            g.context.hidden.at(n, have - take + t, m + j) += used.at(n, t, j);
          }
        }
      }
    }
  }
  return g;
}

}  // namespace deq
