#include "deq/function.hpp"

#include <cmath>

#include "deq/ops.hpp"

namespace deq {

VectorMap DifferentiableFn::bind(const Tensor& x, const ParamSet& params,
                                 const SequenceContext& ctx) const {
  return [this, x, params, ctx](const Tensor& z) { return forward(z, x, params, ctx); };
}

std::pair<std::size_t, std::size_t> DifferentiableFn::check_args(const Tensor& z,
                                                                 const Tensor& x) const {
  if (z.rank() != 3 || z.dim(2) != hidden_width()) {
    throw ShapeError(name() + ": hidden sequence must be (N, T, " + std::to_string(hidden_width()) +
                     "), got " + to_string(z.shape()));
  }
  if (x.rank() != 3 || x.dim(0) != z.dim(0) || x.dim(1) != z.dim(1) || x.dim(2) != input_width()) {
    throw ShapeError(name() + ": input must be (" + std::to_string(z.dim(0)) + ", " +
                     std::to_string(z.dim(1)) + ", " + std::to_string(input_width()) + "), got " +
                     to_string(x.shape()));
  }
  return {z.dim(0), z.dim(1)};
}

void DifferentiableFn::check_params(const ParamSet& params) const {
  for (const ParamInfo& info : param_layout()) {
    if (!params.contains(info.name)) {
      throw std::invalid_argument(name() + ": missing parameter '" + info.name + "'");
    }
    if (params[info.name].shape() != info.shape) {
      throw ShapeError(name() + ": parameter '" + info.name + "' has shape " +
                       to_string(params[info.name].shape()) + ", expected " + to_string(info.shape));
    }
  }
}

FnGrads vjp(const DifferentiableFn& fn, const Tensor& z, const Tensor& x, const ParamSet& params,
            const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt) {
  if (cotangent.shape() != z.shape()) {
    throw ShapeError("vjp(" + fn.name() + "): cotangent shape " + to_string(cotangent.shape()) +
                     " does not match output shape " + to_string(z.shape()));
  }
  return fn.vjp(z, x, params, ctx, cotangent, wrt);
}

double activate(Activation a, double v) {
  switch (a) {
    case Activation::Identity: return v;
    case Activation::Tanh: return std::tanh(v);
    case Activation::Relu: return v > 0 ? v : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-v));
  }
  return v;
}

double activate_grad_from_output(Activation a, double y) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Relu: return y > 0 ? 1.0 : 0.0;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

std::vector<ParamInfo> PositionwiseFn::param_layout() const {
  return {{"A", {d_, d_}, ParamRole::Weight},
          {"U", {p_, d_}, ParamRole::Weight},
          {"b", {d_}, ParamRole::Bias}};
}

Tensor PositionwiseFn::forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                               const SequenceContext&) const {
  check_args(z, x);
  Tensor y = linear(z, params["A"], params["b"]);
  y += linear(x, params["U"]);
  if (act_ != Activation::Identity) {
    for (double& v : y.data()) v = activate(act_, v);
  }
  return y;
}

FnGrads PositionwiseFn::vjp(const Tensor& z, const Tensor& x, const ParamSet& params,
                            const SequenceContext&, const Tensor& cotangent, Wrt wrt) const {
  check_args(z, x);
  Tensor dpre = cotangent;
  if (act_ != Activation::Identity) {
    const Tensor y = forward(z, x, params, {});
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= activate_grad_from_output(act_, y[i]);
  }
  FnGrads g;
  const LinearGrads gz = linear_vjp(z, params["A"], dpre, wrt.z, wrt.params, wrt.params);
  const LinearGrads gx = linear_vjp(x, params["U"], dpre, wrt.x, wrt.params, false);
  if (wrt.z) g.z = gz.x;
  if (wrt.x) g.x = gx.x;
  if (wrt.params) {
    g.params.add("A", gz.w);
    g.params.add("U", gx.w);
    g.params.add("b", gz.b);
  }
  return g;
}

StackedFn::StackedFn(std::shared_ptr<const DifferentiableFn> first,
                     std::shared_ptr<const DifferentiableFn> second)
    : first_(std::move(first)), second_(std::move(second)) {
  r_ = first_->hidden_width();
  d_ = second_->hidden_width();
  if (second_->input_width() != r_) {
    throw ShapeError("stack_gamma: second stage expects input width " +
                     std::to_string(second_->input_width()) + " but first stage has hidden width " +
                     std::to_string(r_));
  }
}

std::vector<ParamInfo> StackedFn::param_layout() const {
  std::vector<ParamInfo> out;
  for (ParamInfo p : first_->param_layout()) {
    p.name = "f1." + p.name;
    out.push_back(std::move(p));
  }
  for (ParamInfo p : second_->param_layout()) {
    p.name = "v2." + p.name;
    out.push_back(std::move(p));
  }
  return out;
}

namespace {
SequenceContext split_context(const SequenceContext& ctx, std::size_t r, std::size_t total,
                              bool first) {
  if (ctx.length() == 0) return {};
  if (first) return {slice(ctx.hidden, 2, 0, r), ctx.input};
  return {slice(ctx.hidden, 2, r, total), slice(ctx.hidden, 2, 0, r)};
}
}  // namespace

Tensor StackedFn::forward(const Tensor& w, const Tensor& x, const ParamSet& params,
                          const SequenceContext& ctx) const {
  check_args(w, x);
  const Tensor w1 = slice(w, 2, 0, r_);
  const Tensor w2 = slice(w, 2, r_, r_ + d_);
  const Tensor parts[] = {
      first_->forward(w1, x, params.with_prefix_stripped("f1."), split_context(ctx, r_, r_ + d_, true)),
      second_->forward(w2, w1, params.with_prefix_stripped("v2."),
                       split_context(ctx, r_, r_ + d_, false))};
  return concat(parts, 2);
}

FnGrads StackedFn::vjp(const Tensor& w, const Tensor& x, const ParamSet& params,
                       const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt) const {
  check_args(w, x);
  const Tensor w1 = slice(w, 2, 0, r_);
  const Tensor w2 = slice(w, 2, r_, r_ + d_);
  const Tensor c1 = slice(cotangent, 2, 0, r_);
  const Tensor c2 = slice(cotangent, 2, r_, r_ + d_);

  // w₁ feeds the second stage as its input, so it needs that gradient even when
  // only θ is requested.
  const bool need_w1 = wrt.z || wrt.x || wrt.context;
  const Wrt w_second{wrt.z, need_w1, wrt.params, wrt.context};
  FnGrads g2 = second_->vjp(w2, w1, params.with_prefix_stripped("v2."),
                            split_context(ctx, r_, r_ + d_, false), c2, w_second);

  FnGrads g1;
  if (need_w1 || wrt.params) {
    g1 = first_->vjp(w1, x, params.with_prefix_stripped("f1."), split_context(ctx, r_, r_ + d_, true),
                     c1, {wrt.z, wrt.x, wrt.params, wrt.context});
  }
  FnGrads g;
  if (wrt.z) {
    Tensor dw1 = g1.z;
    dw1 += g2.x;
    const Tensor parts[] = {dw1, g2.z};
    g.z = concat(parts, 2);
  }
  if (wrt.x) g.x = g1.x;
  if (wrt.params) {
    g.params = g1.params.prefixed("f1.");
    g.params.merge(g2.params.prefixed("v2."));
  }
  if (wrt.context && ctx.length() > 0) {
    const Tensor h1 = g1.context.hidden.empty() ? Tensor(slice(ctx.hidden, 2, 0, r_).shape())
                                                : g1.context.hidden;
    Tensor h1_total = h1;
    if (!g2.context.input.empty()) h1_total += g2.context.input;
    const Tensor h2 = g2.context.hidden.empty() ? Tensor(slice(ctx.hidden, 2, r_, r_ + d_).shape())
                                                : g2.context.hidden;
    const Tensor parts[] = {h1_total, h2};
    g.context.hidden = concat(parts, 2);
    g.context.input = g1.context.input.empty() ? Tensor(ctx.input.shape()) : g1.context.input;
  }
  return g;
}

std::shared_ptr<StackedFn> stack_gamma(std::shared_ptr<const DifferentiableFn> f1,
                                       std::shared_ptr<const DifferentiableFn> v2) {
  return std::make_shared<StackedFn>(std::move(f1), std::move(v2));
}

}  // namespace deq
