#include "deq/deq.hpp"

#include <sstream>

#include "deq/ops.hpp"

namespace deq {

std::string_view to_string(SolverKind kind) {
  return kind == SolverKind::Broyden ? "broyden" : "fixpoint";
}

SolverKind parse_solver_kind(std::string_view name) {
  if (name == "broyden") return SolverKind::Broyden;
  if (name == "fixpoint" || name == "fixed-point") return SolverKind::FixedPoint;
  throw std::invalid_argument("unknown solver '" + std::string(name) + "' (expected broyden|fixpoint)");
}

void ActivationLedger::retain(std::string tag, const Tensor& t) {
  tags_.push_back(std::move(tag));
  elements_ += t.size();
}

void ActivationLedger::clear() {
  tags_.clear();
  elements_ = 0;
}

namespace {

Tensor initial_state(const DifferentiableFn& f, const Tensor& x) {
  if (x.rank() != 3) throw ShapeError(f.name() + ": input must be (N, T, p), got " + to_string(x.shape()));
  return Tensor({x.dim(0), x.dim(1), f.hidden_width()});
}

SequenceContext join_context(const SequenceContext& ctx, const Tensor& hidden, const Tensor& input) {
  if (ctx.length() == 0) return {hidden, input};
  const Tensor h[] = {ctx.hidden, hidden};
  const Tensor in[] = {ctx.input, input};
  return {concat(h, 1), concat(in, 1)};
}

// Frames [begin, begin + len) of a context gradient; functions that never read
// their context leave the gradient empty, which stands for zero.
Tensor context_frames(const Tensor& grad, std::size_t begin, std::size_t len, const Tensor& like) {
  if (grad.empty()) return Tensor(like.shape());
  return slice(grad, 1, begin, begin + len);
}

}  // namespace

EquilibriumResult deq_forward(const DeqLayer& layer, const Tensor& x, const ParamSet& params,
                              const SequenceContext& ctx, ActivationLedger* ledger) {
  const DifferentiableFn& f = *layer.f;
  const Tensor z0 = initial_state(f, x);
  f.check_args(z0, x);
  f.check_params(params);
  const VectorMap fz = f.bind(x, params, ctx);

  EquilibriumResult res;
  if (layer.solver == SolverKind::FixedPoint) {
    res = fixed_point_iterate(fz, z0, layer.forward_cfg);
  } else {
    const VectorMap g = [&fz](const Tensor& z) {
      Tensor r = fz(z);
      r -= z;
      return r;
    };
    res = broyden_solve(g, z0, layer.forward_cfg);
  }
  if (ledger) {
    ledger->retain("x", x);
    ledger->retain("z_star", res.solution);
  }
  return res;
}

Gradients deq_backward(const DeqLayer& layer, const Tensor& z_star, const Tensor& x,
                       const ParamSet& params, const Tensor& dl_dz, const SequenceContext& ctx,
                       bool want_context) {
  const DifferentiableFn& f = *layer.f;
  f.check_args(z_star, x);
  require_same_shape("deq_backward", dl_dz, z_star);

  Gradients out;
  const double fwd_residual = norm2(f.forward(z_star, x, params, ctx) - z_star);
  if (fwd_residual > 10.0 * layer.forward_cfg.tol) {
    std::ostringstream os;
    os << "deq_backward: forward residual " << fwd_residual << " exceeds 10x forward tolerance "
       << layer.forward_cfg.tol << "; gradient may be inaccurate";
    out.warnings.push_back(os.str());
  }

  const VectorMap jtvp = [&](const Tensor& v) {
    Tensor y = vjp(f, z_star, x, params, ctx, v, Wrt{.z = true}).z;
    y -= v;
    return y;
  };
  out.backward = solve_linear_vjp(jtvp, dl_dz, layer.backward_cfg);

  FnGrads g = vjp(f, z_star, x, params, ctx, out.backward.solution,
                  Wrt{.z = false, .x = true, .params = true, .context = want_context});
  out.wrt_params = std::move(g.params);
  out.wrt_input = std::move(g.x);
  if (want_context) out.wrt_context = std::move(g.context);
  return out;
}

ParamSet sgd_step(ParamSet theta, const ParamSet& grads, double lr) {
  for (auto& [name, value] : theta) {
    if (grads.contains(name)) value.axpy(-lr, grads[name]);
  }
  return theta;
}

Gradients subsequence_backward(const DeqLayer& layer, const Tensor& z_star, const Tensor& x,
                               const ParamSet& params, const Tensor& dl_dz, std::size_t split,
                               const SequenceContext& ctx) {
  layer.f->check_args(z_star, x);
  require_same_shape("subsequence_backward", dl_dz, z_star);
  const std::size_t steps = z_star.dim(1);
  if (split == 0 || split >= steps) {
    throw std::invalid_argument("subsequence_backward: split " + std::to_string(split) +
                                " must lie strictly inside (0, " + std::to_string(steps) + ")");
  }
  const std::size_t lead = ctx.length();
  const Tensor z_a = slice(z_star, 1, 0, split), z_b = slice(z_star, 1, split, steps);
  const Tensor x_a = slice(x, 1, 0, split), x_b = slice(x, 1, split, steps);
  const Tensor dl_a = slice(dl_dz, 1, 0, split), dl_b = slice(dl_dz, 1, split, steps);

  // Terms (A) and (B): second half with the first half as differentiable context.
  const SequenceContext ctx_b = join_context(ctx, z_a, x_a);
  Gradients g_b = deq_backward(layer, z_b, x_b, params, dl_b, ctx_b, /*want_context=*/true);

  // Term (C): the first half sees its own cotangent plus what flowed back through (B).
  Tensor c_a = dl_a;
  c_a += context_frames(g_b.wrt_context.hidden, lead, split, z_a);
  Gradients g_a = deq_backward(layer, z_a, x_a, params, c_a, ctx, lead > 0);

  Gradients out;
  out.wrt_params = g_a.wrt_params;
  out.wrt_params += g_b.wrt_params;
  Tensor dx_a = g_a.wrt_input;
  dx_a += context_frames(g_b.wrt_context.input, lead, split, x_a);
  const Tensor parts[] = {dx_a, g_b.wrt_input};
  out.wrt_input = concat(parts, 1);
  out.backward = g_b.backward;
  out.backward.iters += g_a.backward.iters;
  out.backward.evaluations += g_a.backward.evaluations;
  out.backward.converged = g_a.backward.converged && g_b.backward.converged;
  out.warnings = g_b.warnings;
  out.warnings.insert(out.warnings.end(), g_a.warnings.begin(), g_a.warnings.end());
  return out;
}

UnrolledForward unrolled_forward(const DifferentiableFn& f, const Tensor& x, const ParamSet& params,
                                 int depth, const SequenceContext& ctx, ActivationLedger* ledger) {
  if (depth < 0) throw std::invalid_argument("unrolled_forward: depth must be >= 0");
  UnrolledForward fwd;
  fwd.iterates.reserve(static_cast<std::size_t>(depth) + 1);
  fwd.iterates.push_back(initial_state(f, x));
  const VectorMap fz = f.bind(x, params, ctx);
  for (int k = 0; k < depth; ++k) fwd.iterates.push_back(fz(fwd.iterates.back()));
  if (ledger) {
    ledger->retain("x", x);
    for (std::size_t k = 0; k < fwd.iterates.size(); ++k) {
      ledger->retain("z[" + std::to_string(k) + "]", fwd.iterates[k]);
    }
  }
  return fwd;
}

Gradients unrolled_backward(const DifferentiableFn& f, const UnrolledForward& fwd, const Tensor& x,
                            const ParamSet& params, const Tensor& dl_dz, const SequenceContext& ctx) {
  require_same_shape("unrolled_backward", dl_dz, fwd.output());
  Gradients out;
  out.wrt_params = params.zeros_like();
  out.wrt_input = Tensor(x.shape());
  Tensor cot = dl_dz;
  for (std::size_t k = fwd.iterates.size() - 1; k > 0; --k) {
    FnGrads g = vjp(f, fwd.iterates[k - 1], x, params, ctx, cot,
                    Wrt{.z = k > 1, .x = true, .params = true});
    out.wrt_params += g.params;
    out.wrt_input += g.x;
    if (k > 1) cot = std::move(g.z);
  }
  return out;
}

std::size_t count_retained_activations(const DeqLayer& layer, const Tensor& x,
                                       const ParamSet& params, int iteration_budget) {
  DeqLayer budgeted = layer;
  budgeted.forward_cfg.max_iters = iteration_budget;
  budgeted.backward_cfg.max_iters = iteration_budget;
  ActivationLedger ledger;
  const EquilibriumResult fwd = deq_forward(budgeted, x, params, {}, &ledger);
  const std::size_t at_backward = ledger.count();
  deq_backward(budgeted, fwd.solution, x, params, fwd.solution);
  return at_backward;
}

std::size_t count_retained_activations_unrolled(const DifferentiableFn& f, const Tensor& x,
                                                const ParamSet& params, int depth) {
  ActivationLedger ledger;
  const UnrolledForward fwd = unrolled_forward(f, x, params, depth, {}, &ledger);
  const std::size_t at_backward = ledger.count();
  unrolled_backward(f, fwd, x, params, fwd.output());
  return at_backward;
}

}  // namespace deq
