#include "deq/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "deq/ops.hpp"

namespace deq {

struct TransformerCell::Bound {
  ParamSet params;
  std::size_t mem = 0;
  Tensor x_all;      // (N, P, p)
  Tensor injection;  // (N, P, 3d)
  Tensor mem_proj;   // (N, M, 3d): context hidden through W_qkv, empty when M = 0
  Tensor mem_hidden; // (N, M, d)
};

struct TransformerCell::Trace {
  Tensor qkv;    // (N, P, 3d)
  Tensor probs;  // (N, H, T, P)
  Tensor attn;   // (N, T, d), heads concatenated
  Tensor pre1, h1, inner, phi;
};

namespace {

struct AttentionShape {
  std::size_t batch, mem, steps, width, heads, offsets;
  std::size_t positions() const { return mem + steps; }
  std::size_t head_dim() const { return width / heads; }
};

// Causal multi-head attention over qkv (N,P,3d); queries are the last T positions.
void attention_forward(const AttentionShape& s, const double* qkv, const double* bias, double* out,
                       double* probs) {
  const std::size_t P = s.positions(), d = s.width, dh = s.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto pairs = static_cast<std::int64_t>(s.batch * s.heads);
#pragma omp parallel for schedule(static)
  for (std::int64_t nh = 0; nh < pairs; ++nh) {
    const std::size_t n = static_cast<std::size_t>(nh) / s.heads;
    const std::size_t h = static_cast<std::size_t>(nh) % s.heads;
    const double* base = qkv + n * P * 3 * d;
    std::vector<double> logits(P);
    for (std::size_t t = 0; t < s.steps; ++t) {
      const std::size_t i = s.mem + t;
      const double* q = base + i * 3 * d + h * dh;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const double* k = base + j * 3 * d + d + h * dh;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += q[c] * k[c];
        logits[j] = acc * scale + bias[h * s.offsets + std::min(i - j, s.offsets - 1)];
        peak = std::max(peak, logits[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        logits[j] = std::exp(logits[j] - peak);
        total += logits[j];
      }
      double* o = out + (n * s.steps + t) * d + h * dh;
      std::fill(o, o + dh, 0.0);
      double* prow = probs + ((n * s.heads + h) * s.steps + t) * P;
      std::fill(prow, prow + P, 0.0);
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = logits[j] / total;
        prow[j] = p;
        const double* v = base + j * 3 * d + 2 * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] += p * v[c];
      }
    }
  }
}

// Gradients of attention_forward w.r.t. qkv (accumulated into dqkv) and the bias table.
void attention_backward(const AttentionShape& s, const double* qkv, const double* probs,
                        const double* d_out, double* dqkv, double* dbias) {
  const std::size_t P = s.positions(), d = s.width, dh = s.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto pairs = static_cast<std::int64_t>(s.batch * s.heads);
  // Per-pair bias partials, summed afterwards in a fixed order.
  std::vector<double> partial(s.batch * s.heads * s.offsets, 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t nh = 0; nh < pairs; ++nh) {
    const std::size_t n = static_cast<std::size_t>(nh) / s.heads;
    const std::size_t h = static_cast<std::size_t>(nh) % s.heads;
    const double* base = qkv + n * P * 3 * d;
    double* dbase = dqkv + n * P * 3 * d;
    double* my_bias = partial.data() + static_cast<std::size_t>(nh) * s.offsets;
    std::vector<double> dp(P);
    for (std::size_t t = 0; t < s.steps; ++t) {
      const std::size_t i = s.mem + t;
      const double* prow = probs + ((n * s.heads + h) * s.steps + t) * P;
      const double* go = d_out + (n * s.steps + t) * d + h * dh;
      double weighted = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        const double* v = base + j * 3 * d + 2 * d + h * dh;
        double* dv = dbase + j * 3 * d + 2 * d + h * dh;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          acc += go[c] * v[c];
          dv[c] += prow[j] * go[c];
        }
        dp[j] = acc;
        weighted += prow[j] * acc;
      }
      const double* q = base + i * 3 * d + h * dh;
      double* dq = dbase + i * 3 * d + h * dh;
      for (std::size_t j = 0; j <= i; ++j) {
        const double dl = prow[j] * (dp[j] - weighted);
        my_bias[std::min(i - j, s.offsets - 1)] += dl;
        const double* k = base + j * 3 * d + d + h * dh;
        double* dk = dbase + j * 3 * d + d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dq[c] += dl * scale * k[c];
          dk[c] += dl * scale * q[c];
        }
      }
    }
  }
  for (std::size_t nh = 0; nh < s.batch * s.heads; ++nh) {
    const std::size_t h = nh % s.heads;
    for (std::size_t r = 0; r < s.offsets; ++r) dbias[h * s.offsets + r] += partial[nh * s.offsets + r];
  }
}

}  // namespace

TransformerCell::TransformerCell(TransformerDims dims) : dims_(dims) {
  if (dims_.input == 0 || dims_.width == 0) throw std::invalid_argument("transformer: widths must be >= 1");
  if (dims_.heads == 0 || dims_.width % dims_.heads != 0) {
    throw std::invalid_argument("transformer: heads (" + std::to_string(dims_.heads) +
                                ") must divide width (" + std::to_string(dims_.width) + ")");
  }
  if (dims_.max_offset == 0) throw std::invalid_argument("transformer: max_offset must be >= 1");
}

std::vector<ParamInfo> TransformerCell::param_layout() const {
  const std::size_t d = dims_.width, p = dims_.input;
  return {{"W_qkv", {d, 3 * d}, ParamRole::Weight},
          {"W_x", {p, 3 * d}, ParamRole::Weight},
          {"W_o", {d, d}, ParamRole::Weight},
          {"b_o", {d}, ParamRole::Bias},
          {"pos_bias", {dims_.heads, dims_.max_offset}, ParamRole::Bias},
          {"ln1.gain", {d}, ParamRole::Gain},
          {"ln1.bias", {d}, ParamRole::Bias},
          {"ffn.W1", {d, 4 * d}, ParamRole::Weight},
          {"ffn.b1", {4 * d}, ParamRole::Bias},
          {"ffn.W2", {4 * d, d}, ParamRole::Weight},
          {"ffn.b2", {d}, ParamRole::Bias},
          {"ln2.gain", {d}, ParamRole::Gain},
          {"ln2.bias", {d}, ParamRole::Bias}};
}

TransformerCell::Bound TransformerCell::prepare(const Tensor& x, const ParamSet& params,
                                                const SequenceContext& ctx) const {
  check_params(params);
  Bound b;
  b.params = params;
  b.mem = ctx.length();
  if (b.mem > 0) {
    if (ctx.hidden.dim(0) != x.dim(0) || ctx.hidden.dim(2) != dims_.width ||
        ctx.input.shape() != Shape{x.dim(0), b.mem, dims_.input}) {
      throw ShapeError("transformer: context must be hidden (" + std::to_string(x.dim(0)) + ", M, " +
                       std::to_string(dims_.width) + ") and input (" + std::to_string(x.dim(0)) +
                       ", M, " + std::to_string(dims_.input) + "), got " +
                       to_string(ctx.hidden.shape()) + " and " + to_string(ctx.input.shape()));
    }
    const Tensor parts[] = {ctx.input, x};
    b.x_all = concat(parts, 1);
    b.mem_hidden = ctx.hidden;
    b.mem_proj = linear(ctx.hidden, params["W_qkv"]);
  } else {
    b.x_all = x;
  }
  b.injection = linear(b.x_all, params["W_x"]);
  return b;
}

Tensor TransformerCell::apply(const Bound& b, const Tensor& z, Trace* trace) const {
  const ParamSet& prm = b.params;
  const std::size_t N = z.dim(0), T = z.dim(1), d = dims_.width, M = b.mem, P = M + T;

  Tensor qkv = b.injection;
  const Tensor zproj = linear(z, prm["W_qkv"]);
  for (std::size_t n = 0; n < N; ++n) {
    double* row = qkv.ptr() + n * P * 3 * d;
    if (M > 0) {
      const double* mp = b.mem_proj.ptr() + n * M * 3 * d;
      for (std::size_t i = 0; i < M * 3 * d; ++i) row[i] += mp[i];
    }
    const double* zp = zproj.ptr() + n * T * 3 * d;
    for (std::size_t i = 0; i < T * 3 * d; ++i) row[M * 3 * d + i] += zp[i];
  }

  const AttentionShape shape{N, M, T, d, dims_.heads, dims_.max_offset};
  Tensor attn({N, T, d});
  Tensor probs({N, dims_.heads, T, P});
  attention_forward(shape, qkv.ptr(), prm["pos_bias"].ptr(), attn.ptr(), probs.ptr());

  Tensor pre1 = linear(attn, prm["W_o"], prm["b_o"]);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* v = b.injection.ptr() + ((n * P) + M + t) * 3 * d + 2 * d;
      double* dst = pre1.ptr() + (n * T + t) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += v[c];
    }
  }
  Tensor h1 = layer_norm(pre1, prm["ln1.gain"], prm["ln1.bias"]);
  Tensor inner = linear(h1, prm["ffn.W1"], prm["ffn.b1"]);
  Tensor phi = h1;
  phi += linear(relu(inner), prm["ffn.W2"], prm["ffn.b2"]);
  Tensor out = layer_norm(phi, prm["ln2.gain"], prm["ln2.bias"]);
  if (trace) {
    trace->qkv = std::move(qkv);
    trace->probs = std::move(probs);
    trace->attn = std::move(attn);
    trace->pre1 = std::move(pre1);
    trace->h1 = std::move(h1);
    trace->inner = std::move(inner);
    trace->phi = std::move(phi);
  }
  return out;
}

Tensor TransformerCell::forward(const Tensor& z, const Tensor& x, const ParamSet& params,
                                const SequenceContext& ctx) const {
  check_args(z, x);
  return apply(prepare(x, params, ctx), z, nullptr);
}

VectorMap TransformerCell::bind(const Tensor& x, const ParamSet& params,
                                const SequenceContext& ctx) const {
  auto bound = std::make_shared<const Bound>(prepare(x, params, ctx));
  return [this, bound](const Tensor& z) {
    const Shape expected{bound->x_all.dim(0), bound->x_all.dim(1) - bound->mem, dims_.width};
    if (z.shape() != expected) {
      throw ShapeError("transformer: hidden sequence must be " + to_string(expected) + ", got " +
                       to_string(z.shape()));
    }
    return apply(*bound, z, nullptr);
  };
}

FnGrads TransformerCell::vjp(const Tensor& z, const Tensor& x, const ParamSet& params,
                             const SequenceContext& ctx, const Tensor& cotangent, Wrt wrt) const {
  check_args(z, x);
  const Bound b = prepare(x, params, ctx);
  Trace tr;
  apply(b, z, &tr);
  const std::size_t N = z.dim(0), T = z.dim(1), d = dims_.width, M = b.mem, P = M + T;

  const LayerNormGrads g2 = layer_norm_vjp(tr.phi, params["ln2.gain"], cotangent);
  const Tensor act = relu(tr.inner);
  const LinearGrads gw2 = linear_vjp(act, params["ffn.W2"], g2.input, true, wrt.params, wrt.params);
  Tensor d_inner = gw2.x;
  for (std::size_t i = 0; i < d_inner.size(); ++i) {
    if (!(tr.inner[i] > 0.0)) d_inner[i] = 0.0;
  }
  const LinearGrads gw1 = linear_vjp(tr.h1, params["ffn.W1"], d_inner, true, wrt.params, wrt.params);
  Tensor d_h1 = g2.input;
  d_h1 += gw1.x;
  const LayerNormGrads g1 = layer_norm_vjp(tr.pre1, params["ln1.gain"], d_h1);
  const LinearGrads go = linear_vjp(tr.attn, params["W_o"], g1.input, true, wrt.params, wrt.params);

  const AttentionShape shape{N, M, T, d, dims_.heads, dims_.max_offset};
  Tensor d_qkv({N, P, 3 * d});
  Tensor d_bias({dims_.heads, dims_.max_offset});
  attention_backward(shape, tr.qkv.ptr(), tr.probs.ptr(), go.x.ptr(), d_qkv.ptr(), d_bias.ptr());

  // The injection additionally feeds the residual through its value slice.
  Tensor d_inj = d_qkv;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t t = 0; t < T; ++t) {
      double* dst = d_inj.ptr() + ((n * P) + M + t) * 3 * d + 2 * d;
      const double* src = g1.input.ptr() + (n * T + t) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }

  FnGrads g;
  const Tensor d_cur = M > 0 ? slice(d_qkv, 1, M, P) : d_qkv;
  const LinearGrads gz = linear_vjp(z, params["W_qkv"], d_cur, wrt.z, wrt.params, false);
  if (wrt.z) g.z = gz.x;
  const LinearGrads gx = linear_vjp(b.x_all, params["W_x"], d_inj, wrt.x || wrt.context, wrt.params, false);
  if (wrt.x) g.x = M > 0 ? slice(gx.x, 1, M, P) : gx.x;

  LinearGrads gm;
  if (M > 0 && (wrt.context || wrt.params)) {
    gm = linear_vjp(b.mem_hidden, params["W_qkv"], slice(d_qkv, 1, 0, M), wrt.context, wrt.params, false);
  }
  if (wrt.params) {
    Tensor d_wqkv = gz.w;
    if (M > 0) d_wqkv += gm.w;
    g.params.add("W_qkv", std::move(d_wqkv));
    g.params.add("W_x", gx.w);
    g.params.add("W_o", go.w);
    g.params.add("b_o", go.b);
    g.params.add("pos_bias", std::move(d_bias));
    g.params.add("ln1.gain", g1.gain);
    g.params.add("ln1.bias", g1.bias);
    g.params.add("ffn.W1", gw1.w);
    g.params.add("ffn.b1", gw1.b);
    g.params.add("ffn.W2", gw2.w);
    g.params.add("ffn.b2", gw2.b);
    g.params.add("ln2.gain", g2.gain);
    g.params.add("ln2.bias", g2.bias);
  }
  if (wrt.context && M > 0) {
    g.context.hidden = gm.x;
    g.context.input = slice(gx.x, 1, 0, M);
  }
  return g;
}

}  // namespace deq
