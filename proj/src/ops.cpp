#include "deq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "deq/kernels.hpp"

namespace deq {

namespace {

[[noreturn]] void shape_fail(std::string_view op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()));
}

void require_arity(const OpSpec& op, std::span<const Tensor> operands, std::size_t n) {
  if (operands.size() != n) {
    throw std::invalid_argument(std::string(op_name(op.kind)) + ": expected " + std::to_string(n) +
                                " operands, got " + std::to_string(operands.size()));
  }
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Split a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 0, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t last_dim(const Tensor& t, std::string_view op) {
  if (t.rank() == 0) throw ShapeError(std::string(op) + ": rank-0 tensor");
  return t.shape().back();
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::SoftmaxMasked: return "softmax_masked";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
  }
  return "unknown";
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) shape_fail("linear", x, w);
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.size() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor y(out_shape);
  kernels::matmul(x.ptr(), w.ptr(), y.ptr(), m, k, n);
  if (!b.empty()) {
    if (b.size() != n) shape_fail("linear(bias)", y, b);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < n; ++j) y[r * n + j] += b[j];
    }
  }
  return y;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& cotangent, bool want_x,
                       bool want_w, bool want_b) {
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.size() / k;
  if (cotangent.size() != m * n) shape_fail("linear_vjp", cotangent, w);
  LinearGrads g;
  if (want_x) {
    g.x = Tensor(x.shape());
    kernels::matmul_a_bt(cotangent.ptr(), w.ptr(), g.x.ptr(), m, n, k);
  }
  if (want_w) {
    g.w = Tensor(w.shape());
    kernels::matmul_at_b(x.ptr(), cotangent.ptr(), g.w.ptr(), m, k, n);
  }
  if (want_b) {
    g.b = Tensor({n});
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < n; ++j) g.b[j] += cotangent[r * n + j];
    }
  }
  return g;
}

Tensor sigmoid(const Tensor& x) { return map(x, sigmoid_scalar); }
Tensor tanh(const Tensor& x) { return map(x, [](double v) { return std::tanh(v); }); }
Tensor relu(const Tensor& x) { return map(x, [](double v) { return v > 0 ? v : 0.0; }); }

Tensor softmax_masked(const Tensor& logits) {
  const std::size_t len = last_dim(logits, "softmax_masked");
  Tensor y(logits.shape());
  const std::size_t rows = len ? logits.size() / len : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.ptr() + r * len;
    double* out = y.ptr() + r * len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[j]);
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      out[j] = in[j] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(in[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < len; ++j) out[j] /= sum;
  }
  return y;
}

Tensor softmax_masked_vjp(const Tensor& y, const Tensor& cotangent) {
  require_same_shape("softmax_masked_vjp", y, cotangent);
  const std::size_t len = last_dim(y, "softmax_masked_vjp");
  Tensor dx(y.shape());
  const std::size_t rows = len ? y.size() / len : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.ptr() + r * len;
    const double* gr = cotangent.ptr() + r * len;
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += yr[j] * gr[j];
    for (std::size_t j = 0; j < len; ++j) dx[r * len + j] = yr[j] * (gr[j] - s);
  }
  return dx;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) shape_fail("concat", parts.front(), parts.front());
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != out_shape.size()) shape_fail("concat", parts.front(), p);
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != axis && p.dim(i) != parts.front().dim(i)) shape_fail("concat", parts.front(), p);
    }
    out_shape[axis] += p.dim(axis);
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const AxisSplit ps = split_at(p.shape(), axis);
    const std::size_t chunk = ps.extent * ps.inner;
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(p.ptr() + o * chunk, chunk, out.ptr() + o * os.extent * os.inner + offset * os.inner);
    }
    offset += ps.extent;
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (begin > end || end > s.extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for axis " + std::to_string(axis) + " of shape " +
                     to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t chunk = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.ptr() + (o * s.extent + begin) * s.inner, chunk, out.ptr() + o * chunk);
  }
  return out;
}

void slice_assign_add(Tensor& x, std::size_t axis, std::size_t begin, const Tensor& part) {
  const AxisSplit s = split_at(x.shape(), axis);
  const AxisSplit ps = split_at(part.shape(), axis);
  if (ps.outer != s.outer || ps.inner != s.inner || begin + ps.extent > s.extent) {
    shape_fail("slice_assign_add", x, part);
  }
  const std::size_t chunk = ps.extent * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    double* dst = x.ptr() + (o * s.extent + begin) * s.inner;
    const double* src = part.ptr() + o * chunk;
    for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
  }
}

namespace {

struct ConvDims {
  std::size_t batch, steps, c_in, c_out, taps, context;
};

ConvDims check_conv(const Tensor& input, const Tensor& kernel, std::size_t dilation,
                    const Tensor& left_context) {
  if (input.rank() != 3 || kernel.rank() != 3 || kernel.dim(1) != input.dim(2)) {
    shape_fail("causal_conv1d", input, kernel);
  }
  if (dilation == 0) throw std::invalid_argument("causal_conv1d: dilation must be >= 1");
  if (kernel.dim(0) == 0) throw std::invalid_argument("causal_conv1d: kernel size must be >= 1");
  ConvDims d{input.dim(0), input.dim(1), input.dim(2), kernel.dim(2), kernel.dim(0), 0};
  d.context = (d.taps - 1) * dilation;
  if (!left_context.empty() || left_context.rank() == 3) {
    if (left_context.rank() != 3 || left_context.dim(1) != d.context ||
        left_context.dim(0) != d.batch || left_context.dim(2) != d.c_in) {
      throw ShapeError("causal_conv1d: left context must have shape " +
                       to_string({d.batch, d.context, d.c_in}) + " ((k-1)*s = " +
                       std::to_string(d.context) + " frames), got " + to_string(left_context.shape()));
    }
  }
  return d;
}

Tensor extend_left(const Tensor& input, const Tensor& left_context, std::size_t context) {
  if (context == 0) return input;
  if (left_context.empty()) {
    const Tensor zeros({input.dim(0), context, input.dim(2)});
    const Tensor parts[] = {zeros, input};
    return concat(parts, 1);
  }
  const Tensor parts[] = {left_context, input};
  return concat(parts, 1);
}

}  // namespace

Tensor causal_conv1d(const Tensor& input, const Tensor& kernel, std::size_t dilation,
                     const Tensor& left_context) {
  const ConvDims d = check_conv(input, kernel, dilation, left_context);
  const Tensor ext = extend_left(input, left_context, d.context);
  Tensor out({d.batch, d.steps, d.c_out});
  kernels::causal_conv1d(ext.ptr(), kernel.ptr(), out.ptr(), d.batch, d.steps, d.c_in, d.c_out,
                         d.taps, dilation);
  return out;
}

Conv1dGrads causal_conv1d_vjp(const Tensor& input, const Tensor& kernel, std::size_t dilation,
                              const Tensor& left_context, const Tensor& cotangent) {
  const ConvDims d = check_conv(input, kernel, dilation, left_context);
  if (cotangent.shape() != Shape{d.batch, d.steps, d.c_out}) {
    shape_fail("causal_conv1d_vjp", cotangent, input);
  }
  const Tensor ext = extend_left(input, left_context, d.context);
  Tensor d_ext(ext.shape());
  kernels::causal_conv1d_grad_input(cotangent.ptr(), kernel.ptr(), d_ext.ptr(), d.batch, d.steps,
                                    d.c_in, d.c_out, d.taps, dilation);
  Conv1dGrads g;
  g.kernel = Tensor(kernel.shape());
  kernels::causal_conv1d_grad_kernel(ext.ptr(), cotangent.ptr(), g.kernel.ptr(), d.batch, d.steps,
                                     d.c_in, d.c_out, d.taps, dilation);
  g.input = slice(d_ext, 1, d.context, d.context + d.steps);
  g.left_context = slice(d_ext, 1, 0, d.context);
  return g;
}

Tensor layer_norm(const Tensor& input, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t dm = last_dim(input, "layer_norm");
  if (dm == 0) throw ShapeError("layer_norm: last axis must be >= 1");
  if (gain.size() != dm) shape_fail("layer_norm(gain)", input, gain);
  if (bias.size() != dm) shape_fail("layer_norm(bias)", input, bias);
  Tensor y(input.shape());
  const std::size_t rows = input.size() / dm;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = input.ptr() + r * dm;
    double mean = 0.0;
    for (std::size_t j = 0; j < dm; ++j) mean += x[j];
    mean /= static_cast<double>(dm);
    double var = 0.0;
    for (std::size_t j = 0; j < dm; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(dm);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < dm; ++j) y[r * dm + j] = (x[j] - mean) * rstd * gain[j] + bias[j];
  }
  return y;
}

LayerNormGrads layer_norm_vjp(const Tensor& input, const Tensor& gain, const Tensor& cotangent,
                              double eps) {
  require_same_shape("layer_norm_vjp", input, cotangent);
  const std::size_t dm = last_dim(input, "layer_norm_vjp");
  const std::size_t rows = input.size() / dm;
  const double inv_d = 1.0 / static_cast<double>(dm);
  LayerNormGrads g{Tensor(input.shape()), Tensor(gain.shape()), Tensor(gain.shape())};
  std::vector<double> xhat(dm), dxhat(dm);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = input.ptr() + r * dm;
    const double* gy = cotangent.ptr() + r * dm;
    double mean = 0.0;
    for (std::size_t j = 0; j < dm; ++j) mean += x[j];
    mean *= inv_d;
    double var = 0.0;
    for (std::size_t j = 0; j < dm; ++j) var += (x[j] - mean) * (x[j] - mean);
    var *= inv_d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < dm; ++j) {
      xhat[j] = (x[j] - mean) * rstd;
      dxhat[j] = gy[j] * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
      g.gain[j] += gy[j] * xhat[j];
      g.bias[j] += gy[j];
    }
    mean_dxhat *= inv_d;
    mean_dxhat_xhat *= inv_d;
    for (std::size_t j = 0; j < dm; ++j) {
      g.input[r * dm + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return g;
}

namespace {
std::size_t check_lstm(const Tensor& preact, const Tensor& cell_prev) {
  const std::size_t w = last_dim(preact, "lstm_gated_activation");
  if (w % 4 != 0) {
    throw ShapeError("lstm_gated_activation: preactivation width " + std::to_string(w) +
                     " is not divisible by 4");
  }
  const std::size_t m = w / 4;
  Shape expect = preact.shape();
  expect.back() = m;
  if (cell_prev.shape() != expect) shape_fail("lstm_gated_activation", preact, cell_prev);
  return m;
}
}  // namespace

LstmOutput lstm_gated_activation(const Tensor& preact, const Tensor& cell_prev) {
  const std::size_t m = check_lstm(preact, cell_prev);
  LstmOutput out{Tensor(cell_prev.shape()), Tensor(cell_prev.shape())};
  const std::size_t rows = cell_prev.size() / std::max<std::size_t>(m, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = preact.ptr() + r * 4 * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double ig = sigmoid_scalar(p[j]);
      const double fg = sigmoid_scalar(p[m + j]);
      const double cand = std::tanh(p[2 * m + j]);
      const double og = sigmoid_scalar(p[3 * m + j]);
      const double c = fg * cell_prev[r * m + j] + ig * cand;
      out.cell[r * m + j] = c;
      out.hidden[r * m + j] = og * std::tanh(c);
    }
  }
  return out;
}

LstmGrads lstm_gated_activation_vjp(const Tensor& preact, const Tensor& cell_prev,
                                    const Tensor& d_cell, const Tensor& d_hidden) {
  const std::size_t m = check_lstm(preact, cell_prev);
  require_same_shape("lstm_gated_activation_vjp", cell_prev, d_cell);
  require_same_shape("lstm_gated_activation_vjp", cell_prev, d_hidden);
  LstmGrads g{Tensor(preact.shape()), Tensor(cell_prev.shape())};
  const std::size_t rows = cell_prev.size() / std::max<std::size_t>(m, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = preact.ptr() + r * 4 * m;
    double* dp = g.preact.ptr() + r * 4 * m;
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t idx = r * m + j;
      const double ig = sigmoid_scalar(p[j]);
      const double fg = sigmoid_scalar(p[m + j]);
      const double cand = std::tanh(p[2 * m + j]);
      const double og = sigmoid_scalar(p[3 * m + j]);
      const double c = fg * cell_prev[idx] + ig * cand;
      const double tc = std::tanh(c);
      const double dc = d_cell[idx] + d_hidden[idx] * og * (1.0 - tc * tc);
      dp[j] = dc * cand * ig * (1.0 - ig);
      dp[m + j] = dc * cell_prev[idx] * fg * (1.0 - fg);
      dp[2 * m + j] = dc * ig * (1.0 - cand * cand);
      dp[3 * m + j] = d_hidden[idx] * tc * og * (1.0 - og);
      g.cell_prev[idx] = dc * fg;
    }
  }
  return g;
}

Tensor primitive_forward(const OpSpec& op, std::span<const Tensor> operands) {
  switch (op.kind) {
    case OpKind::MatMul: {
      require_arity(op, operands, 2);
      const Tensor& a = operands[0];
      const Tensor& b = operands[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a, b);
      Tensor c({a.dim(0), b.dim(1)});
      kernels::matmul(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1));
      return c;
    }
    case OpKind::Add:
    case OpKind::Mul: {
      require_arity(op, operands, 2);
      const Tensor& a = operands[0];
      const Tensor& b = operands[1];
      if (a.shape() != b.shape()) shape_fail(op_name(op.kind), a, b);
      Tensor c(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) c[i] = op.kind == OpKind::Add ? a[i] + b[i] : a[i] * b[i];
      return c;
    }
    case OpKind::Sigmoid: require_arity(op, operands, 1); return sigmoid(operands[0]);
    case OpKind::Tanh: require_arity(op, operands, 1); return tanh(operands[0]);
    case OpKind::Relu: require_arity(op, operands, 1); return relu(operands[0]);
    case OpKind::SoftmaxMasked: require_arity(op, operands, 1); return softmax_masked(operands[0]);
    case OpKind::Concat: return concat(operands, op.axis);
    case OpKind::Slice: require_arity(op, operands, 1); return slice(operands[0], op.axis, op.begin, op.end);
  }
  throw std::logic_error("primitive_forward: unhandled op");
}

std::vector<Tensor> primitive_vjp(const OpSpec& op, std::span<const Tensor> operands,
                                  const Tensor& cotangent) {
  const Tensor out = primitive_forward(op, operands);
  if (out.shape() != cotangent.shape()) {
    throw ShapeError(std::string(op_name(op.kind)) + " vjp: cotangent shape " +
                     to_string(cotangent.shape()) + " does not match output shape " +
                     to_string(out.shape()));
  }
  switch (op.kind) {
    case OpKind::MatMul: {
      const Tensor& a = operands[0];
      const Tensor& b = operands[1];
      Tensor da(a.shape()), db(b.shape());
      kernels::matmul_a_bt(cotangent.ptr(), b.ptr(), da.ptr(), a.dim(0), b.dim(1), a.dim(1));
      kernels::matmul_at_b(a.ptr(), cotangent.ptr(), db.ptr(), a.dim(0), a.dim(1), b.dim(1));
      return {da, db};
    }
    case OpKind::Add: return {cotangent, cotangent};
    case OpKind::Mul: {
      Tensor da(cotangent.shape()), db(cotangent.shape());
      for (std::size_t i = 0; i < cotangent.size(); ++i) {
        da[i] = cotangent[i] * operands[1][i];
        db[i] = cotangent[i] * operands[0][i];
      }
      return {da, db};
    }
    case OpKind::Sigmoid: {
      Tensor d(cotangent.shape());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = cotangent[i] * out[i] * (1.0 - out[i]);
      return {d};
    }
    case OpKind::Tanh: {
      Tensor d(cotangent.shape());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = cotangent[i] * (1.0 - out[i] * out[i]);
      return {d};
    }
    case OpKind::Relu: {
      Tensor d(cotangent.shape());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = operands[0][i] > 0 ? cotangent[i] : 0.0;
      return {d};
    }
    case OpKind::SoftmaxMasked: return {softmax_masked_vjp(out, cotangent)};
    case OpKind::Concat: {
      std::vector<Tensor> grads;
      std::size_t offset = 0;
      for (const Tensor& p : operands) {
        grads.push_back(slice(cotangent, op.axis, offset, offset + p.dim(op.axis)));
        offset += p.dim(op.axis);
      }
      return grads;
    }
    case OpKind::Slice: {
      Tensor d(operands[0].shape());
      slice_assign_add(d, op.axis, op.begin, cotangent);
      return {d};
    }
  }
  throw std::logic_error("primitive_vjp: unhandled op");
}

}  // namespace deq
