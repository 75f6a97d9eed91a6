#include "deq/kernels.hpp"

#include <algorithm>
#include <cstdint>

namespace deq::kernels {

namespace {
using Index = std::int64_t;  // OpenMP loop counters must be signed
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
#pragma omp parallel for schedule(static)
  for (Index kk = 0; kk < static_cast<Index>(k); ++kk) {
    double* crow = c + kk * n;
    std::fill(crow, crow + n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const double* arow = a + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + kk] = s;
    }
  }
}

void causal_conv1d(const double* ext, const double* kernel, double* out, std::size_t batch,
                   std::size_t steps, std::size_t c_in, std::size_t c_out, std::size_t taps,
                   std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
#pragma omp parallel for schedule(static)
  for (Index nt = 0; nt < static_cast<Index>(batch * steps); ++nt) {
    const std::size_t nb = static_cast<std::size_t>(nt) / steps;
    const std::size_t t = static_cast<std::size_t>(nt) % steps;
    double* orow = out + static_cast<std::size_t>(nt) * c_out;
    std::fill(orow, orow + c_out, 0.0);
    for (std::size_t j = 0; j < taps; ++j) {
      const double* erow = ext + (nb * ext_steps + t + j * dilation) * c_in;
      const double* kj = kernel + j * c_in * c_out;
      for (std::size_t c = 0; c < c_in; ++c) {
        const double ev = erow[c];
        const double* krow = kj + c * c_out;
        for (std::size_t o = 0; o < c_out; ++o) orow[o] += ev * krow[o];
      }
    }
  }
}

void causal_conv1d_grad_input(const double* d_out, const double* kernel, double* d_ext,
                              std::size_t batch, std::size_t steps, std::size_t c_in,
                              std::size_t c_out, std::size_t taps, std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
#pragma omp parallel for schedule(static)
  for (Index ne = 0; ne < static_cast<Index>(batch * ext_steps); ++ne) {
    const std::size_t nb = static_cast<std::size_t>(ne) / ext_steps;
    const std::size_t tau = static_cast<std::size_t>(ne) % ext_steps;
    double* drow = d_ext + static_cast<std::size_t>(ne) * c_in;
    std::fill(drow, drow + c_in, 0.0);
    for (std::size_t j = 0; j < taps; ++j) {
      if (tau < j * dilation) break;
      const std::size_t t = tau - j * dilation;
      if (t >= steps) continue;
      const double* grow = d_out + (nb * steps + t) * c_out;
      const double* kj = kernel + j * c_in * c_out;
      for (std::size_t c = 0; c < c_in; ++c) {
        const double* krow = kj + c * c_out;
        double s = 0.0;
        for (std::size_t o = 0; o < c_out; ++o) s += grow[o] * krow[o];
        drow[c] += s;
      }
    }
  }
}

void causal_conv1d_grad_kernel(const double* ext, const double* d_out, double* d_kernel,
                               std::size_t batch, std::size_t steps, std::size_t c_in,
                               std::size_t c_out, std::size_t taps, std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
#pragma omp parallel for schedule(static)
  for (Index jc = 0; jc < static_cast<Index>(taps * c_in); ++jc) {
    const std::size_t j = static_cast<std::size_t>(jc) / c_in;
    const std::size_t c = static_cast<std::size_t>(jc) % c_in;
    double* krow = d_kernel + static_cast<std::size_t>(jc) * c_out;
    std::fill(krow, krow + c_out, 0.0);
    for (std::size_t nb = 0; nb < batch; ++nb) {
      for (std::size_t t = 0; t < steps; ++t) {
        const double ev = ext[(nb * ext_steps + t + j * dilation) * c_in + c];
        if (ev == 0.0) continue;
        const double* grow = d_out + (nb * steps + t) * c_out;
        for (std::size_t o = 0; o < c_out; ++o) krow[o] += ev * grow[o];
      }
    }
  }
}

namespace reference {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + kk] * b[i * n + j];
      c[kk * n + j] = s;
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[kk * n + j];
      c[i * k + kk] = s;
    }
  }
}

void causal_conv1d(const double* ext, const double* kernel, double* out, std::size_t batch,
                   std::size_t steps, std::size_t c_in, std::size_t c_out, std::size_t taps,
                   std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
  for (std::size_t nb = 0; nb < batch; ++nb) {
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t o = 0; o < c_out; ++o) {
        double s = 0.0;
        for (std::size_t j = 0; j < taps; ++j) {
          for (std::size_t c = 0; c < c_in; ++c) {
            s += ext[(nb * ext_steps + t + j * dilation) * c_in + c] *
                 kernel[(j * c_in + c) * c_out + o];
          }
        }
        out[(nb * steps + t) * c_out + o] = s;
      }
    }
  }
}

// Scatter form: each output gradient is pushed back onto every input frame it read.
void causal_conv1d_grad_input(const double* d_out, const double* kernel, double* d_ext,
                              std::size_t batch, std::size_t steps, std::size_t c_in,
                              std::size_t c_out, std::size_t taps, std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
  std::fill(d_ext, d_ext + batch * ext_steps * c_in, 0.0);
  for (std::size_t nb = 0; nb < batch; ++nb) {
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t j = 0; j < taps; ++j) {
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t o = 0; o < c_out; ++o) {
            d_ext[(nb * ext_steps + t + j * dilation) * c_in + c] +=
                d_out[(nb * steps + t) * c_out + o] * kernel[(j * c_in + c) * c_out + o];
          }
        }
      }
    }
  }
}

void causal_conv1d_grad_kernel(const double* ext, const double* d_out, double* d_kernel,
                               std::size_t batch, std::size_t steps, std::size_t c_in,
                               std::size_t c_out, std::size_t taps, std::size_t dilation) {
  const std::size_t ext_steps = steps + (taps - 1) * dilation;
  for (std::size_t j = 0; j < taps; ++j) {
    for (std::size_t c = 0; c < c_in; ++c) {
      for (std::size_t o = 0; o < c_out; ++o) {
        double s = 0.0;
        for (std::size_t nb = 0; nb < batch; ++nb) {
          for (std::size_t t = 0; t < steps; ++t) {
            s += ext[(nb * ext_steps + t + j * dilation) * c_in + c] *
                 d_out[(nb * steps + t) * c_out + o];
          }
        }
        d_kernel[(j * c_in + c) * c_out + o] = s;
      }
    }
  }
}

}  // namespace reference

}  // namespace deq::kernels
