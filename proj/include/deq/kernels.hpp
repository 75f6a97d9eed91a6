#pragma once

#include <cstddef>

// Raw dense kernels on row-major buffers. The parallel versions split work
// over output rows only, so every output element is accumulated in the same
// order as in the serial reference and results are bitwise identical.
namespace deq::kernels {

/// C(M×N) = A(M×K) · B(K×N)
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n);
/// C(K×N) = A(M×K)ᵀ · B(M×N)
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
/// C(M×K) = A(M×N) · B(K×N)ᵀ
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k);

/// Dilated causal convolution over a left-extended input.
/// ext: (batch, steps + (taps−1)·dilation, c_in), kernel: (taps, c_in, c_out),
/// out: (batch, steps, c_out). out[t] = Σ_j ext[t + j·dilation] · kernel[j].
void causal_conv1d(const double* ext, const double* kernel, double* out, std::size_t batch,
                   std::size_t steps, std::size_t c_in, std::size_t c_out, std::size_t taps,
                   std::size_t dilation);
/// Gradient w.r.t. the extended input (overwrites d_ext).
void causal_conv1d_grad_input(const double* d_out, const double* kernel, double* d_ext,
                              std::size_t batch, std::size_t steps, std::size_t c_in,
                              std::size_t c_out, std::size_t taps, std::size_t dilation);
/// Gradient w.r.t. the kernel (overwrites d_kernel).
void causal_conv1d_grad_kernel(const double* ext, const double* d_out, double* d_kernel,
                               std::size_t batch, std::size_t steps, std::size_t c_in,
                               std::size_t c_out, std::size_t taps, std::size_t dilation);

namespace reference {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n);
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k);
void causal_conv1d(const double* ext, const double* kernel, double* out, std::size_t batch,
                   std::size_t steps, std::size_t c_in, std::size_t c_out, std::size_t taps,
                   std::size_t dilation);
void causal_conv1d_grad_input(const double* d_out, const double* kernel, double* d_ext,
                              std::size_t batch, std::size_t steps, std::size_t c_in,
                              std::size_t c_out, std::size_t taps, std::size_t dilation);
void causal_conv1d_grad_kernel(const double* ext, const double* d_out, double* d_kernel,
                               std::size_t batch, std::size_t steps, std::size_t c_in,
                               std::size_t c_out, std::size_t taps, std::size_t dilation);

}  // namespace reference

}  // namespace deq::kernels
