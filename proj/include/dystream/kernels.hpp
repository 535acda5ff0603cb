#pragma once

// Dense numeric kernels in two flavours: `serial` is the reference, `parallel`
// splits the outer loop across OpenMP threads. Every output element is
// accumulated in the same order in both, so results agree bitwise. The
// unqualified functions pick one based on problem size and thread count.

#include <cstddef>
#include <span>

#include "dystream/tensor.hpp"

namespace dystream::kernels {

struct AttentionDims {
  std::size_t queries;
  std::size_t keys;
  std::size_t dim;  // model dimension, split evenly across heads
  std::size_t heads;
  std::size_t head_dim() const { return dim / heads; }
};

namespace serial {
// c = a(n x k) * b(k x m)
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
// c(k x m) += a(n x k)^T * b(n x m)
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);
// c(n x k) += a(n x m) * b(k x m)^T
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k);
// probs is heads x queries x keys; disallowed entries are written as exact zeros.
void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs);
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv);
}  // namespace serial

namespace parallel {
// c = a(n x k) * b(k x m)
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
// c(k x m) += a(n x k)^T * b(n x m)
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);
// c(n x k) += a(n x m) * b(k x m)^T
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k);
// probs is heads x queries x keys; disallowed entries are written as exact zeros.
void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs);
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv);
}  // namespace parallel

// c = a(n x k) * b(k x m)
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
// c(k x m) += a(n x k)^T * b(n x m)
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);
// c(n x k) += a(n x m) * b(k x m)^T
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k);
// probs is heads x queries x keys; disallowed entries are written as exact zeros.
void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs);
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv);

// Per-row normalization over the last axis. gain/bias may be empty (no affine).
// normalized receives (x - mean) * rstd before the affine transform.
void layer_norm_forward(std::span<const double> x, std::size_t rows, std::size_t cols, double eps,
                        std::span<const double> gain, std::span<const double> bias,
                        std::span<double> y, std::span<double> normalized, std::span<double> rstd);
void layer_norm_backward(std::span<const double> normalized, std::span<const double> rstd,
                         std::size_t rows, std::size_t cols, std::span<const double> gain,
                         std::span<const double> dy, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias);

// Rotates consecutive feature pairs inside each head_dim chunk by
// position * base^(-2p / head_dim). inverse=true applies the transpose.
void rope(std::span<const double> x, std::size_t rows, std::size_t cols, std::size_t head_dim,
          std::span<const double> positions, double base, std::span<double> out,
          bool inverse = false);

// Worker cap from DYSTREAM_THREADS (if set); returns the effective count.
int configure_threads_from_env();
int max_threads();

}  // namespace dystream::kernels
