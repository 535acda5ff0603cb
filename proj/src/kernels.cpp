#include "dystream/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

namespace dystream::kernels {
namespace {

// Row-level bodies shared by the serial and parallel drivers. Each writes a
// disjoint slice of the output, so the drivers differ only in scheduling.

inline void matmul_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                       std::size_t m) {
  double* crow = c + i * m;
  std::fill(crow, crow + m, 0.0);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double aik = a[i * k + kk];
    const double* brow = b + kk * m;
    for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c, std::size_t p,
                          std::size_t n, std::size_t k, std::size_t m) {
  double* crow = c + p * m;
  for (std::size_t i = 0; i < n; ++i) {
    const double aip = a[i * k + p];
    const double* brow = b + i * m;
    for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c, std::size_t i,
                          std::size_t m, std::size_t k) {
  const double* arow = a + i * m;
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * m;
    double dot = 0.0;
    for (std::size_t j = 0; j < m; ++j) dot += arow[j] * brow[j];
    c[i * k + kk] += dot;
  }
}

void attention_head_forward(const double* q, const double* k, const double* v,
                            const AttentionMask& mask, const AttentionDims& d, double* out,
                            double* probs, std::size_t h) {
  const std::size_t hd = d.head_dim();
  const std::size_t off = h * hd;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t i = 0; i < d.queries; ++i) {
    double* p = probs + (h * d.queries + i) * d.keys;
    const double* qi = q + i * d.dim + off;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d.keys; ++j) {
      if (!mask.allowed(i, j)) {
        p[j] = 0.0;
        continue;
      }
      const double* kj = k + j * d.dim + off;
      double s = 0.0;
      for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < d.keys; ++j) {
      if (!mask.allowed(i, j)) continue;
      p[j] = std::exp(p[j] - mx);
      total += p[j];
    }
    double* oi = out + i * d.dim + off;
    std::fill(oi, oi + hd, 0.0);
    for (std::size_t j = 0; j < d.keys; ++j) {
      if (!mask.allowed(i, j)) continue;
      p[j] /= total;
      const double* vj = v + j * d.dim + off;
      for (std::size_t e = 0; e < hd; ++e) oi[e] += p[j] * vj[e];
    }
  }
}

void attention_head_backward(const double* q, const double* k, const double* v,
                             const AttentionMask& mask, const AttentionDims& d,
                             const double* probs, const double* dout, double* dq, double* dk,
                             double* dv, std::size_t h) {
  const std::size_t hd = d.head_dim();
  const std::size_t off = h * hd;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> dp(d.keys);
  for (std::size_t i = 0; i < d.queries; ++i) {
    const double* p = probs + (h * d.queries + i) * d.keys;
    const double* doi = dout + i * d.dim + off;
    const double* qi = q + i * d.dim + off;
    double weighted = 0.0;
    for (std::size_t j = 0; j < d.keys; ++j) {
      if (!mask.allowed(i, j)) continue;
      const double* vj = v + j * d.dim + off;
      double s = 0.0;
      for (std::size_t e = 0; e < hd; ++e) s += doi[e] * vj[e];
      dp[j] = s;
      weighted += p[j] * s;
    }
    double* dqi = dq + i * d.dim + off;
    for (std::size_t j = 0; j < d.keys; ++j) {
      if (!mask.allowed(i, j)) continue;
      const double ds = p[j] * (dp[j] - weighted) * scale;
      const double* kj = k + j * d.dim + off;
      double* dkj = dk + j * d.dim + off;
      double* dvj = dv + j * d.dim + off;
      for (std::size_t e = 0; e < hd; ++e) {
        dqi[e] += ds * kj[e];
        dkj[e] += ds * qi[e];
        dvj[e] += p[j] * doi[e];
      }
    }
  }
}

void check_attention(const AttentionMask& mask, const AttentionDims& d) {
  if (d.heads == 0 || d.dim % d.heads != 0)
    throw ShapeError("model dimension " + std::to_string(d.dim) + " not divisible by " +
                     std::to_string(d.heads) + " heads");
  if (mask.rows() != d.queries || mask.cols() != d.keys)
    throw ShapeError("attention mask is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " but sequence is " +
                     std::to_string(d.queries) + "x" + std::to_string(d.keys));
  mask.require_nonempty_rows();
}

bool worth_parallel(std::size_t work) {
  return omp_get_max_threads() > 1 && work >= (std::size_t{1} << 16);
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) matmul_row(a.data(), b.data(), c.data(), i, k, m);
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) matmul_tn_row(a.data(), b.data(), c.data(), p, n, k, m);
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) matmul_nt_row(a.data(), b.data(), c.data(), i, m, k);
}

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs) {
  check_attention(mask, dims);
  for (std::size_t h = 0; h < dims.heads; ++h)
    attention_head_forward(q.data(), k.data(), v.data(), mask, dims, out.data(), probs.data(), h);
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  for (std::size_t h = 0; h < dims.heads; ++h)
    attention_head_backward(q.data(), k.data(), v.data(), mask, dims, probs.data(), dout.data(),
                            dq.data(), dk.data(), dv.data(), h);
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) matmul_row(a.data(), b.data(), c.data(), i, k, m);
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < k; ++p) matmul_tn_row(a.data(), b.data(), c.data(), p, n, k, m);
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) matmul_nt_row(a.data(), b.data(), c.data(), i, m, k);
}

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs) {
  check_attention(mask, dims);
#pragma omp parallel for schedule(static)
  for (std::size_t h = 0; h < dims.heads; ++h)
    attention_head_forward(q.data(), k.data(), v.data(), mask, dims, out.data(), probs.data(), h);
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
#pragma omp parallel for schedule(static)
  for (std::size_t h = 0; h < dims.heads; ++h)
    attention_head_backward(q.data(), k.data(), v.data(), mask, dims, probs.data(), dout.data(),
                            dq.data(), dk.data(), dv.data(), h);
}

}  // namespace parallel

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
  if (worth_parallel(n * k * m) && n > 1) return parallel::matmul(a, b, c, n, k, m);
  serial::matmul(a, b, c, n, k, m);
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  if (worth_parallel(n * k * m) && k > 1) return parallel::matmul_tn_acc(a, b, c, n, k, m);
  serial::matmul_tn_acc(a, b, c, n, k, m);
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t m, std::size_t k) {
  if (worth_parallel(n * k * m) && n > 1) return parallel::matmul_nt_acc(a, b, c, n, m, k);
  serial::matmul_nt_acc(a, b, c, n, m, k);
}

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionDims& dims, std::span<double> out, std::span<double> probs) {
  if (worth_parallel(dims.queries * dims.keys * dims.dim) && dims.heads > 1)
    return parallel::attention_forward(q, k, v, mask, dims, out, probs);
  serial::attention_forward(q, k, v, mask, dims, out, probs);
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, const AttentionMask& mask,
                        const AttentionDims& dims, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  if (worth_parallel(dims.queries * dims.keys * dims.dim) && dims.heads > 1)
    return parallel::attention_backward(q, k, v, mask, dims, probs, dout, dq, dk, dv);
  serial::attention_backward(q, k, v, mask, dims, probs, dout, dq, dk, dv);
}

void layer_norm_forward(std::span<const double> x, std::size_t rows, std::size_t cols, double eps,
                        std::span<const double> gain, std::span<const double> bias,
                        std::span<double> y, std::span<double> normalized, std::span<double> rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double nh = (xr[c] - mean) * rs;
      normalized[r * cols + c] = nh;
      double out = nh;
      if (!gain.empty()) out *= gain[c];
      if (!bias.empty()) out += bias[c];
      y[r * cols + c] = out;
    }
  }
}

void layer_norm_backward(std::span<const double> normalized, std::span<const double> rstd,
                         std::size_t rows, std::size_t cols, std::span<const double> gain,
                         std::span<const double> dy, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias) {
  std::vector<double> g(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* nr = normalized.data() + r * cols;
    const double* dyr = dy.data() + r * cols;
    double mean_g = 0.0, mean_gn = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      g[c] = gain.empty() ? dyr[c] : dyr[c] * gain[c];
      mean_g += g[c];
      mean_gn += g[c] * nr[c];
      if (!dgain.empty()) dgain[c] += dyr[c] * nr[c];
      if (!dbias.empty()) dbias[c] += dyr[c];
    }
    mean_g /= static_cast<double>(cols);
    mean_gn /= static_cast<double>(cols);
    for (std::size_t c = 0; c < cols; ++c)
      dx[r * cols + c] += rstd[r] * (g[c] - mean_g - nr[c] * mean_gn);
  }
}

void rope(std::span<const double> x, std::size_t rows, std::size_t cols, std::size_t head_dim,
          std::span<const double> positions, double base, std::span<double> out, bool inverse) {
  if (head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0)
    throw ShapeError("rotary embedding needs an even head dimension dividing the feature size");
  if (positions.size() != rows) throw ShapeError("one position per row required");
  const std::size_t pairs = head_dim / 2;
  std::vector<double> inv_freq(pairs);
  for (std::size_t p = 0; p < pairs; ++p)
    inv_freq[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
  for (std::size_t r = 0; r < rows; ++r) {
    if (positions[r] < 0.0) throw std::invalid_argument("negative rotary position");
    for (std::size_t p = 0; p < pairs; ++p) {
      const double angle = positions[r] * inv_freq[p];
      const double cs = std::cos(angle);
      const double sn = inverse ? -std::sin(angle) : std::sin(angle);
      for (std::size_t h0 = 0; h0 < cols; h0 += head_dim) {
        const std::size_t i0 = r * cols + h0 + 2 * p;
        const double a = x[i0], b = x[i0 + 1];
        out[i0] = a * cs - b * sn;
        out[i0 + 1] = a * sn + b * cs;
      }
    }
  }
}

int configure_threads_from_env() {
  if (const char* env = std::getenv("DYSTREAM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  return omp_get_max_threads();
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace dystream::kernels
