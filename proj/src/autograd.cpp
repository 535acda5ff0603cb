#include "dystream/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "dystream/kernels.hpp"

namespace dystream {

// ---------------------------------------------------------------- ParamStore

Parameter& ParamStore::add(const std::string& name, std::vector<std::size_t> shape) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  const std::size_t n = shape_product(shape);
  params_.push_back(Parameter{name, Tensor(std::move(shape), std::vector<double>(n, 0.0)),
                              std::vector<double>(n, 0.0)});
  index_[name] = params_.size() - 1;
  return params_.back();
}

Parameter& ParamStore::add_normal(const std::string& name, std::size_t rows, std::size_t cols,
                                  double stddev, Rng& rng) {
  Parameter& p = add(name, {rows, cols});
  for (double& v : p.value.values) v = stddev * rng.normal();
  return p;
}

Parameter& ParamStore::add_constant(const std::string& name, std::size_t rows, std::size_t cols,
                                    double value) {
  Parameter& p = add(name, {rows, cols});
  std::fill(p.value.values.begin(), p.value.values.end(), value);
  return p;
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (auto& p : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

void ParamStore::copy_values_from(const ParamStore& other, const std::string& prefix) {
  for (auto& p : params_) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const Parameter& src = other.get(p.name);
    if (src.value.shape != p.value.shape)
      throw ShapeError("parameter " + p.name + " shape " + shape_string(src.value.shape) +
                       " vs " + shape_string(p.value.shape));
    p.value.values = src.value.values;
  }
}

void ParamStore::round_to_float() {
  for (auto& p : params_)
    for (double& v : p.value.values) v = static_cast<double>(static_cast<float>(v));
}

// ----------------------------------------------------------------------- Var

std::size_t Var::rows() const { return graph_->node(id_).rows; }
std::size_t Var::cols() const { return graph_->node(id_).cols; }
std::span<const double> Var::value() const { return graph_->node(id_).value; }
std::span<const double> Var::grad() const { return graph_->node(id_).grad; }

Tensor Var::tensor() const {
  const auto& n = graph_->node(id_);
  return Tensor({n.rows, n.cols}, n.value);
}

double Var::item() const {
  const auto& n = graph_->node(id_);
  if (n.value.size() != 1) throw ShapeError("item() on non-scalar");
  return n.value[0];
}

// --------------------------------------------------------------------- Graph

Var Graph::constant(const Tensor& t) { return constant(t.rows(), t.cols(), t.values); }

Var Graph::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (rows * cols != values.size()) throw ShapeError("constant shape mismatch");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.rows = p.value.rows();
  n.cols = p.value.cols();
  n.value = p.value.values;
  if (record_) {
    n.param = &p;
    n.needs_grad = true;
    n.grad.assign(n.value.size(), 0.0);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::emit(std::size_t rows, std::size_t cols, std::vector<double> value,
                std::initializer_list<Var> inputs,
                const std::function<std::function<void()>(int)>& make_backward) {
  return emit(rows, cols, std::move(value), std::vector<Var>(inputs), make_backward);
}

Var Graph::emit(std::size_t rows, std::size_t cols, std::vector<double> value,
                const std::vector<Var>& inputs,
                const std::function<std::function<void()>(int)>& make_backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  bool any = false;
  if (record_)
    for (const Var& v : inputs) any = any || node(v.id()).needs_grad;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  if (any) {
    Node& self = nodes_.back();
    self.needs_grad = true;
    self.grad.assign(self.value.size(), 0.0);
    self.backward = make_backward(id);
  }
  return Var(this, id);
}

void Graph::backward(Var loss) {
  if (loss.rows() * loss.cols() != 1) throw ShapeError("backward needs a scalar loss");
  if (!record_) throw std::logic_error("backward on a non-recording graph");
  Node& root = node(loss.id());
  if (!root.needs_grad) return;
  root.grad[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad) continue;
    if (n.backward) n.backward();
    if (n.param) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }
  }
}

// ------------------------------------------------------------------------ ops

namespace ag {
namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

// Adds `g` into input's gradient if it tracks one.
inline void accumulate(Graph& g, Var in, std::size_t i, double v) {
  auto& n = g.node(in.id());
  if (n.needs_grad) n.grad[i] += v;
}

inline bool tracks(Graph& g, Var v) { return g.node(v.id()).needs_grad; }

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul inner dimension mismatch");
  Graph& g = a.graph();
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m);
  kernels::matmul(a.value(), b.value(), out, n, k, m);
  return g.emit(n, m, std::move(out), {a, b}, [&g, a, b, n, k, m](int id) {
    return [&g, a, b, n, k, m, id] {
      const auto& dout = g.node(id).grad;
      if (tracks(g, a)) kernels::matmul_nt_acc(dout, g.node(b.id()).value, g.node(a.id()).grad, n, m, k);
      if (tracks(g, b)) kernels::matmul_tn_acc(g.node(a.id()).value, dout, g.node(b.id()).grad, n, k, m);
    };
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Graph& g = a.graph();
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [&g, a, b](int id) {
    return [&g, a, b, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t i = 0; i < d.size(); ++i) {
        accumulate(g, a, i, d[i]);
        accumulate(g, b, i, d[i]);
      }
    };
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Graph& g = a.graph();
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [&g, a, b](int id) {
    return [&g, a, b, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t i = 0; i < d.size(); ++i) {
        accumulate(g, a, i, d[i]);
        accumulate(g, b, i, -d[i]);
      }
    };
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Graph& g = a.graph();
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [&g, a, b](int id) {
    return [&g, a, b, id] {
      const auto& d = g.node(id).grad;
      const auto& av = g.node(a.id()).value;
      const auto& bv = g.node(b.id()).value;
      for (std::size_t i = 0; i < d.size(); ++i) {
        accumulate(g, a, i, d[i] * bv[i]);
        accumulate(g, b, i, d[i] * av[i]);
      }
    };
  });
}

Var scale(Var a, double s) {
  Graph& g = a.graph();
  std::vector<double> out(a.value().begin(), a.value().end());
  for (double& v : out) v *= s;
  return g.emit(a.rows(), a.cols(), std::move(out), {a}, [&g, a, s](int id) {
    return [&g, a, s, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t i = 0; i < d.size(); ++i) accumulate(g, a, i, d[i] * s);
    };
  });
}

Var add_scalar(Var a, double s) {
  Graph& g = a.graph();
  std::vector<double> out(a.value().begin(), a.value().end());
  for (double& v : out) v += s;
  return g.emit(a.rows(), a.cols(), std::move(out), {a}, [&g, a](int id) {
    return [&g, a, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t i = 0; i < d.size(); ++i) accumulate(g, a, i, d[i]);
    };
  });
}

Var add_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeError("add_row: row shape mismatch");
  Graph& g = x.graph();
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(x.value().begin(), x.value().end());
  auto rv = row.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += rv[c];
  return g.emit(n, m, std::move(out), {x, row}, [&g, x, row, n, m](int id) {
    return [&g, x, row, n, m, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) {
          accumulate(g, x, r * m + c, d[r * m + c]);
          accumulate(g, row, c, d[r * m + c]);
        }
    };
  });
}

Var broadcast_rows(Var row, std::size_t n) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows expects a single row");
  Graph& g = row.graph();
  const std::size_t m = row.cols();
  std::vector<double> out(n * m);
  auto rv = row.value();
  for (std::size_t r = 0; r < n; ++r) std::copy(rv.begin(), rv.end(), out.begin() + r * m);
  return g.emit(n, m, std::move(out), {row}, [&g, row, n, m](int id) {
    return [&g, row, n, m, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) accumulate(g, row, c, d[r * m + c]);
    };
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var layer_norm(Var x, std::optional<Var> gain, std::optional<Var> bias, double eps) {
  Graph& g = x.graph();
  const std::size_t n = x.rows(), m = x.cols();
  if (gain && (gain->rows() != 1 || gain->cols() != m)) throw ShapeError("layer_norm gain shape");
  if (bias && (bias->rows() != 1 || bias->cols() != m)) throw ShapeError("layer_norm bias shape");
  std::vector<double> out(n * m), normalized(n * m), rstd(n);
  std::span<const double> gs = gain ? gain->value() : std::span<const double>{};
  std::span<const double> bs = bias ? bias->value() : std::span<const double>{};
  kernels::layer_norm_forward(x.value(), n, m, eps, gs, bs, out, normalized, rstd);
  std::vector<Var> inputs{x};
  if (gain) inputs.push_back(*gain);
  if (bias) inputs.push_back(*bias);
  return g.emit(n, m, std::move(out), inputs,
                [&g, x, gain, bias, n, m, normalized = std::move(normalized),
                 rstd = std::move(rstd)](int id) mutable {
                  return [&g, x, gain, bias, n, m, normalized = std::move(normalized),
                          rstd = std::move(rstd), id] {
                    const auto& d = g.node(id).grad;
                    std::vector<double> dx(n * m, 0.0);
                    std::vector<double> dgain(gain ? m : 0, 0.0), dbias(bias ? m : 0, 0.0);
                    std::span<const double> gs =
                        gain ? std::span<const double>(g.node(gain->id()).value) : std::span<const double>{};
                    kernels::layer_norm_backward(normalized, rstd, n, m, gs, d, dx, dgain, dbias);
                    for (std::size_t i = 0; i < dx.size(); ++i) accumulate(g, x, i, dx[i]);
                    if (gain)
                      for (std::size_t c = 0; c < m; ++c) accumulate(g, *gain, c, dgain[c]);
                    if (bias)
                      for (std::size_t c = 0; c < m; ++c) accumulate(g, *bias, c, dbias[c]);
                  };
                });
}

Var gelu(Var x) {
  // tanh approximation
  Graph& g = x.graph();
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = k * (xv[i] + 0.044715 * xv[i] * xv[i] * xv[i]);
    out[i] = 0.5 * xv[i] * (1.0 + std::tanh(u));
  }
  return g.emit(x.rows(), x.cols(), std::move(out), {x}, [&g, x](int id) {
    return [&g, x, id] {
      const auto& d = g.node(id).grad;
      const auto& xv = g.node(x.id()).value;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double a = xv[i];
        const double u = k * (a + 0.044715 * a * a * a);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * a * a);
        accumulate(g, x, i, d[i] * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du));
      }
    };
  });
}

Var silu(Var x) {
  Graph& g = x.graph();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  return g.emit(x.rows(), x.cols(), std::move(out), {x}, [&g, x](int id) {
    return [&g, x, id] {
      const auto& d = g.node(id).grad;
      const auto& xv = g.node(x.id()).value;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xv[i]));
        accumulate(g, x, i, d[i] * (s + xv[i] * s * (1.0 - s)));
      }
    };
  });
}

Var attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads) {
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows())
    throw ShapeError("attention: q/k/v dimension mismatch");
  Graph& g = q.graph();
  const kernels::AttentionDims dims{q.rows(), k.rows(), q.cols(), heads};
  std::vector<double> out(dims.queries * dims.dim);
  std::vector<double> probs(heads * dims.queries * dims.keys);
  kernels::attention_forward(q.value(), k.value(), v.value(), mask, dims, out, probs);
  return g.emit(dims.queries, dims.dim, std::move(out), {q, k, v},
                [&g, q, k, v, mask, dims, probs = std::move(probs)](int id) mutable {
                  return [&g, q, k, v, mask, dims, probs = std::move(probs), id] {
                    auto& qn = g.node(q.id());
                    auto& kn = g.node(k.id());
                    auto& vn = g.node(v.id());
                    std::vector<double> dq(qn.value.size(), 0.0), dk(kn.value.size(), 0.0),
                        dv(vn.value.size(), 0.0);
                    kernels::attention_backward(qn.value, kn.value, vn.value, mask, dims, probs,
                                                g.node(id).grad, dq, dk, dv);
                    for (std::size_t i = 0; i < dq.size(); ++i) accumulate(g, q, i, dq[i]);
                    for (std::size_t i = 0; i < dk.size(); ++i) accumulate(g, k, i, dk[i]);
                    for (std::size_t i = 0; i < dv.size(); ++i) accumulate(g, v, i, dv[i]);
                  };
                });
}

Var rope(Var x, std::span<const double> positions, double base, std::size_t head_dim) {
  Graph& g = x.graph();
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  kernels::rope(x.value(), n, m, head_dim, positions, base, out);
  std::vector<double> pos(positions.begin(), positions.end());
  return g.emit(n, m, std::move(out), {x}, [&g, x, n, m, head_dim, base, pos = std::move(pos)](int id) mutable {
    return [&g, x, n, m, head_dim, base, pos = std::move(pos), id] {
      std::vector<double> dx(n * m);
      kernels::rope(g.node(id).grad, n, m, head_dim, pos, base, dx, /*inverse=*/true);
      for (std::size_t i = 0; i < dx.size(); ++i) accumulate(g, x, i, dx[i]);
    };
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Graph& g = parts.front().graph();
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  std::vector<double> out;
  for (const Var& p : parts) {
    if (p.cols() != m) throw ShapeError("concat_rows: column mismatch");
    n += p.rows();
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  return g.emit(n, m, std::move(out), parts, [&g, parts](int id) {
    return [&g, parts, id] {
      const auto& d = g.node(id).grad;
      std::size_t off = 0;
      for (const Var& p : parts) {
        const std::size_t cnt = p.rows() * p.cols();
        for (std::size_t i = 0; i < cnt; ++i) accumulate(g, p, i, d[off + i]);
        off += cnt;
      }
    };
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Graph& g = parts.front().graph();
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row mismatch");
    m += p.cols();
  }
  std::vector<double> out(n * m);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    auto pv = p.value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out[r * m + c0 + c] = pv[r * p.cols() + c];
    c0 += p.cols();
  }
  return g.emit(n, m, std::move(out), parts, [&g, parts, n, m](int id) {
    return [&g, parts, n, m, id] {
      const auto& d = g.node(id).grad;
      std::size_t c0 = 0;
      for (const Var& p : parts) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < p.cols(); ++c)
            accumulate(g, p, r * p.cols() + c, d[r * m + c0 + c]);
        c0 += p.cols();
      }
    };
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.rows()) throw ShapeError("slice_rows out of range");
  Graph& g = x.graph();
  const std::size_t m = x.cols();
  std::vector<double> out(x.value().begin() + begin * m, x.value().begin() + end * m);
  return g.emit(end - begin, m, std::move(out), {x}, [&g, x, begin, m](int id) {
    return [&g, x, begin, m, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t i = 0; i < d.size(); ++i) accumulate(g, x, begin * m + i, d[i]);
    };
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.cols()) throw ShapeError("slice_cols out of range");
  Graph& g = x.graph();
  const std::size_t n = x.rows(), m = x.cols(), w = end - begin;
  std::vector<double> out(n * w);
  auto xv = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * m + begin + c];
  return g.emit(n, w, std::move(out), {x}, [&g, x, begin, n, m, w](int id) {
    return [&g, x, begin, n, m, w, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) accumulate(g, x, r * m + begin + c, d[r * w + c]);
    };
  });
}

Var interp_rows(Var x, const std::vector<InterpTap>& taps) {
  Graph& g = x.graph();
  const std::size_t m = x.cols();
  std::vector<double> out(taps.size() * m);
  auto xv = x.value();
  for (std::size_t r = 0; r < taps.size(); ++r) {
    const auto& t = taps[r];
    if (t.lo >= x.rows() || t.hi >= x.rows()) throw ShapeError("interp_rows index out of range");
    for (std::size_t c = 0; c < m; ++c) {
      // exact copy when the weight vanishes, so aligned grids pass values through untouched
      out[r * m + c] = t.weight_hi == 0.0 ? xv[t.lo * m + c]
                                          : (1.0 - t.weight_hi) * xv[t.lo * m + c] +
                                                t.weight_hi * xv[t.hi * m + c];
    }
  }
  return g.emit(taps.size(), m, std::move(out), {x}, [&g, x, taps, m](int id) {
    return [&g, x, taps, m, id] {
      const auto& d = g.node(id).grad;
      for (std::size_t r = 0; r < taps.size(); ++r) {
        const auto& t = taps[r];
        for (std::size_t c = 0; c < m; ++c) {
          if (t.weight_hi == 0.0) {
            accumulate(g, x, t.lo * m + c, d[r * m + c]);
          } else {
            accumulate(g, x, t.lo * m + c, (1.0 - t.weight_hi) * d[r * m + c]);
            accumulate(g, x, t.hi * m + c, t.weight_hi * d[r * m + c]);
          }
        }
      }
    };
  });
}

Var sum(Var x) {
  Graph& g = x.graph();
  double s = 0.0;
  for (double v : x.value()) s += v;
  return g.emit(1, 1, {s}, {x}, [&g, x](int id) {
    return [&g, x, id] {
      const double d = g.node(id).grad[0];
      const std::size_t cnt = x.rows() * x.cols();
      for (std::size_t i = 0; i < cnt; ++i) accumulate(g, x, i, d);
    };
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.rows() * x.cols())); }

Var mse(Var a, Var b) {
  require_same_shape(a, b, "mse");
  Graph& g = a.graph();
  auto av = a.value();
  auto bv = b.value();
  const double inv = 1.0 / static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return g.emit(1, 1, {s * inv}, {a, b}, [&g, a, b, inv](int id) {
    return [&g, a, b, inv, id] {
      const double d = g.node(id).grad[0];
      const auto& av = g.node(a.id()).value;
      const auto& bv = g.node(b.id()).value;
      for (std::size_t i = 0; i < av.size(); ++i) {
        const double r = 2.0 * inv * (av[i] - bv[i]) * d;
        accumulate(g, a, i, r);
        accumulate(g, b, i, -r);
      }
    };
  });
}

}  // namespace ag
}  // namespace dystream
