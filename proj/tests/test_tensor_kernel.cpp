#include <cmath>
#include <numbers>

#include "doctest.h"
#include "dystream/autograd.hpp"
#include "dystream/kernels.hpp"
#include "dystream/nn.hpp"
#include "support.hpp"

using namespace dystream;
using dystream::test::random_tensor;

namespace {

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, std::size_t heads) {
  Graph g(false);
  return ag::attention(g.constant(q), g.constant(k), g.constant(v), mask, heads).tensor();
}

AttentionMask random_mask(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<unsigned char> allowed(rows * cols);
  for (auto& a : allowed) a = rng.bernoulli(0.5);
  for (std::size_t i = 0; i < rows; ++i) allowed[i * cols + rng.below(cols)] = 1;
  return AttentionMask(rows, cols, allowed);
}

}  // namespace

TEST_CASE("tensor shape invariant") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(shape_product(t.shape) == t.numel());
  CHECK(t.slice_rows(1, 2).shape == std::vector<std::size_t>{1, 3});
}

TEST_CASE("attention: single allowed key returns its value") {
  Tensor q = Tensor::from_rows({{0.3}}), k = Tensor::from_rows({{-1.2}}), v = Tensor::from_rows({{2.0}});
  CHECK(attend(q, k, v, AttentionMask::lookahead(1, 0), 1).values == std::vector<double>{2.0});
}

TEST_CASE("attention: equal logits average the values") {
  // Zero queries make every score 0, so softmax weights are exactly 1/3.
  Tensor q = Tensor::zeros(3, 2);
  Rng rng(1);
  Tensor k = random_tensor(3, 2, rng);
  Tensor v = Tensor::from_rows({{1.0, -2.0}, {4.0, 0.5}, {-2.0, 3.0}});
  Tensor out = attend(q, k, v, AttentionMask::lookahead(3, std::nullopt), 1);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(out.at(r, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.at(r, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("attention: causal mask hides later keys bitwise") {
  Rng rng(2);
  const std::size_t n = 6, d = 8;
  Tensor q = random_tensor(n, d, rng), k = random_tensor(n, d, rng), v = random_tensor(n, d, rng);
  const auto mask = AttentionMask::causal(n);
  const Tensor base = attend(q, k, v, mask, 2);
  for (std::size_t j = 1; j < n; ++j) {
    Tensor k2 = k, v2 = v;
    for (std::size_t c = 0; c < d; ++c) {
      k2.at(j, c) += rng.normal();
      v2.at(j, c) = 100.0 * rng.normal();
    }
    const Tensor out = attend(q, k2, v2, mask, 2);
    for (std::size_t i = 0; i < j; ++i) CHECK(dystream::test::bitwise_equal(out.row(i), base.row(i)));
  }
}

TEST_CASE("attention never leaks through arbitrary masks") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(6), m = 2 + rng.below(6), d = 4;
    Tensor q = random_tensor(n, d, rng), k = random_tensor(m, d, rng), v = random_tensor(m, d, rng);
    const auto mask = random_mask(n, m, rng);
    const Tensor base = attend(q, k, v, mask, 2);
    Tensor k2 = k, v2 = v;
    // Randomize or zero every key that some query is denied.
    for (std::size_t j = 0; j < m; ++j) {
      bool denied_somewhere = false;
      for (std::size_t i = 0; i < n; ++i) denied_somewhere |= !mask.allowed(i, j);
      if (!denied_somewhere) continue;
      for (std::size_t c = 0; c < d; ++c) {
        k2.at(j, c) = trial % 2 ? 0.0 : 5.0 * rng.normal();
        v2.at(j, c) = trial % 2 ? 0.0 : 5.0 * rng.normal();
      }
    }
    const Tensor out = attend(q, k2, v2, mask, 2);
    for (std::size_t i = 0; i < n; ++i) {
      bool row_touches_changed = false;
      for (std::size_t j = 0; j < m; ++j) {
        bool denied_somewhere = false;
        for (std::size_t r = 0; r < n; ++r) denied_somewhere |= !mask.allowed(r, j);
        row_touches_changed |= mask.allowed(i, j) && denied_somewhere;
      }
      if (!row_touches_changed) CHECK(dystream::test::bitwise_equal(out.row(i), base.row(i)));
    }
  }
}

TEST_CASE("attention: disallowed keys receive exactly zero weight") {
  Rng rng(4);
  const std::size_t n = 5, d = 4;
  Tensor q = random_tensor(n, d, rng, 3.0), k = random_tensor(n, d, rng, 3.0), v = random_tensor(n, d, rng);
  const auto mask = AttentionMask::lookahead(n, 1);
  std::vector<double> out(n * d), probs(2 * n * n);
  kernels::AttentionDims dims{n, n, d, 2};
  kernels::serial::attention_forward(q.values, k.values, v.values, mask, dims, out, probs);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (!mask.allowed(i, j)) CHECK(probs[(h * n + i) * n + j] == 0.0);
}

TEST_CASE("attention errors") {
  Tensor a = Tensor::zeros(2, 4);
  CHECK_THROWS(attend(a, a, a, AttentionMask::causal(2), 3));           // dim not divisible by heads
  CHECK_THROWS(attend(a, a, a, AttentionMask::causal(3), 2));           // mask shape mismatch
  CHECK_THROWS(attend(a, a, a, AttentionMask(2, 2, {1, 0, 0, 0}), 2));  // fully masked row
}

TEST_CASE("serial and parallel kernels agree bitwise") {
  Rng rng(5);
  const std::size_t n = 67, k = 45, m = 53;
  Tensor a = random_tensor(n, k, rng), b = random_tensor(k, m, rng);
  std::vector<double> c1(n * m), c2(n * m);
  kernels::serial::matmul(a.values, b.values, c1, n, k, m);
  kernels::parallel::matmul(a.values, b.values, c2, n, k, m);
  CHECK(c1 == c2);

  Tensor g = random_tensor(n, m, rng);
  std::vector<double> t1(k * m, 0.0), t2(k * m, 0.0);
  kernels::serial::matmul_tn_acc(a.values, g.values, t1, n, k, m);
  kernels::parallel::matmul_tn_acc(a.values, g.values, t2, n, k, m);
  CHECK(t1 == t2);
  std::vector<double> u1(n * k, 0.0), u2(n * k, 0.0);
  kernels::serial::matmul_nt_acc(g.values, b.values, u1, n, m, k);
  kernels::parallel::matmul_nt_acc(g.values, b.values, u2, n, m, k);
  CHECK(u1 == u2);

  const std::size_t s = 40, d = 16;
  Tensor q = random_tensor(s, d, rng), kk = random_tensor(s, d, rng), v = random_tensor(s, d, rng);
  const auto mask = AttentionMask::banded(s, 2, 8);
  kernels::AttentionDims dims{s, s, d, 4};
  std::vector<double> o1(s * d), o2(s * d), p1(4 * s * s), p2(4 * s * s);
  kernels::serial::attention_forward(q.values, kk.values, v.values, mask, dims, o1, p1);
  kernels::parallel::attention_forward(q.values, kk.values, v.values, mask, dims, o2, p2);
  CHECK(o1 == o2);
  CHECK(p1 == p2);
  Tensor dout = random_tensor(s, d, rng);
  std::vector<double> dq1(s * d, 0.0), dk1(s * d, 0.0), dv1(s * d, 0.0);
  std::vector<double> dq2(s * d, 0.0), dk2(s * d, 0.0), dv2(s * d, 0.0);
  kernels::serial::attention_backward(q.values, kk.values, v.values, mask, dims, p1, dout.values, dq1, dk1, dv1);
  kernels::parallel::attention_backward(q.values, kk.values, v.values, mask, dims, p1, dout.values, dq2, dk2, dv2);
  CHECK(dq1 == dq2);
  CHECK(dk1 == dk2);
  CHECK(dv1 == dv2);
}

TEST_CASE("rope: position zero is the identity") {
  Rng rng(6);
  Tensor x = random_tensor(3, 8, rng);
  std::vector<double> pos(3, 0.0), out(x.numel());
  kernels::rope(x.values, 3, 8, 8, pos, 10000.0, out);
  CHECK(out == x.values);
}

TEST_CASE("rope: quarter turn maps (1, 0) to (0, 1)") {
  // The first pair rotates by exactly the position in radians.
  Tensor x = Tensor::from_rows({{1.0, 0.0}});
  std::vector<double> pos{std::numbers::pi / 2}, out(2);
  kernels::rope(x.values, 1, 2, 2, pos, 10000.0, out);
  CHECK(std::abs(out[0]) < 1e-12);
  CHECK(std::abs(out[1] - 1.0) < 1e-12);
}

TEST_CASE("rope preserves every pair norm and inverts") {
  Rng rng(7);
  const std::size_t rows = 10, cols = 16;
  Tensor x = random_tensor(rows, cols, rng, 4.0);
  std::vector<double> pos(rows), out(x.numel()), back(x.numel());
  for (std::size_t r = 0; r < rows; ++r) pos[r] = static_cast<double>(rng.below(500));
  kernels::rope(x.values, rows, cols, 8, pos, 10000.0, out);
  for (std::size_t i = 0; i < x.numel(); i += 2) {
    const double before = std::hypot(x.values[i], x.values[i + 1]);
    const double after = std::hypot(out[i], out[i + 1]);
    CHECK(std::abs(before - after) < 1e-10);
  }
  kernels::rope(out, rows, cols, 8, pos, 10000.0, back, true);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(back[i] - x.values[i]) < 1e-12);
}

TEST_CASE("rope rejects odd widths") {
  Graph g(false);
  std::vector<double> pos{0.0};
  CHECK_THROWS(ag::rope(g.constant(Tensor::zeros(1, 3)), pos, 10000.0, 3));
}

TEST_CASE("layer norm examples") {
  Graph g(false);
  const Tensor a = ag::layer_norm(g.constant(Tensor::from_rows({{1, 1, 1}})), std::nullopt, std::nullopt, 1e-5).tensor();
  CHECK(a.values == std::vector<double>{0.0, 0.0, 0.0});
  const Tensor b = ag::layer_norm(g.constant(Tensor::from_rows({{0, 2}})), std::nullopt, std::nullopt, 0.0).tensor();
  CHECK(b.values[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(b.values[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("layer norm is per timestep") {
  Rng rng(8);
  Tensor x = random_tensor(2, 6, rng);
  Graph g(false);
  const Tensor base = ag::layer_norm(g.constant(x), std::nullopt, std::nullopt, 1e-5).tensor();
  for (std::size_t c = 0; c < 6; ++c) x.at(1, c) = 50.0 * rng.normal();
  const Tensor changed = ag::layer_norm(g.constant(x), std::nullopt, std::nullopt, 1e-5).tensor();
  CHECK(dystream::test::bitwise_equal(base.row(0), changed.row(0)));
  // Normalized rows have zero mean and unit (biased) variance.
  double mean = 0.0, var = 0.0;
  for (double v : changed.row(1)) mean += v / 6.0;
  for (double v : changed.row(1)) var += (v - mean) * (v - mean) / 6.0;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("backward: sum gives ones, unused parameters get zero") {
  ParamStore store;
  Rng rng(9);
  Parameter& x = store.add_normal("x", 3, 4, 1.0, rng);
  Parameter& unused = store.add_normal("unused", 2, 2, 1.0, rng);
  store.zero_grad();
  Graph g;
  Var l = ag::sum(g.param(x));
  g.param(unused);
  g.backward(l);
  CHECK(x.grad == std::vector<double>(12, 1.0));
  CHECK(unused.grad == std::vector<double>(4, 0.0));
}

TEST_CASE("backward rejects non-scalar losses") {
  ParamStore store;
  Rng rng(10);
  Parameter& x = store.add_normal("x", 2, 2, 1.0, rng);
  Graph g;
  CHECK_THROWS(g.backward(g.param(x)));
}

TEST_CASE("gradient of ||W x - y||^2 matches central differences") {
  ParamStore store;
  Rng rng(11);
  Parameter& w = store.add_normal("W", 3, 3, 1.0, rng);
  const Tensor x = random_tensor(3, 1, rng), y = random_tensor(3, 1, rng);
  const auto loss = [&](Graph& g) {
    Var r = ag::sub(ag::matmul(g.param(w), g.constant(x)), g.constant(y));
    return ag::sum(ag::mul(r, r));
  };
  const auto res = dystream::test::check_gradients(store, loss);
  CHECK(res.checked == 9);
  CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  Rng rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    ParamStore store;
    const std::size_t n = 5, d = 8;
    Parameter& x = store.add_normal("x", n, d, 1.0, rng);
    Parameter& y = store.add_normal("y", n, d, 1.0, rng);
    Parameter& row = store.add_normal("row", 1, d, 1.0, rng);
    Parameter& gain = store.add_normal("gain", 1, d, 1.0, rng);
    Parameter& bias = store.add_normal("bias", 1, d, 1.0, rng);
    Parameter& w = store.add_normal("w", d, d, 0.5, rng);
    Parameter& wk = store.add_normal("wk", d, d, 0.5, rng);
    Parameter& target = store.add_normal("target", n + 1, 2 * d, 1.0, rng);
    std::vector<double> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<double>(i + 3);
    const std::vector<InterpTap> taps{{0, 1, 0.25}, {2, 2, 0.0}, {3, 4, 0.5}};
    const auto mask = AttentionMask::banded(n, 1, 2);
    const auto loss = [&](Graph& g) {
      Var a = g.param(x), b = g.param(y);
      Var h = ag::add_row(ag::mul(a, b), g.param(row));
      h = ag::layer_norm(h, g.param(gain), g.param(bias), 1e-5);
      h = ag::linear(h, g.param(w), g.param(row));
      Var q = ag::rope(ag::gelu(h), pos, 100.0, 4);
      Var k = ag::rope(ag::matmul(ag::silu(a), g.param(wk)), pos, 100.0, 4);
      Var att = ag::attention(q, k, ag::sub(b, ag::scale(h, 0.5)), mask, 2);
      Var wide = ag::concat_cols({att, ag::add_scalar(b, 0.1)});
      Var tall = ag::concat_rows({wide, ag::slice_rows(wide, 1, 2)});
      Var lhs = ag::add(tall, ag::broadcast_rows(ag::slice_rows(wide, 0, 1), n + 1));
      Var l1 = ag::mse(lhs, g.param(target));
      Var l2 = ag::mean(ag::interp_rows(ag::slice_cols(att, 2, 6), taps));
      return ag::add(l1, ag::scale(l2, 3.0));
    };
    const auto res = dystream::test::check_gradients(store, loss);
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
  }
}

TEST_CASE("identical seeds and op sequences give identical tensors") {
  const auto run = [] {
    Rng rng(99);
    ParamStore store;
    nn::TransformerBlock block(store, "b", 8, 2, 2, 10000.0, rng);
    Tensor x = random_tensor(6, 8, rng);
    std::vector<double> pos{0, 1, 2, 3, 4, 5};
    Graph g(false);
    return block(g, g.constant(x), AttentionMask::causal(6), pos).tensor();
  };
  CHECK(run() == run());
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  CHECK(a.counter() == b.counter());
  CHECK(Rng(5).split("x").next_u64() == Rng(5).split("x").next_u64());
  CHECK(Rng(5).split("x").next_u64() != Rng(5).split("y").next_u64());
}

TEST_CASE("mask constructors") {
  const auto m = AttentionMask::lookahead(4, 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(m.allowed(i, j) == (j <= i + 1));
  CHECK(AttentionMask::lookahead(3, std::nullopt).count_allowed() == 9);
  const auto c = AttentionMask::causal(5);
  CHECK(c.count_allowed() == 15);
  const auto band = AttentionMask::banded(6, 1, 2);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(band.allowed(i, j) == (j <= i + 1 && j + 2 >= i));
}
