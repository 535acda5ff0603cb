#include "dystream/nn.hpp"

#include <cmath>

namespace dystream::nn {

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in_, std::size_t out_,
               Rng& rng, double gain, bool zero_init)
    : in(in_), out(out_) {
  if (zero_init) {
    weight = &store.add(name + ".w", {in, out});
  } else {
    weight = &store.add_normal(name + ".w", in, out, gain / std::sqrt(static_cast<double>(in)), rng);
  }
  bias = &store.add(name + ".b", {1, out});
}

Var Linear::operator()(Graph& g, Var x) const {
  return ag::linear(x, g.param(*weight), g.param(*bias));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
  gain = &store.add_constant(name + ".g", 1, dim, 1.0);
  bias = &store.add(name + ".b", {1, dim});
}

Var LayerNorm::operator()(Graph& g, Var x) const {
  return ag::layer_norm(x, g.param(*gain), g.param(*bias), eps);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim,
                                   std::size_t heads_, std::size_t mlp_ratio, double rope_base_,
                                   Rng& rng)
    : ln_attn(store, name + ".ln1", dim),
      q(store, name + ".q", dim, dim, rng),
      k(store, name + ".k", dim, dim, rng),
      v(store, name + ".v", dim, dim, rng),
      o(store, name + ".o", dim, dim, rng, 0.5),
      ln_mlp(store, name + ".ln2", dim),
      fc1(store, name + ".fc1", dim, dim * mlp_ratio, rng),
      fc2(store, name + ".fc2", dim * mlp_ratio, dim, rng, 0.5),
      heads(heads_),
      rope_base(rope_base_) {
  if (dim % heads != 0) throw ShapeError(name + ": dim not divisible by heads");
}

Var TransformerBlock::operator()(Graph& g, Var x, const AttentionMask& mask,
                                 std::span<const double> positions) const {
  const std::size_t head_dim = x.cols() / heads;
  Var h = ln_attn(g, x);
  Var qh = ag::rope(q(g, h), positions, rope_base, head_dim);
  Var kh = ag::rope(k(g, h), positions, rope_base, head_dim);
  Var attn = ag::attention(qh, kh, v(g, h), mask, heads);
  x = ag::add(x, o(g, attn));
  Var m = fc2(g, ag::gelu(fc1(g, ln_mlp(g, x))));
  return ag::add(x, m);
}

double AdamW::step(ParamStore& store) {
  ++t_;
  double sq = 0.0;
  for (const Parameter* p : store.all())
    for (double gr : p->grad) sq += gr * gr;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : store.all()) {
    auto& [m, v] = moments_[p->name];
    if (m.empty()) {
      m.assign(p->grad.size(), 0.0);
      v.assign(p->grad.size(), 0.0);
    }
    const bool decay = p->value.rows() > 1;
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      const double gr = p->grad[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gr;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gr * gr;
      double& w = p->value.values[i];
      if (decay) w -= cfg_.lr * cfg_.weight_decay * w;
      w -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
  store.zero_grad();
  return norm;
}

}  // namespace dystream::nn
