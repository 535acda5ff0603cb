#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dystream/autograd.hpp"

namespace dystream::nn {

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out
  std::size_t in = 0;
  std::size_t out = 0;

  Linear() = default;
  // stddev scales 1/sqrt(in); zero_init leaves the weight at exactly zero.
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         double gain = 1.0, bool zero_init = false);
  Var operator()(Graph& g, Var x) const;
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim);
  Var operator()(Graph& g, Var x) const;
};

// Pre-norm transformer block with rotary self-attention and a GELU MLP.
// Nothing in it mixes information across rows except the masked attention.
struct TransformerBlock {
  LayerNorm ln_attn;
  Linear q, k, v, o;
  LayerNorm ln_mlp;
  Linear fc1, fc2;
  std::size_t heads = 1;
  double rope_base = 10000.0;

  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                   std::size_t mlp_ratio, double rope_base, Rng& rng);
  Var operator()(Graph& g, Var x, const AttentionMask& mask,
                 std::span<const double> positions) const;
};

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
};

// Decoupled weight-decay Adam with global gradient-norm clipping. Weight decay
// applies to matrices only (rows > 1), not to biases, gains or embeddings rows.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update from the accumulated grads, then zeroes them.
  // Returns the pre-clip gradient norm.
  double step(ParamStore& store);
  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace dystream::nn
