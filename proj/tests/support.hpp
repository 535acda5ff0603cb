#pragma once

// Helpers shared by the unit tests: random tensors, tiny model configs and a
// central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dystream/autograd.hpp"
#include "dystream/generator.hpp"
#include "dystream/rng.hpp"
#include "dystream/tensor.hpp"

namespace dystream::test {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values) v = scale * rng.normal();
  return t;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // parameter name and index of the worst entry
  std::size_t checked = 0;
};

// Compares backward() against central differences for every scalar of every
// parameter in `store`. rel = |a - n| / max(|a|, |n|, floor); the floor keeps
// entries whose true gradient is ~0 from dividing round-off by round-off.
inline GradCheck check_gradients(ParamStore& store, const std::function<Var(Graph&)>& loss,
                                 double h = 1e-5, double floor = 1e-6) {
  store.zero_grad();
  {
    Graph g;
    Var l = loss(g);
    g.backward(l);
  }
  GradCheck out;
  for (Parameter* p : store.all()) {
    const std::vector<double> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.values.size(); ++i) {
      const double saved = p->value.values[i];
      p->value.values[i] = saved + h;
      double up, down;
      {
        Graph g(false);
        up = loss(g).item();
      }
      p->value.values[i] = saved - h;
      {
        Graph g(false);
        down = loss(g).item();
      }
      p->value.values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = p->name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  store.zero_grad();
  return out;
}

// Overwrites every parameter with small random values so that zero-initialized
// layers do not hide gradient paths.
inline void randomize(ParamStore& store, Rng& rng, double scale = 0.3) {
  for (Parameter* p : store.all())
    for (double& v : p->value.values) v = scale * rng.normal();
}

inline WorldConfig tiny_world() {
  WorldConfig w;
  w.motion_dim = 4;
  w.audio_feature_dim = 3;
  w.seed = 11;
  return w;
}

inline ModelConfig tiny_model(const WorldConfig& world, std::size_t lookahead = 2) {
  ModelConfig mc = ModelConfig::defaults_for(world);
  for (EncoderConfig* e : {&mc.speaker, &mc.listener}) {
    e->model_dim = 8;
    e->heads = 2;
    e->layers = 2;
    e->context = 4;
  }
  mc.speaker.lookahead = lookahead;
  mc.generator.ar_dim = 8;
  mc.generator.ar_heads = 2;
  mc.generator.ar_blocks = 1;
  mc.generator.head_dim = 8;
  mc.generator.head_blocks = 2;
  mc.generator.time_freqs = 4;
  mc.generator.window_N = 12;
  return mc;
}

// Flow loss of a two-frame instance through the whole model: both encoders,
// alignment, projections, the autoregressive backbone and the head. A second
// term with every condition dropped routes gradient into the null embeddings.
struct TwoFrameInstance {
  Tensor speaker, listener;  // 2 * r audio rows
  Tensor history, anchor, m0, eps;
  std::vector<double> t;

  static TwoFrameInstance make(const ModelConfig& mc, Rng& rng) {
    TwoFrameInstance s;
    const std::size_t audio = 2 * mc.world.audio_frames_per_video_frame;
    const std::size_t d = mc.generator.motion_dim;
    s.speaker = random_tensor(audio, mc.speaker.input_dim, rng);
    s.listener = random_tensor(audio, mc.listener.input_dim, rng);
    s.history = random_tensor(2, d, rng);
    s.anchor = random_tensor(1, d, rng);
    s.m0 = random_tensor(2, d, rng);
    s.eps = random_tensor(2, d, rng);
    s.t = {0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform()};
    return s;
  }

  Var loss(const MotionModel& model, Graph& g) const {
    const auto taps = alignment_taps(speaker.rows(), 2);
    Var s = model.project_speaker(g, ag::interp_rows(model.speaker_encoder().forward(g, g.constant(speaker)), taps));
    Var l = model.project_listener(g, ag::interp_rows(model.listener_encoder().forward(g, g.constant(listener)), taps));
    Tensor mt = m0;
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < mt.cols(); ++c)
        mt.at(r, c) = (1.0 - flow_sigma(t[r])) * m0.at(r, c) + flow_sigma(t[r]) * eps.at(r, c);
    Var total;
    for (const ConditionFlags flags : {ConditionFlags{true, true, true}, ConditionFlags{false, false, false}}) {
      Var c = model.ar_forward(g, g.constant(history), s, l, g.constant(anchor), flags);
      Var pred = model.config().generator.deterministic_mode ? model.deterministic_predict(g, c)
                                                             : model.head_denoise(g, g.constant(mt), t, c);
      Var term = flow_loss(pred, g.constant(m0));
      total = total.valid() ? ag::add(total, term) : term;
    }
    return total;
  }
};

}  // namespace dystream::test
