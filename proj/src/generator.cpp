#include "dystream/generator.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace dystream {

std::string to_string(AnchorMode m) {
  switch (m) {
    case AnchorMode::last10: return "last10";
    case AnchorMode::random: return "random";
    case AnchorMode::none: return "none";
  }
  return "?";
}

AnchorMode anchor_mode_from_string(const std::string& s) {
  if (s == "last10") return AnchorMode::last10;
  if (s == "random") return AnchorMode::random;
  if (s == "none") return AnchorMode::none;
  throw std::invalid_argument("unknown anchor mode '" + s + "' (expected last10, random or none)");
}

// ------------------------------------------------------------------- configs

void GeneratorConfig::validate() const {
  if (ar_heads == 0 || ar_dim % ar_heads != 0)
    throw std::invalid_argument("ar_dim must be divisible by ar_heads");
  if ((ar_dim / ar_heads) % 2 != 0) throw std::invalid_argument("ar head dim must be even");
  if (window_N < 11) throw std::invalid_argument("window_N must be at least 11");
  if (motion_dim == 0 || head_dim == 0 || ar_blocks == 0)
    throw std::invalid_argument("generator dimensions must be positive");
}

void GeneratorConfig::to_kv(KeyValues& kv) const {
  kv.set("gen.ar_blocks", ar_blocks);
  kv.set("gen.ar_dim", ar_dim);
  kv.set("gen.ar_heads", ar_heads);
  kv.set("gen.head_blocks", head_blocks);
  kv.set("gen.head_dim", head_dim);
  kv.set("gen.motion_dim", motion_dim);
  kv.set("gen.window_N", window_N);
  kv.set("gen.time_freqs", time_freqs);
  kv.set("gen.deterministic_mode", deterministic_mode);
  kv.set("gen.rope_base", rope_base);
  kv.set("gen.alignment", std::string("end_of_frame"));
}

GeneratorConfig GeneratorConfig::from_kv(const KeyValues& kv) {
  GeneratorConfig c;
  kv.read("gen.ar_blocks", c.ar_blocks);
  kv.read("gen.ar_dim", c.ar_dim);
  kv.read("gen.ar_heads", c.ar_heads);
  kv.read("gen.head_blocks", c.head_blocks);
  kv.read("gen.head_dim", c.head_dim);
  kv.read("gen.motion_dim", c.motion_dim);
  kv.read("gen.window_N", c.window_N);
  kv.read("gen.time_freqs", c.time_freqs);
  kv.read("gen.deterministic_mode", c.deterministic_mode);
  kv.read("gen.rope_base", c.rope_base);
  if (kv.has("gen.alignment") && kv.raw("gen.alignment") != "end_of_frame")
    throw ConfigError("unsupported alignment convention " + kv.raw("gen.alignment"));
  return c;
}

ModelConfig ModelConfig::defaults_for(const WorldConfig& world) {
  ModelConfig m;
  m.world = world;
  m.speaker.input_dim = world.audio_feature_dim;
  m.speaker.lookahead = world.coart_lag_q;
  m.listener.input_dim = world.audio_feature_dim;
  m.listener.lookahead = 0;
  m.generator.motion_dim = world.motion_dim;
  return m;
}

void ModelConfig::validate() const {
  world.validate();
  speaker.validate();
  listener.validate();
  generator.validate();
  if (speaker.input_dim != world.audio_feature_dim || listener.input_dim != world.audio_feature_dim)
    throw std::invalid_argument("encoder input_dim must equal world.audio_feature_dim");
  if (generator.motion_dim != world.motion_dim)
    throw std::invalid_argument("gen.motion_dim must equal world.motion_dim");
  if (listener.mode != EncoderMode::causal_lookahead || listener.lookahead != 0)
    throw std::invalid_argument("listener encoder must be purely causal (lookahead 0)");
}

void ModelConfig::to_kv(KeyValues& kv) const {
  world.to_kv(kv);
  speaker.to_kv(kv, "enc_s");
  listener.to_kv(kv, "enc_l");
  generator.to_kv(kv);
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
  ModelConfig m;
  m.world = WorldConfig::from_kv(kv);
  m.speaker = EncoderConfig::from_kv(kv, "enc_s");
  m.listener = EncoderConfig::from_kv(kv, "enc_l");
  m.generator = GeneratorConfig::from_kv(kv);
  return m;
}

// ------------------------------------------------------------------- helpers

FlowSample FlowSample::make(const Tensor& m0, const Tensor& eps, double t) {
  if (m0.shape != eps.shape) throw ShapeError("flow sample: noise shape differs from m0");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time must lie in [0, 1]");
  FlowSample s{m0, eps, t, flow_sigma(t), m0};
  for (std::size_t i = 0; i < m0.numel(); ++i)
    s.mt.values[i] = (1.0 - s.sigma) * m0.values[i] + s.sigma * eps.values[i];
  return s;
}

std::vector<InterpTap> alignment_taps(std::size_t audio_frames, std::size_t motion_frames) {
  if (audio_frames == 0) throw std::invalid_argument("cannot align empty audio");
  std::vector<InterpTap> taps(motion_frames);
  for (std::size_t i = 0; i < motion_frames; ++i) {
    const std::size_t num = (i + 1) * audio_frames;
    if (num % motion_frames == 0) {
      const std::size_t pos = num / motion_frames - 1;
      taps[i] = {pos, pos, 0.0};
      continue;
    }
    double pos = static_cast<double>(num) / static_cast<double>(motion_frames) - 1.0;
    if (pos < 0.0) pos = 0.0;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, audio_frames - 1);
    taps[i] = {lo, hi, hi == lo ? 0.0 : pos - static_cast<double>(lo)};
  }
  return taps;
}

Tensor align_audio(const Tensor& encoded, std::size_t motion_frames) {
  Graph g(false);
  return ag::interp_rows(g.constant(encoded), alignment_taps(encoded.rows(), motion_frames)).tensor();
}

Var flow_loss(Var prediction, Var m0) { return ag::mse(prediction, m0); }

std::size_t sample_anchor(std::size_t n, AnchorPhase phase, Rng& rng) {
  if (phase == AnchorPhase::infer) return 0;
  if (n < 11) throw std::invalid_argument("training anchor needs a sequence of at least 11 frames");
  return n - 10 + rng.below(10);
}

// --------------------------------------------------------------------- model

MotionModel::MotionModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto& gc = cfg_.generator;
  Rng enc_rng = rng.split("encoders");
  speaker_ = std::make_unique<AudioEncoder>(cfg_.speaker, store_, "enc_s", enc_rng);
  listener_ = std::make_unique<AudioEncoder>(cfg_.listener, store_, "enc_l", enc_rng);
  Rng r = rng.split("generator");
  speaker_proj_ = nn::Linear(store_, "gen.speaker_proj", cfg_.speaker.model_dim, gc.ar_dim, r);
  listener_proj_ = nn::Linear(store_, "gen.listener_proj", cfg_.listener.model_dim, gc.ar_dim, r);
  null_speaker_ = &store_.add_normal("gen.null_speaker", 1, gc.ar_dim, 0.02, r);
  null_listener_ = &store_.add_normal("gen.null_listener", 1, gc.ar_dim, 0.02, r);
  null_anchor_ = &store_.add_normal("gen.null_anchor", 1, gc.ar_dim, 0.02, r);
  motion_embed_ = nn::Linear(store_, "gen.motion_embed", gc.motion_dim, gc.ar_dim, r);
  anchor_embed_ = nn::Linear(store_, "gen.anchor_embed", gc.motion_dim, gc.ar_dim, r);
  for (std::size_t b = 0; b < gc.ar_blocks; ++b)
    ar_blocks_.emplace_back(store_, "gen.ar" + std::to_string(b), gc.ar_dim, gc.ar_heads, 2,
                            gc.rope_base, r);
  ar_final_ = nn::LayerNorm(store_, "gen.ar_ln_f", gc.ar_dim);
  if (gc.deterministic_mode) {
    deterministic_out_ = nn::Linear(store_, "gen.det_out", gc.ar_dim, gc.motion_dim, r, 1.0, true);
    return;
  }
  const std::size_t h = gc.head_dim;
  head_in_ = nn::Linear(store_, "gen.head_in", gc.motion_dim, h, r);
  time_fc1_ = nn::Linear(store_, "gen.time_fc1", 2 * gc.time_freqs, h, r);
  time_fc2_ = nn::Linear(store_, "gen.time_fc2", h, h, r);
  cond_proj_ = nn::Linear(store_, "gen.cond_proj", gc.ar_dim, h, r);
  for (std::size_t b = 0; b < gc.head_blocks; ++b) {
    const std::string n = "gen.head" + std::to_string(b);
    head_blocks_.push_back(HeadBlock{nn::Linear(store_, n + ".ada", h, 3 * h, r, 1.0, true),
                                     nn::Linear(store_, n + ".fc1", h, 2 * h, r),
                                     nn::Linear(store_, n + ".fc2", 2 * h, h, r)});
  }
  final_modulation_ = nn::Linear(store_, "gen.head_final_ada", h, 2 * h, r, 1.0, true);
  head_out_ = nn::Linear(store_, "gen.head_out", h, gc.motion_dim, r, 1.0, true);
}

void MotionModel::load_speaker_encoder(const ParamStore& enc) {
  for (Parameter* p : store_.all()) {
    if (p->name.rfind("enc_s.", 0) != 0) continue;
    const Parameter& src = enc.get("enc." + p->name.substr(6));
    if (src.value.shape != p->value.shape) throw ShapeError("speaker encoder shape mismatch at " + p->name);
    p->value.values = src.value.values;
  }
}

void MotionModel::load_listener_encoder(const ParamStore& enc) {
  for (Parameter* p : store_.all()) {
    if (p->name.rfind("enc_l.", 0) != 0) continue;
    const Parameter& src = enc.get("enc." + p->name.substr(6));
    if (src.value.shape != p->value.shape) throw ShapeError("listener encoder shape mismatch at " + p->name);
    p->value.values = src.value.values;
  }
}

Var MotionModel::project_speaker(Graph& g, Var aligned) const { return speaker_proj_(g, aligned); }
Var MotionModel::project_listener(Graph& g, Var aligned) const { return listener_proj_(g, aligned); }

Var MotionModel::null_rows(Graph& g, const Parameter& null_embedding, std::size_t n) const {
  return ag::broadcast_rows(g.param(const_cast<Parameter&>(null_embedding)), n);
}

Var MotionModel::ar_forward(Graph& g, Var history, Var speaker, Var listener,
                            std::optional<Var> anchor, const ConditionFlags& flags) const {
  const auto& gc = cfg_.generator;
  const std::size_t k = history.rows();
  if (k == 0) throw std::invalid_argument("autoregressive forward needs at least one history frame");
  if (k + 1 > gc.window_N) throw std::invalid_argument("history longer than the training window");
  if (history.cols() != gc.motion_dim) throw ShapeError("history motion dimension mismatch");
  Var s = flags.speaker ? speaker : null_rows(g, *null_speaker_, k);
  Var l = flags.listener ? listener : null_rows(g, *null_listener_, k);
  if (s.rows() != k || l.rows() != k || s.cols() != gc.ar_dim || l.cols() != gc.ar_dim)
    throw ShapeError("audio rows must match history length and ar_dim");
  Var tokens = ag::add(ag::add(motion_embed_(g, history), s), l);
  Var anchor_token = (flags.anchor && anchor) ? anchor_embed_(g, *anchor) : g.param(*null_anchor_);
  Var x = ag::concat_rows({anchor_token, tokens});
  std::vector<double> positions(k + 1);
  std::iota(positions.begin(), positions.end(), 0.0);
  const AttentionMask mask = AttentionMask::causal(k + 1);
  for (const auto& blk : ar_blocks_) x = blk(g, x, mask, positions);
  return ag::slice_rows(ar_final_(g, x), 1, k + 1);
}

Var MotionModel::head_condition(Graph& g, const std::vector<double>& t, Var c) const {
  const auto& gc = cfg_.generator;
  const std::size_t f = t.size();
  std::vector<double> emb(f * 2 * gc.time_freqs);
  for (std::size_t i = 0; i < f; ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) throw std::invalid_argument("flow time outside [0, 1]");
    for (std::size_t k = 0; k < gc.time_freqs; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(gc.time_freqs));
      const double a = 1000.0 * t[i] * freq;
      emb[i * 2 * gc.time_freqs + k] = std::sin(a);
      emb[i * 2 * gc.time_freqs + gc.time_freqs + k] = std::cos(a);
    }
  }
  Var te = time_fc2_(g, ag::silu(time_fc1_(g, g.constant(f, 2 * gc.time_freqs, std::move(emb)))));
  return ag::silu(ag::add(te, cond_proj_(g, c)));
}

Var MotionModel::head_denoise(Graph& g, Var mt, const std::vector<double>& t, Var c) const {
  const auto& gc = cfg_.generator;
  if (gc.deterministic_mode) return deterministic_predict(g, c);
  if (mt.rows() != t.size() || c.rows() != t.size()) throw ShapeError("head inputs disagree on frame count");
  if (mt.cols() != gc.motion_dim || c.cols() != gc.ar_dim) throw ShapeError("head input dimension mismatch");
  const std::size_t h = gc.head_dim;
  Var cond = head_condition(g, t, c);
  Var x = head_in_(g, mt);
  for (const auto& blk : head_blocks_) {
    Var mod = blk.modulation(g, cond);
    Var shift = ag::slice_cols(mod, 0, h);
    Var scale = ag::slice_cols(mod, h, 2 * h);
    Var gate = ag::slice_cols(mod, 2 * h, 3 * h);
    Var n = ag::layer_norm(x, std::nullopt, std::nullopt, 1e-6);
    Var y = blk.fc2(g, ag::silu(blk.fc1(g, ag::add(ag::mul(n, ag::add_scalar(scale, 1.0)), shift))));
    x = ag::add(x, ag::mul(gate, y));
  }
  Var fmod = final_modulation_(g, cond);
  Var n = ag::layer_norm(x, std::nullopt, std::nullopt, 1e-6);
  Var out = ag::add(ag::mul(n, ag::add_scalar(ag::slice_cols(fmod, h, 2 * h), 1.0)), ag::slice_cols(fmod, 0, h));
  return head_out_(g, out);
}

Var MotionModel::deterministic_predict(Graph& g, Var c) const {
  if (!cfg_.generator.deterministic_mode) throw std::logic_error("model has a flow head");
  return deterministic_out_(g, c);
}

Tensor MotionModel::head_modulation(std::size_t block, const std::vector<double>& t, const Tensor& c) const {
  if (block >= head_blocks_.size()) throw std::out_of_range("head block index");
  Graph g(false);
  return head_blocks_[block].modulation(g, head_condition(g, t, g.constant(c))).tensor();
}

// ------------------------------------------------------------------ training

double window_loss(MotionModel& model, const WindowSample& s, double loss_scale, bool backprop) {
  const auto& cfg = model.config();
  const auto& ep = *s.episode;
  const std::size_t n = cfg.generator.window_N;
  if (ep.frames() < n)
    throw std::invalid_argument("episode of " + std::to_string(ep.frames()) +
                                " frames is shorter than window_N=" + std::to_string(n));
  if (s.start + n > ep.frames()) throw std::out_of_range("window exceeds episode");
  const std::size_t k = n - 1;  // predicted frames start+1 .. start+n-1
  const std::size_t audio_frames = ep.audio.frames();
  const auto taps_all = alignment_taps(audio_frames, ep.frames());

  // Audio segment covering every encoder row that can influence the aligned rows.
  std::size_t lo = audio_frames, hi = 0;
  for (std::size_t i = s.start + 1; i < s.start + n; ++i) {
    lo = std::min(lo, taps_all[i].lo);
    hi = std::max(hi, taps_all[i].hi);
  }
  std::size_t a0 = 0;
  const auto past_s = cfg.speaker.receptive_past(), past_l = cfg.listener.receptive_past();
  if (past_s && past_l) a0 = lo > std::max(*past_s, *past_l) ? lo - std::max(*past_s, *past_l) : 0;
  std::size_t a1 = audio_frames;
  const auto la_s = cfg.speaker.effective_lookahead(), la_l = cfg.listener.effective_lookahead();
  if (la_s && la_l) a1 = std::min(audio_frames, hi + std::max(*la_s, *la_l) + 1);

  std::vector<InterpTap> taps;
  for (std::size_t i = s.start + 1; i < s.start + n; ++i)
    taps.push_back({taps_all[i].lo - a0, taps_all[i].hi - a0, taps_all[i].weight_hi});

  Graph g(backprop);
  ConditionFlags flags = s.flags;
  Var speaker, listener;
  if (flags.speaker) {
    Var enc = model.speaker_encoder().forward(g, g.constant(ep.audio.speaker.slice_rows(a0, a1)), a0);
    speaker = model.project_speaker(g, ag::interp_rows(enc, taps));
  }
  if (flags.listener) {
    Var enc = model.listener_encoder().forward(g, g.constant(ep.audio.listener.slice_rows(a0, a1)), a0);
    listener = model.project_listener(g, ag::interp_rows(enc, taps));
  }
  Var history = g.constant(ep.motion.slice_rows(s.start, s.start + k));
  std::optional<Var> anchor;
  if (s.anchor_frame) anchor = g.constant(ep.motion.slice_rows(*s.anchor_frame, *s.anchor_frame + 1));
  else flags.anchor = false;
  Var c = model.ar_forward(g, history, speaker, listener, anchor, flags);

  Tensor m0 = ep.motion.slice_rows(s.start + 1, s.start + n);
  Var pred;
  if (model.config().generator.deterministic_mode) {
    pred = model.deterministic_predict(g, c);
  } else {
    if (s.t.size() != k || s.eps.rows() != k) throw ShapeError("flow samples must cover every predicted frame");
    Tensor mt = m0;
    for (std::size_t r = 0; r < k; ++r) {
      const double sigma = flow_sigma(s.t[r]);
      for (std::size_t d = 0; d < m0.cols(); ++d)
        mt.at(r, d) = (1.0 - sigma) * m0.at(r, d) + sigma * s.eps.at(r, d);
    }
    pred = model.head_denoise(g, g.constant(mt), s.t, c);
  }
  Var loss = flow_loss(pred, g.constant(m0));
  const double value = loss.item();
  if (backprop) g.backward(ag::scale(loss, loss_scale));
  return value;
}

Trainer::Trainer(MotionModel& model, TrainOptions opt)
    : model_(model), opt_(opt), optim_(opt.optimizer), rng_(Rng(opt.seed).split("train")) {}

WindowSample Trainer::draw_window(const Dataset& data) {
  const std::size_t n = model_.config().generator.window_N;
  WindowSample s;
  s.episode = &data.episodes[rng_.below(data.episodes.size())];
  if (s.episode->frames() < n)
    throw std::invalid_argument("episode shorter than window_N=" + std::to_string(n));
  s.start = rng_.below(s.episode->frames() - n + 1);
  s.flags.speaker = !rng_.bernoulli(opt_.drop_speaker);
  s.flags.listener = !rng_.bernoulli(opt_.drop_listener);
  s.flags.anchor = !rng_.bernoulli(opt_.drop_anchor);
  switch (opt_.anchor_mode) {
    case AnchorMode::last10: s.anchor_frame = s.start + sample_anchor(n, AnchorPhase::train, rng_); break;
    case AnchorMode::random: s.anchor_frame = rng_.below(s.episode->frames()); break;
    case AnchorMode::none: s.flags.anchor = false; break;
  }
  if (!s.flags.anchor) s.anchor_frame.reset();
  const std::size_t k = n - 1;
  s.t.resize(k);
  for (auto& t : s.t) t = rng_.uniform();
  s.eps = Tensor::zeros(k, model_.config().generator.motion_dim);
  for (auto& e : s.eps.values) e = rng_.normal();
  return s;
}

TrainStepResult Trainer::step(const Dataset& data) {
  if (data.episodes.empty()) throw std::invalid_argument("training needs a nonempty dataset");
  TrainStepResult res;
  const double scale = 1.0 / static_cast<double>(opt_.batch);
  for (std::size_t b = 0; b < opt_.batch; ++b) {
    WindowSample s = draw_window(data);
    res.loss += window_loss(model_, s, scale, true) * scale;
  }
  if (!std::isfinite(res.loss))
    throw TrainingDiverged("generator loss became non-finite at step " + std::to_string(optim_.steps()));
  if (!opt_.finetune_encoders) {
    for (Parameter* p : model_.params().all())
      if (p->name.rfind("enc_", 0) == 0) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }
  res.grad_norm = optim_.step(model_.params());
  return res;
}

}  // namespace dystream
