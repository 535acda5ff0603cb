#include "dystream/encoder.hpp"

#include <cmath>
#include <numeric>

namespace dystream {

AttentionMask build_lookahead_mask(std::size_t frames, std::optional<std::size_t> lookahead) {
  if (frames == 0) throw std::invalid_argument("mask needs at least one frame");
  return AttentionMask::lookahead(frames, lookahead);
}

void EncoderConfig::validate() const {
  if (layers == 0) throw std::invalid_argument("encoder needs at least one layer");
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("encoder model_dim must be divisible by heads");
  if ((model_dim / heads) % 2 != 0) throw std::invalid_argument("encoder head dim must be even");
  if (context && *context == 0) throw std::invalid_argument("encoder context must be positive");
}

std::optional<std::size_t> EncoderConfig::receptive_past() const {
  if (mode == EncoderMode::full || !context) return std::nullopt;
  return layers * *context;
}

void EncoderConfig::to_kv(KeyValues& kv, const std::string& p) const {
  kv.set(p + ".input_dim", input_dim);
  kv.set(p + ".layers", layers);
  kv.set(p + ".model_dim", model_dim);
  kv.set(p + ".heads", heads);
  kv.set(p + ".mode", std::string(mode == EncoderMode::full ? "full" : "causal_lookahead"));
  kv.set(p + ".lookahead_frames", lookahead);
  kv.set(p + ".context_frames", context ? std::to_string(*context) : std::string("unbounded"));
  kv.set(p + ".rope_base", rope_base);
  kv.set(p + ".initialized_from_teacher", initialized_from_teacher);
}

EncoderConfig EncoderConfig::from_kv(const KeyValues& kv, const std::string& p) {
  EncoderConfig c;
  kv.read(p + ".input_dim", c.input_dim);
  kv.read(p + ".layers", c.layers);
  kv.read(p + ".model_dim", c.model_dim);
  kv.read(p + ".heads", c.heads);
  if (kv.has(p + ".mode")) {
    const std::string& m = kv.raw(p + ".mode");
    if (m == "full") c.mode = EncoderMode::full;
    else if (m == "causal_lookahead") c.mode = EncoderMode::causal_lookahead;
    else throw ConfigError(p + ".mode: unknown encoder mode " + m);
  }
  kv.read(p + ".lookahead_frames", c.lookahead);
  if (kv.has(p + ".context_frames")) {
    const std::string& s = kv.raw(p + ".context_frames");
    if (s == "unbounded") {
      c.context.reset();
    } else {
      std::uint64_t v = 0;
      kv.read(p + ".context_frames", v);
      c.context = v;
    }
  }
  kv.read(p + ".rope_base", c.rope_base);
  kv.read(p + ".initialized_from_teacher", c.initialized_from_teacher);
  return c;
}

AudioEncoder::AudioEncoder(const EncoderConfig& cfg, ParamStore& store, const std::string& prefix,
                           Rng& rng)
    : cfg_(cfg), prefix_(prefix) {
  cfg_.validate();
  input_ = nn::Linear(store, prefix + ".in", cfg_.input_dim, cfg_.model_dim, rng);
  for (std::size_t l = 0; l < cfg_.layers; ++l)
    blocks_.emplace_back(store, prefix + ".blk" + std::to_string(l), cfg_.model_dim, cfg_.heads, 2,
                         cfg_.rope_base, rng);
  final_ = nn::LayerNorm(store, prefix + ".ln_f", cfg_.model_dim);
  mask_embedding_ = &store.add_normal(prefix + ".mask_emb", 1, cfg_.model_dim, 0.02, rng);
  recon_ = nn::Linear(store, prefix + ".recon", cfg_.model_dim, cfg_.input_dim, rng);
}

AttentionMask AudioEncoder::layer_mask(std::size_t layer, std::size_t frames) const {
  if (cfg_.mode == EncoderMode::full) return AttentionMask::lookahead(frames, std::nullopt);
  return AttentionMask::banded(frames, layer == 0 ? cfg_.lookahead : 0, cfg_.context);
}

Var AudioEncoder::run_blocks(Graph& g, Var x, std::size_t first_frame) const {
  const std::size_t frames = x.rows();
  std::vector<double> positions(frames);
  std::iota(positions.begin(), positions.end(), static_cast<double>(first_frame));
  for (std::size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l](g, x, layer_mask(l, frames), positions);
  return final_(g, x);
}

Var AudioEncoder::forward(Graph& g, Var audio, std::size_t first_frame) const {
  if (audio.rows() == 0) throw std::invalid_argument("cannot encode empty audio");
  if (audio.cols() != cfg_.input_dim) throw ShapeError("encoder input dimension mismatch");
  return run_blocks(g, input_(g, audio), first_frame);
}

Var AudioEncoder::forward_masked(Graph& g, Var audio, const std::vector<bool>& masked,
                                 std::size_t first_frame) const {
  if (masked.size() != audio.rows()) throw ShapeError("mask flags must match frame count");
  const std::size_t frames = audio.rows(), dim = cfg_.model_dim;
  std::vector<double> keep(frames * dim), hit(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    hit[f] = masked[f] ? 1.0 : 0.0;
    std::fill(keep.begin() + f * dim, keep.begin() + (f + 1) * dim, masked[f] ? 0.0 : 1.0);
  }
  Var x = input_(g, audio);
  x = ag::add(ag::mul(x, g.constant(frames, dim, std::move(keep))),
              ag::matmul(g.constant(frames, 1, std::move(hit)), g.param(*mask_embedding_)));
  return run_blocks(g, x, first_frame);
}

Var AudioEncoder::reconstruct(Graph& g, Var features) const { return recon_(g, features); }

Tensor AudioEncoder::encode(const Tensor& audio, std::size_t first_frame) const {
  Graph g(false);
  return forward(g, g.constant(audio), first_frame).tensor();
}

double TrainLog::tail_mean(std::size_t n) const {
  n = std::min(n, losses.size());
  if (n == 0) return 0.0;
  return std::accumulate(losses.end() - static_cast<long>(n), losses.end(), 0.0) / static_cast<double>(n);
}

double TrainLog::head_mean(std::size_t n) const {
  n = std::min(n, losses.size());
  if (n == 0) return 0.0;
  return std::accumulate(losses.begin(), losses.begin() + static_cast<long>(n), 0.0) / static_cast<double>(n);
}

namespace {

struct Segment {
  const Tensor* track;
  std::size_t start;
  std::size_t frames;
};

Segment random_segment(const Dataset& data, std::size_t want, Rng& rng) {
  const auto& ep = data.episodes[rng.below(data.episodes.size())];
  const Tensor& track = rng.bernoulli(0.5) ? ep.audio.speaker : ep.audio.listener;
  const std::size_t frames = std::min(want, track.rows());
  const std::size_t start = rng.below(track.rows() - frames + 1);
  return {&track, start, frames};
}

void check_finite(double loss, std::size_t step, const char* what) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(std::string(what) + " loss became non-finite at step " + std::to_string(step));
}

}  // namespace

TrainLog pretrain_teacher(EncoderModel& teacher, const Dataset& data,
                          const EncoderTrainOptions& opt) {
  if (data.episodes.empty()) throw std::invalid_argument("pretraining needs a nonempty dataset");
  Rng rng = Rng(opt.seed).split("pretrain");
  nn::AdamW optim(opt.optimizer);
  TrainLog log;
  const AudioEncoder& enc = teacher.encoder;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    double total = 0.0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      Segment seg = random_segment(data, opt.segment_frames, rng);
      Tensor audio = seg.track->slice_rows(seg.start, seg.start + seg.frames);
      std::vector<bool> masked(seg.frames, false);
      std::size_t count = 0;
      for (std::size_t f = 0; f < seg.frames; ++f) {
        masked[f] = rng.bernoulli(opt.mask_fraction);
        count += masked[f];
      }
      if (count == 0) {
        masked[rng.below(seg.frames)] = true;
        count = 1;
      }
      Graph g;
      Var x = g.constant(audio);
      Var recon = enc.reconstruct(g, enc.forward_masked(g, x, masked, seg.start));
      std::vector<Var> pred_rows, true_rows;
      for (std::size_t f = 0; f < seg.frames; ++f) {
        if (!masked[f]) continue;
        pred_rows.push_back(ag::slice_rows(recon, f, f + 1));
        true_rows.push_back(ag::slice_rows(x, f, f + 1));
      }
      Var loss = ag::scale(ag::mse(ag::concat_rows(pred_rows), ag::concat_rows(true_rows)),
                           1.0 / static_cast<double>(opt.batch));
      g.backward(loss);
      total += loss.item();
    }
    check_finite(total, step, "pretraining");
    log.losses.push_back(total);
    optim.step(teacher.store);
  }
  return log;
}

TrainLog distill_student(const EncoderModel& teacher, EncoderModel& student, const Dataset& data,
                         const EncoderTrainOptions& opt, bool init_from_teacher) {
  if (data.episodes.empty()) throw std::invalid_argument("distillation needs a nonempty dataset");
  const auto& tc = teacher.encoder.config();
  const auto& sc = student.encoder.config();
  if (tc.model_dim != sc.model_dim || tc.input_dim != sc.input_dim)
    throw ShapeError("teacher and student encoders must share input and model dimensions");
  if (init_from_teacher) {
    if (tc.layers != sc.layers || tc.heads != sc.heads)
      throw ShapeError("initializing from the teacher needs identical architecture");
    student.store.copy_values_from(teacher.store);
  }
  Rng rng = Rng(opt.seed).split("distill");
  nn::AdamW optim(opt.optimizer);
  TrainLog log;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    double total = 0.0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      Segment seg = random_segment(data, opt.segment_frames, rng);
      Tensor audio = seg.track->slice_rows(seg.start, seg.start + seg.frames);
      Tensor target = teacher.encoder.encode(audio, seg.start);
      Graph g;
      Var out = student.encoder.forward(g, g.constant(audio), seg.start);
      Var loss = ag::scale(ag::mse(out, g.constant(target)), 1.0 / static_cast<double>(opt.batch));
      g.backward(loss);
      total += loss.item();
    }
    check_finite(total, step, "distillation");
    log.losses.push_back(total);
    optim.step(student.store);
  }
  return log;
}

double distillation_loss(const EncoderModel& teacher, const EncoderModel& student,
                         const Dataset& data) {
  constexpr std::size_t kSegment = 48;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ep : data.episodes) {
    for (const Tensor* track : {&ep.audio.speaker, &ep.audio.listener}) {
      for (std::size_t s = 0; s + kSegment <= track->rows(); s += kSegment) {
        Tensor audio = track->slice_rows(s, s + kSegment);
        Tensor t = teacher.encoder.encode(audio, s);
        Tensor u = student.encoder.encode(audio, s);
        for (std::size_t i = 0; i < t.numel(); ++i) total += (t.values[i] - u.values[i]) * (t.values[i] - u.values[i]);
        count += t.numel();
      }
    }
  }
  if (count == 0) throw std::invalid_argument("held-out tracks shorter than one segment");
  return total / static_cast<double>(count);
}

}  // namespace dystream
