#pragma once

// Audio-driven motion generator: a causal autoregressive transformer that
// turns motion history, frame-aligned dyadic audio and an anchor frame into a
// per-frame condition vector, and a frame-level MLP head with adaptive
// LayerNorm that denoises a motion latent under that condition.
//
// Token layout for a window with history h_0..h_{K-1} (times tau_0..tau_{K-1}):
//   token 0      = anchor embedding (or the learned null anchor)
//   token k + 1  = embed(h_k) + speaker(tau_k + 1) + listener(tau_k + 1)
// The output at token k + 1 is the condition for the frame at tau_k + 1.

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dystream/autograd.hpp"
#include "dystream/encoder.hpp"
#include "dystream/nn.hpp"
#include "dystream/synthworld.hpp"

namespace dystream {

enum class AnchorMode { last10, random, none };
std::string to_string(AnchorMode m);
AnchorMode anchor_mode_from_string(const std::string& s);

struct GeneratorConfig {
  std::size_t ar_blocks = 2;
  std::size_t ar_dim = 64;
  std::size_t ar_heads = 4;
  std::size_t head_blocks = 2;
  std::size_t head_dim = 64;
  std::size_t motion_dim = 16;
  std::size_t window_N = 40;
  std::size_t time_freqs = 16;
  bool deterministic_mode = false;
  double rope_base = 10000.0;

  void validate() const;
  void to_kv(KeyValues& kv) const;
  static GeneratorConfig from_kv(const KeyValues& kv);
};

// Everything a full audio-to-motion model needs.
struct ModelConfig {
  WorldConfig world;
  EncoderConfig speaker;
  EncoderConfig listener;
  GeneratorConfig generator;

  static ModelConfig defaults_for(const WorldConfig& world);
  void validate() const;
  void to_kv(KeyValues& kv) const;
  static ModelConfig from_kv(const KeyValues& kv);
};

// Which conditions are present; false means "replaced by its null embedding".
struct ConditionFlags {
  bool speaker = true;
  bool listener = true;
  bool anchor = true;
  friend bool operator==(const ConditionFlags&, const ConditionFlags&) = default;
};

struct FlowSample {
  Tensor m0;
  Tensor eps;
  double t = 0.0;
  double sigma = 0.0;
  Tensor mt;
  static FlowSample make(const Tensor& m0, const Tensor& eps, double t);
};

// Rectified-flow schedule: sigma_t = t.
inline double flow_sigma(double t) { return t; }

// Linear interpolation of `audio_frames` encoder rows onto `motion_frames`
// rows, motion frame i sampled at audio position (i+1)*A/M - 1.
std::vector<InterpTap> alignment_taps(std::size_t audio_frames, std::size_t motion_frames);
Tensor align_audio(const Tensor& encoded, std::size_t motion_frames);

struct TrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 8;
  double drop_speaker = 0.5;
  double drop_listener = 0.5;
  double drop_anchor = 0.1;
  AnchorMode anchor_mode = AnchorMode::last10;
  nn::AdamWConfig optimizer{};
  std::uint64_t seed = 0;
  bool finetune_encoders = true;
};

class MotionModel {
 public:
  MotionModel(const ModelConfig& cfg, Rng& rng);
  MotionModel(const MotionModel&) = delete;
  MotionModel& operator=(const MotionModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const AudioEncoder& speaker_encoder() const { return *speaker_; }
  const AudioEncoder& listener_encoder() const { return *listener_; }

  // Loads encoder weights (names prefixed "enc.") from a standalone encoder.
  void load_speaker_encoder(const ParamStore& enc);
  void load_listener_encoder(const ParamStore& enc);

  // Projects aligned encoder rows (motion frames x encoder dim) to ar_dim.
  Var project_speaker(Graph& g, Var aligned) const;
  Var project_listener(Graph& g, Var aligned) const;

  // n rows of the null embedding for one condition type.
  Var null_rows(Graph& g, const Parameter& null_embedding, std::size_t n) const;

  // history: K x motion_dim; speaker/listener: K x ar_dim projected audio for
  // the frame each history token predicts; anchor: 1 x motion_dim. A condition
  // whose flag is false is replaced by its null embedding. Returns the K
  // condition vectors.
  Var ar_forward(Graph& g, Var history, Var speaker, Var listener, std::optional<Var> anchor,
                 const ConditionFlags& flags) const;

  // Frame-level denoiser: m_t (F x motion_dim), t (F values), c (F x ar_dim).
  Var head_denoise(Graph& g, Var mt, const std::vector<double>& t, Var c) const;
  // Deterministic-mode output projection.
  Var deterministic_predict(Graph& g, Var c) const;
  // Per-block (shift, scale, gate) for inspection: F x 3*head_dim.
  Tensor head_modulation(std::size_t block, const std::vector<double>& t, const Tensor& c) const;

  Parameter& null_speaker() const { return *null_speaker_; }
  Parameter& null_listener() const { return *null_listener_; }
  Parameter& null_anchor() const { return *null_anchor_; }

 private:
  struct HeadBlock {
    nn::Linear modulation;  // cond -> shift, scale, gate
    nn::Linear fc1, fc2;
  };

  Var head_condition(Graph& g, const std::vector<double>& t, Var c) const;

  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<AudioEncoder> speaker_;
  std::unique_ptr<AudioEncoder> listener_;
  nn::Linear speaker_proj_, listener_proj_;
  Parameter* null_speaker_;
  Parameter* null_listener_;
  Parameter* null_anchor_;
  nn::Linear motion_embed_, anchor_embed_;
  std::vector<nn::TransformerBlock> ar_blocks_;
  nn::LayerNorm ar_final_;
  nn::Linear head_in_, time_fc1_, time_fc2_, cond_proj_;
  std::vector<HeadBlock> head_blocks_;
  nn::Linear final_modulation_, head_out_;
  nn::Linear deterministic_out_;
};

// Mean over batch, frames and dims of (prediction - m0)^2.
Var flow_loss(Var prediction, Var m0);

// Train: uniform over [N-10, N-1]; infer: always 0.
enum class AnchorPhase { train, infer };
std::size_t sample_anchor(std::size_t sequence_length, AnchorPhase phase, Rng& rng);

struct TrainStepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Builds the teacher-forced loss for one window of an episode and backprops it
// (scaled by loss_scale) into the model's parameter grads. Returns the loss.
struct WindowSample {
  const OracleEpisode* episode = nullptr;
  std::size_t start = 0;           // first motion frame of the window
  ConditionFlags flags;
  std::optional<std::size_t> anchor_frame;  // episode frame used as anchor
  std::vector<double> t;           // one per predicted frame
  Tensor eps;                      // predicted frames x motion_dim
};
double window_loss(MotionModel& model, const WindowSample& s, double loss_scale, bool backprop);

class Trainer {
 public:
  Trainer(MotionModel& model, TrainOptions opt);
  TrainStepResult step(const Dataset& data);
  WindowSample draw_window(const Dataset& data);
  std::size_t steps_done() const { return optim_.steps(); }

 private:
  MotionModel& model_;
  TrainOptions opt_;
  nn::AdamW optim_;
  Rng rng_;
};

}  // namespace dystream
