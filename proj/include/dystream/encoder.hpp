#pragma once

// Causal audio encoder with bounded lookahead.
//
// Input projection, a stack of pre-norm transformer blocks with rotary
// attention, and a final per-row LayerNorm. The first block's mask grants
// `lookahead` future frames; later blocks are strictly causal, so the whole
// stack sees at most `lookahead` frames ahead of any output row. An optional
// `context` bound limits how far back each block may look, which keeps
// streaming re-encoding to a fixed-size window.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dystream/autograd.hpp"
#include "dystream/config.hpp"
#include "dystream/nn.hpp"
#include "dystream/synthworld.hpp"

namespace dystream {

enum class EncoderMode { full, causal_lookahead };

struct EncoderConfig {
  std::size_t input_dim = 8;
  std::size_t layers = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  EncoderMode mode = EncoderMode::causal_lookahead;
  std::size_t lookahead = 0;               // audio frames; ignored in full mode
  std::optional<std::size_t> context = 16; // past frames per block; nullopt = unbounded
  double rope_base = 10000.0;
  bool initialized_from_teacher = false;

  void validate() const;
  std::optional<std::size_t> effective_lookahead() const {
    return mode == EncoderMode::full ? std::nullopt : std::optional<std::size_t>(lookahead);
  }
  // Input rows before an output row that can influence it (nullopt = all).
  std::optional<std::size_t> receptive_past() const;

  void to_kv(KeyValues& kv, const std::string& prefix) const;
  static EncoderConfig from_kv(const KeyValues& kv, const std::string& prefix);
};

class AudioEncoder {
 public:
  // Registers parameters named `<prefix>.*` in `store`.
  AudioEncoder(const EncoderConfig& cfg, ParamStore& store, const std::string& prefix, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  AttentionMask layer_mask(std::size_t layer, std::size_t frames) const;

  // audio: frames x input_dim; rows are absolute frames first_frame, first_frame+1, ...
  Var forward(Graph& g, Var audio, std::size_t first_frame = 0) const;
  // Masked-frame variant used for self-supervised pretraining.
  Var forward_masked(Graph& g, Var audio, const std::vector<bool>& masked,
                     std::size_t first_frame = 0) const;
  Var reconstruct(Graph& g, Var features) const;

  // Forward pass without gradient bookkeeping.
  Tensor encode(const Tensor& audio, std::size_t first_frame = 0) const;

 private:
  Var run_blocks(Graph& g, Var x, std::size_t first_frame) const;

  EncoderConfig cfg_;
  std::string prefix_;
  nn::Linear input_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_;
  Parameter* mask_embedding_;
  nn::Linear recon_;
};

// Standalone encoder with its own parameters (teacher or student).
struct EncoderModel {
  ParamStore store;
  AudioEncoder encoder;
  EncoderModel(const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "enc")
      : encoder(cfg, store, prefix, rng) {}
};

AttentionMask build_lookahead_mask(std::size_t frames, std::optional<std::size_t> lookahead);

struct EncoderTrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::size_t segment_frames = 48;
  double mask_fraction = 0.15;
  nn::AdamWConfig optimizer{.lr = 1e-3};
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> losses;
  double first() const { return losses.empty() ? 0.0 : losses.front(); }
  double last() const { return losses.empty() ? 0.0 : losses.back(); }
  // Mean over the last `n` entries (smooths out per-batch noise).
  double tail_mean(std::size_t n) const;
  double head_mean(std::size_t n) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Masked-frame reconstruction on speaker and listener tracks of the dataset.
TrainLog pretrain_teacher(EncoderModel& teacher, const Dataset& data,
                          const EncoderTrainOptions& opt);

// Copies teacher weights into the student (when enable) and regresses the
// student's final features onto the teacher's, per frame, by MSE.
TrainLog distill_student(const EncoderModel& teacher, EncoderModel& student, const Dataset& data,
                         const EncoderTrainOptions& opt, bool init_from_teacher = true);

// Mean per-frame feature MSE between student and teacher over whole tracks.
double distillation_loss(const EncoderModel& teacher, const EncoderModel& student,
                         const Dataset& data);

}  // namespace dystream
