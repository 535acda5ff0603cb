#pragma once

// Run configuration and the training / evaluation pipelines shared by the CLI
// and the acceptance suite. All randomness derives from RunConfig::seed,
// split per subsystem (data, init, train, sample).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dystream/encoder.hpp"
#include "dystream/generator.hpp"
#include "dystream/metrics.hpp"
#include "dystream/stream.hpp"

namespace dystream {

struct RunConfig {
  ModelConfig model;
  SamplerConfig sampler;
  std::size_t episodes = 48;
  std::size_t frames = 200;
  std::size_t eval_episodes = 6;
  std::size_t eval_frames = 200;
  EncoderTrainOptions teacher{.steps = 300, .batch = 4, .segment_frames = 48, .mask_fraction = 0.15,
                              .optimizer = {.lr = 1e-3}, .seed = 0};
  EncoderTrainOptions distill{.steps = 200, .batch = 4, .segment_frames = 48, .mask_fraction = 0.15,
                              .optimizer = {.lr = 1e-3}, .seed = 0};
  TrainOptions train;
  MetricsConfig metrics;
  std::uint64_t seed = 0;

  RunConfig();
  // Defaults, then the file, then explicit overrides (later wins).
  static RunConfig from_kv(const KeyValues& kv);
  void to_kv(KeyValues& kv) const;
  // Re-derives every sub-seed from `seed`.
  void reseed(std::uint64_t root);
  // Keeps model dimensions consistent with the world after edits.
  void sync_model_to_world();
};

// Settings used by the acceptance suite and the README results: model width
// 32, 20-frame generator window, 8-frame encoder context, lr 3e-3.
RunConfig desk_config(std::uint64_t seed);

Dataset make_training_data(const RunConfig& rc);
Dataset make_eval_data(const RunConfig& rc);

// Full-context teacher with the speaker encoder's architecture.
std::unique_ptr<EncoderModel> train_teacher(const RunConfig& rc, const Dataset& data, TrainLog* log = nullptr);
// Causal student with `lookahead` frames, initialized from the teacher.
std::unique_ptr<EncoderModel> distill_encoder(const RunConfig& rc, const EncoderModel& teacher,
                                              std::size_t lookahead, const Dataset& data, TrainLog* log = nullptr);

using StepCallback = std::function<void(std::size_t step, const TrainStepResult&)>;
// Builds a model from rc.model, loads the given encoders (when non-null) and
// trains the generator for rc.train.steps.
std::unique_ptr<MotionModel> train_model(const RunConfig& rc, const Dataset& data, const EncoderModel* speaker,
                                         const EncoderModel* listener, const StepCallback& on_step = {});

// Offline generation for every episode, anchored on its first frame.
std::vector<Tensor> generate_all(const MotionModel& model, const Dataset& data, const SamplerConfig& sampler);
Evaluation evaluate_dataset(const std::vector<Tensor>& generated, const Dataset& data, const MetricsConfig& cfg);

struct AblationRow {
  std::size_t lookahead_frames = 0;
  double lookahead_ms = 0.0;
  double sync_proxy = 0.0;
  double mse = 0.0;
};
inline constexpr const char* kAblationHeader = "lookahead_frames,lookahead_ms,sync_proxy,mse";
std::string format_ablation_row(const AblationRow& r);

// Trains one teacher and a causal listener encoder, then for each lookahead a
// distilled speaker student and a generator; evaluates offline on data held
// out from training. on_row fires as each row completes.
std::vector<AblationRow> run_lookahead_ablation(const RunConfig& rc, const std::vector<std::size_t>& lookaheads,
                                                const Dataset& train, const Dataset& eval,
                                                const std::function<void(const AblationRow&)>& on_row = {});
std::vector<AblationRow> run_lookahead_ablation(const RunConfig& rc, const std::vector<std::size_t>& lookaheads,
                                                const std::function<void(const AblationRow&)>& on_row = {});

// Per-episode sampler seed used by every generation path.
SamplerConfig sampler_for_episode(const SamplerConfig& base, std::size_t episode);

// Trains a generator with the given anchor mode and reports the mean drift
// of `rollout_frames`-frame offline rollouts on held-out episodes.
double anchor_drift_experiment(const RunConfig& rc, AnchorMode mode, std::size_t rollout_frames);

struct DiversityResult {
  double var_pose = 0.0;
  double sid_pose = 0.0;
  double sync_proxy = 0.0;
};
// Trains a generator (deterministic or flow head) and evaluates diversity.
DiversityResult diversity_experiment(const RunConfig& rc, bool deterministic);

// Motion files: header m0,...,m{d-1}, one row per frame, shortest
// round-trip decimal text.
void write_motion_csv(const std::filesystem::path& path, const Tensor& motion);
Tensor read_motion_csv(const std::filesystem::path& path);

}  // namespace dystream
