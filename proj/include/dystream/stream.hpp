#pragma once

// Inference: guidance combiner, Euler sampler, the sliding-window rollout, and
// the packet scheduler that measures Audio Packet Delay.
//
// Offline generation and streaming share one rollout object; they differ only
// in how encoder rows are produced (one pass over the whole track versus
// re-encoding a bounded window as packets arrive). Every encoder row depends
// only on rows inside its receptive field, so both paths feed the rollout
// identical numbers and produce identical motion.

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dystream/generator.hpp"
#include "dystream/packet.hpp"

namespace dystream {

struct GuidanceWeights {
  double w_s = 0.5;
  double w_l = 0.5;
  double w_r = 0.5;
  double w_all = 1.0;
  double w_sigma() const { return w_s + w_l + w_r + w_all; }
  double w_uncond() const { return 1.0 - w_sigma(); }
};

struct SamplerConfig {
  std::size_t steps = 5;
  GuidanceWeights guidance{};
  std::uint64_t seed = 0;
  // false: every branch sees the null anchor token and the anchor only seeds
  // the history (models trained without anchors never learned the embedding).
  bool anchor_token = true;
  void validate() const;
};

// The five condition branches of the guidance formula.
enum class Branch { all, speaker, listener, anchor, uncond };
inline constexpr std::array<Branch, 5> kBranches = {Branch::all, Branch::speaker, Branch::listener,
                                                   Branch::anchor, Branch::uncond};
ConditionFlags branch_flags(Branch b);
double branch_weight(Branch b, const GuidanceWeights& w);
std::string to_string(Branch b);

// Per-branch predictions; a branch whose weight is zero may be left empty.
struct BranchPredictions {
  std::array<std::optional<Tensor>, 5> m0;
  std::optional<Tensor>& operator[](Branch b) { return m0[static_cast<std::size_t>(b)]; }
  const std::optional<Tensor>& operator[](Branch b) const { return m0[static_cast<std::size_t>(b)]; }
};

// (1 - w_sum) * uncond + w_s * S + w_l * L + w_r * R + w_all * all.
Tensor cfg_combine(const BranchPredictions& p, const GuidanceWeights& w);

// m_hat_0 for one branch at latent m_t and time t.
using BranchDenoiser = std::function<Tensor(Branch, const Tensor& mt, double t)>;

// Euler integration from t = 1 to 0 over times 1, (s-1)/s, ..., 1/s. With
// v = (m_t - m_hat_0) / t the step to t' is m' = (t'/t) m + (1 - t'/t) m_hat_0.
Tensor euler_integrate(const SamplerConfig& sampler, const BranchDenoiser& denoise, Tensor noise);
// Same, starting from standard normal noise drawn from rng.
Tensor euler_sample(const SamplerConfig& sampler, const BranchDenoiser& denoise, std::size_t rows,
                    std::size_t dim, Rng& rng);

// Sliding-window autoregressive generator. History starts as the anchor
// repeated N-1 times; audio slots for times before frame 0 hold the null
// embeddings.
class Rollout {
 public:
  Rollout(const MotionModel& model, const SamplerConfig& sampler, const Tensor& anchor);

  // Generates frame next_frame() from the encoder rows aligned to it.
  std::vector<double> step(std::span<const double> speaker_row, std::span<const double> listener_row);

  std::size_t next_frame() const { return frame_; }
  // Tokens fed to the autoregressive transformer at the last step.
  std::size_t last_context_tokens() const { return last_tokens_; }
  std::size_t history_length() const { return history_.size(); }

 private:
  const MotionModel& model_;
  SamplerConfig sampler_;
  Tensor anchor_;
  std::deque<std::vector<double>> history_;
  std::deque<std::vector<double>> speaker_;
  std::deque<std::vector<double>> listener_;
  std::size_t frame_ = 0;
  std::size_t last_tokens_ = 0;
};

// Motion frames an audio track of `audio_frames` rows yields.
std::size_t motion_frames_for(const WorldConfig& world, std::size_t audio_frames);

Tensor generate_offline(const MotionModel& model, const DyadicAudioFeatures& audio,
                        const SamplerConfig& sampler, const Tensor& anchor);

struct LatencyRecord {
  std::size_t frame = 0;
  double packet_arrival_s = 0.0;
  double emit_s = 0.0;
  double apd_s = 0.0;
};

struct LatencyTrace {
  std::vector<LatencyRecord> records;
  double compute_s = 0.0;      // total processing time
  double audio_s = 0.0;        // total audio duration consumed
  std::size_t packets = 0;

  double fps() const;
  double mean_apd() const;
  double max_apd() const;
  double min_apd() const;
  double rtf() const;
  double mean_packet_processing_s() const;

  void write_csv(std::ostream& os) const;
  std::string summary() const;  // key=value lines
};

// Checks the CSV header, row shape, consecutive frame indices, non-decreasing
// emission times and APD = emit - arrival >= 0. Returns an empty string when
// valid, otherwise a description of the first problem.
std::string validate_trace_csv(std::istream& is);

enum class ClockMode { virtual_clock, wall };
ClockMode clock_mode_from_string(const std::string& s);

struct StreamOptions {
  ClockMode clock = ClockMode::virtual_clock;
  // When set, each generated frame costs exactly this much virtual time
  // instead of its measured wall time, which makes traces reproducible.
  std::optional<double> fixed_frame_cost_ms;
};

// Incremental session: feed packets in arrival order, then finish().
class StreamSession {
 public:
  StreamSession(const MotionModel& model, const SamplerConfig& sampler, const Tensor& anchor,
                StreamOptions opt = {});

  // Returns the motion frames this packet made generable.
  std::vector<std::vector<double>> push(const StreamPacket& packet);
  // End of stream: generates every remaining frame.
  std::vector<std::vector<double>> finish();

  // Frames whose lookahead is satisfied by `available` audio frames.
  static std::size_t generable_frames(const WorldConfig& world, std::size_t lookahead,
                                      std::size_t available);

  const LatencyTrace& trace() const { return trace_; }
  std::size_t frames_emitted() const { return rollout_.next_frame(); }
  std::size_t audio_frames_received() const { return received_; }
  const Rollout& rollout() const { return rollout_; }

 private:
  std::vector<std::vector<double>> generate_until(std::size_t end, double arrival_s);
  double now() const;

  const MotionModel& model_;
  StreamOptions opt_;
  Rollout rollout_;
  std::size_t lookahead_ = 0;
  // Buffered audio rows [buffer_start_, received_).
  std::deque<std::vector<double>> speaker_buf_, listener_buf_;
  std::size_t buffer_start_ = 0;
  std::size_t received_ = 0;
  double last_arrival_ = -1.0;
  double last_arrival_seen_ = 0.0;
  double virtual_now_ = 0.0;
  double wall_origin_ = 0.0;
  bool finished_ = false;
  LatencyTrace trace_;
};

struct StreamResult {
  Tensor motion;
  LatencyTrace trace;
  std::size_t first_packet_frames = 0;
};

StreamResult run_stream(const MotionModel& model, const std::vector<StreamPacket>& packets,
                        const SamplerConfig& sampler, const Tensor& anchor, StreamOptions opt = {});

// Chunk-based reference system: audio is buffered into chunks of chunk_s
// seconds; a chunk is processed once its audio has fully elapsed and its
// frames are played back at the video rate, so every frame waits the whole
// chunk duration plus the chunk's compute.
using ChunkComputeModel = std::function<double(std::size_t chunk_frames)>;
LatencyTrace simulate_chunk_baseline(double chunk_s, std::size_t motion_frames, double frame_period_s,
                                     const ChunkComputeModel& compute);

// Length-prefixed packet framing: u32 payload byte length, then f32 LE
// speaker rows followed by the same number of listener rows.
std::vector<StreamPacket> read_packet_stream(std::istream& is, std::size_t audio_dim,
                                             double frame_ms, double packet_ms);
void write_packet_stream(std::ostream& os, const std::vector<StreamPacket>& packets);

}  // namespace dystream
