#pragma once

// Synthetic dyadic world: smooth random audio-feature tracks for a speaker and
// a listener, and ground-truth motion produced by a fixed oracle.
//
// Motion frame i covers audio frames [i*r, (i+1)*r) and is aligned to audio
// position align(i) = (i+1)*r - 1. Channels [0, motion_dim/4) are "mouth"
// channels: a fixed linear map of speaker audio at positions
// align(i) - mouth_past_frames .. align(i) + coart_lag_q. The rest are "pose"
// channels: a per-episode rest pose, plus a fixed linear map of listener audio
// at positions align(i) - listener_delay_p - k (k < listener_taps), plus an
// AR(1) drift driven by Gaussian innovations of scale noise_scale.
//
// Every stored array is rounded to float precision so that the on-disk
// dataset reproduces it exactly.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dystream/config.hpp"
#include "dystream/packet.hpp"
#include "dystream/rng.hpp"
#include "dystream/tensor.hpp"

namespace dystream {

struct WorldConfig {
  std::size_t motion_dim = 16;
  std::size_t audio_feature_dim = 8;
  std::size_t audio_frames_per_video_frame = 2;
  std::size_t coart_lag_q = 2;
  std::size_t mouth_past_frames = 1;
  std::size_t listener_delay_p = 4;
  std::size_t listener_taps = 4;
  double noise_scale = 0.1;
  double drift_coeff = 0.9;
  double audio_smoothing = 0.5;  // AR(1) coefficient of the feature tracks
  double rest_scale = 1.0;       // stddev of the per-episode rest pose
  double listener_gain = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t mouth_count() const { return motion_dim / 4; }
  std::size_t pose_count() const { return motion_dim - mouth_count(); }
  double video_fps() const { return 25.0; }
  double audio_frame_ms() const {
    return 1000.0 / (video_fps() * static_cast<double>(audio_frames_per_video_frame));
  }
  std::size_t align(std::size_t motion_frame) const {
    return (motion_frame + 1) * audio_frames_per_video_frame - 1;
  }

  void to_kv(KeyValues& kv) const;
  static WorldConfig from_kv(const KeyValues& kv);
};

struct DyadicAudioFeatures {
  Tensor speaker;   // audio frames x audio_feature_dim
  Tensor listener;
  double frame_period_s = 0.02;
  std::size_t frames() const { return speaker.rows(); }
  friend bool operator==(const DyadicAudioFeatures&, const DyadicAudioFeatures&) = default;
};

struct OracleEpisode {
  DyadicAudioFeatures audio;
  Tensor motion;                          // motion frames x motion_dim
  std::vector<std::size_t> mouth_channels;
  Tensor deterministic_mouth_signal;      // motion frames x |mouth_channels|
  std::size_t frames() const { return motion.rows(); }
  friend bool operator==(const OracleEpisode&, const OracleEpisode&) = default;
};

// The fixed linear maps implied by a WorldConfig seed.
class World {
 public:
  explicit World(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  OracleEpisode generate_episode(std::size_t frames, Rng& rng) const;
  // Noise-free mouth component for a speaker track (no rounding applied).
  Tensor mouth_signal(const Tensor& speaker, std::size_t motion_frames) const;
  // Listener-driven pose component (no rounding applied).
  Tensor listener_response(const Tensor& listener, std::size_t motion_frames) const;

 private:
  WorldConfig cfg_;
  std::vector<double> mouth_map_;     // taps x audio_dim x mouth_count
  std::vector<double> listener_map_;  // listener_taps x audio_dim x pose_count
};

OracleEpisode generate_episode(const WorldConfig& cfg, std::size_t frames, Rng& rng);

// Splits both tracks into packets of packet_ms; nominal arrival of packet n is
// n * packet_ms (the moment its first sample starts arriving is not modelled;
// a packet is usable at its arrival time plus its duration, see stream engine).
std::vector<StreamPacket> audio_to_wire(const DyadicAudioFeatures& audio, double frame_ms,
                                        double packet_ms);

struct Dataset {
  WorldConfig config;
  std::vector<OracleEpisode> episodes;
  std::size_t total_motion_frames() const;
};

Dataset make_dataset(const WorldConfig& cfg, std::size_t episodes, std::size_t frames, Rng& rng);

inline constexpr std::uint16_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Dataset& ds);
std::filesystem::path manifest_path_for(const std::filesystem::path& dataset_path);

}  // namespace dystream
