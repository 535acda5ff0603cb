#include "dystream/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "binio.hpp"

namespace dystream {
namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_tensor(Tensor& t) {
  for (double& v : t.values) v = to_f32(v);
}

Tensor smooth_track(std::size_t frames, std::size_t dim, double rho, Rng& rng) {
  Tensor t = Tensor::zeros(frames, dim);
  const double innov = std::sqrt(1.0 - rho * rho);
  for (std::size_t c = 0; c < dim; ++c) {
    double x = rng.normal();
    for (std::size_t f = 0; f < frames; ++f) {
      if (f > 0) x = rho * x + innov * rng.normal();
      t.at(f, c) = std::clamp(x, -3.0, 3.0);
    }
  }
  return t;
}

}  // namespace

void WorldConfig::validate() const {
  if (motion_dim < 4) throw std::invalid_argument("motion_dim must be at least 4");
  if (audio_feature_dim == 0) throw std::invalid_argument("audio_feature_dim must be positive");
  if (audio_frames_per_video_frame == 0)
    throw std::invalid_argument("audio_frames_per_video_frame must be positive");
  if (listener_delay_p < 1) throw std::invalid_argument("listener_delay_p must be >= 1");
  if (listener_taps < 1) throw std::invalid_argument("listener_taps must be >= 1");
  if (!(drift_coeff > 0.0 && drift_coeff < 1.0))
    throw std::invalid_argument("drift_coeff must lie strictly inside (0, 1)");
  if (noise_scale < 0.0 || rest_scale < 0.0) throw std::invalid_argument("negative scale");
  if (!(audio_smoothing >= 0.0 && audio_smoothing < 1.0))
    throw std::invalid_argument("audio_smoothing must lie in [0, 1)");
}

void WorldConfig::to_kv(KeyValues& kv) const {
  kv.set("world.motion_dim", motion_dim);
  kv.set("world.audio_feature_dim", audio_feature_dim);
  kv.set("world.audio_frames_per_video_frame", audio_frames_per_video_frame);
  kv.set("world.coart_lag_q", coart_lag_q);
  kv.set("world.mouth_past_frames", mouth_past_frames);
  kv.set("world.listener_delay_p", listener_delay_p);
  kv.set("world.listener_taps", listener_taps);
  kv.set("world.noise_scale", noise_scale);
  kv.set("world.drift_coeff", drift_coeff);
  kv.set("world.audio_smoothing", audio_smoothing);
  kv.set("world.rest_scale", rest_scale);
  kv.set("world.listener_gain", listener_gain);
  kv.set("world.seed", seed);
}

WorldConfig WorldConfig::from_kv(const KeyValues& kv) {
  WorldConfig c;
  kv.read("world.motion_dim", c.motion_dim);
  kv.read("world.audio_feature_dim", c.audio_feature_dim);
  kv.read("world.audio_frames_per_video_frame", c.audio_frames_per_video_frame);
  kv.read("world.coart_lag_q", c.coart_lag_q);
  kv.read("world.mouth_past_frames", c.mouth_past_frames);
  kv.read("world.listener_delay_p", c.listener_delay_p);
  kv.read("world.listener_taps", c.listener_taps);
  kv.read("world.noise_scale", c.noise_scale);
  kv.read("world.drift_coeff", c.drift_coeff);
  kv.read("world.audio_smoothing", c.audio_smoothing);
  kv.read("world.rest_scale", c.rest_scale);
  kv.read("world.listener_gain", c.listener_gain);
  kv.read("world.seed", c.seed);
  return c;
}

World::World(const WorldConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng maps = Rng(cfg_.seed).split("world-maps");
  const std::size_t taps = cfg_.mouth_past_frames + 1 + cfg_.coart_lag_q;
  const std::size_t d = cfg_.audio_feature_dim;
  const double mouth_sd = 1.0 / std::sqrt(static_cast<double>(taps * d));
  mouth_map_.resize(taps * d * cfg_.mouth_count());
  for (double& w : mouth_map_) w = mouth_sd * maps.normal();
  const double listen_sd =
      cfg_.listener_gain / std::sqrt(static_cast<double>(cfg_.listener_taps * d));
  listener_map_.resize(cfg_.listener_taps * d * cfg_.pose_count());
  for (double& w : listener_map_) w = listen_sd * maps.normal();
}

Tensor World::mouth_signal(const Tensor& speaker, std::size_t motion_frames) const {
  const std::size_t mc = cfg_.mouth_count();
  const std::size_t d = cfg_.audio_feature_dim;
  const std::size_t taps = cfg_.mouth_past_frames + 1 + cfg_.coart_lag_q;
  const long audio_frames = static_cast<long>(speaker.rows());
  Tensor out = Tensor::zeros(motion_frames, mc);
  for (std::size_t i = 0; i < motion_frames; ++i) {
    const long center = static_cast<long>(cfg_.align(i));
    for (std::size_t t = 0; t < taps; ++t) {
      const long a = center - static_cast<long>(cfg_.mouth_past_frames) + static_cast<long>(t);
      if (a < 0 || a >= audio_frames) continue;
      for (std::size_t f = 0; f < d; ++f) {
        const double x = speaker.at(static_cast<std::size_t>(a), f);
        const double* w = &mouth_map_[(t * d + f) * mc];
        for (std::size_t c = 0; c < mc; ++c) out.at(i, c) += w[c] * x;
      }
    }
  }
  return out;
}

Tensor World::listener_response(const Tensor& listener, std::size_t motion_frames) const {
  const std::size_t pc = cfg_.pose_count();
  const std::size_t d = cfg_.audio_feature_dim;
  Tensor out = Tensor::zeros(motion_frames, pc);
  for (std::size_t i = 0; i < motion_frames; ++i) {
    const long center = static_cast<long>(cfg_.align(i));
    for (std::size_t t = 0; t < cfg_.listener_taps; ++t) {
      const long a = center - static_cast<long>(cfg_.listener_delay_p + t);
      if (a < 0) continue;
      for (std::size_t f = 0; f < d; ++f) {
        const double x = listener.at(static_cast<std::size_t>(a), f);
        const double* w = &listener_map_[(t * d + f) * pc];
        for (std::size_t c = 0; c < pc; ++c) out.at(i, c) += w[c] * x;
      }
    }
  }
  return out;
}

OracleEpisode World::generate_episode(std::size_t frames, Rng& rng) const {
  if (frames < 2) throw std::invalid_argument("episodes need at least 2 frames");
  const std::size_t r = cfg_.audio_frames_per_video_frame;
  const std::size_t audio_frames = frames * r;
  Rng speaker_rng = rng.split("speaker");
  Rng listener_rng = rng.split("listener");
  Rng pose_rng = rng.split("pose");

  OracleEpisode ep;
  ep.audio.frame_period_s = cfg_.audio_frame_ms() / 1000.0;
  ep.audio.speaker = smooth_track(audio_frames, cfg_.audio_feature_dim, cfg_.audio_smoothing, speaker_rng);
  ep.audio.listener = smooth_track(audio_frames, cfg_.audio_feature_dim, cfg_.audio_smoothing, listener_rng);
  round_tensor(ep.audio.speaker);
  round_tensor(ep.audio.listener);

  const std::size_t mc = cfg_.mouth_count();
  const std::size_t pc = cfg_.pose_count();
  ep.deterministic_mouth_signal = mouth_signal(ep.audio.speaker, frames);
  round_tensor(ep.deterministic_mouth_signal);
  for (std::size_t c = 0; c < mc; ++c) ep.mouth_channels.push_back(c);

  const Tensor listen = listener_response(ep.audio.listener, frames);
  std::vector<double> rest(pc), drift(pc);
  const double rho = cfg_.drift_coeff;
  const double stationary = cfg_.noise_scale / std::sqrt(1.0 - rho * rho);
  for (std::size_t c = 0; c < pc; ++c) rest[c] = cfg_.rest_scale * pose_rng.normal();
  for (std::size_t c = 0; c < pc; ++c) drift[c] = stationary * pose_rng.normal();

  ep.motion = Tensor::zeros(frames, cfg_.motion_dim);
  for (std::size_t i = 0; i < frames; ++i) {
    if (i > 0)
      for (std::size_t c = 0; c < pc; ++c) drift[c] = rho * drift[c] + cfg_.noise_scale * pose_rng.normal();
    for (std::size_t c = 0; c < mc; ++c) ep.motion.at(i, c) = ep.deterministic_mouth_signal.at(i, c);
    for (std::size_t c = 0; c < pc; ++c)
      ep.motion.at(i, mc + c) = to_f32(rest[c] + listen.at(i, c) + drift[c]);
  }
  return ep;
}

OracleEpisode generate_episode(const WorldConfig& cfg, std::size_t frames, Rng& rng) {
  return World(cfg).generate_episode(frames, rng);
}

std::vector<StreamPacket> audio_to_wire(const DyadicAudioFeatures& audio, double frame_ms,
                                        double packet_ms) {
  if (!(packet_ms > 0.0) || !(frame_ms > 0.0))
    throw std::invalid_argument("packet and frame durations must be positive");
  const double ratio = packet_ms / frame_ms;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio))
    throw std::invalid_argument("packet_ms must be a positive multiple of the audio frame period");
  const std::size_t per = static_cast<std::size_t>(rounded);
  std::vector<StreamPacket> out;
  const std::size_t total = audio.frames();
  for (std::size_t start = 0, n = 0; start < total; start += per, ++n) {
    const std::size_t end = std::min(total, start + per);
    StreamPacket p;
    p.arrival_s = static_cast<double>(n) * packet_ms / 1000.0;
    p.duration_ms = static_cast<double>(end - start) * frame_ms;
    p.first_frame = start;
    p.speaker = audio.speaker.slice_rows(start, end);
    p.listener = audio.listener.slice_rows(start, end);
    out.push_back(std::move(p));
  }
  return out;
}

std::size_t Dataset::total_motion_frames() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.frames();
  return n;
}

Dataset make_dataset(const WorldConfig& cfg, std::size_t episodes, std::size_t frames, Rng& rng) {
  if (episodes == 0 || frames == 0) throw std::invalid_argument("episode and frame counts must be positive");
  World world(cfg);
  Dataset ds;
  ds.config = cfg;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng er = rng.split(e);
    ds.episodes.push_back(world.generate_episode(frames, er));
  }
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("DYSW", 4);
  binio::put<std::uint16_t>(os, kDatasetVersion);
  KeyValues kv;
  ds.config.to_kv(kv);
  binio::put_string32(os, kv.format());
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.episodes.size()));
  for (const auto& ep : ds.episodes) {
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ep.frames()));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ep.audio.frames()));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ep.audio.speaker.cols()));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ep.motion.cols()));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ep.mouth_channels.size()));
    for (auto c : ep.mouth_channels) binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(c));
    binio::put_f32_array(os, ep.audio.speaker.values);
    binio::put_f32_array(os, ep.audio.listener.values);
    binio::put_f32_array(os, ep.motion.values);
    binio::put_f32_array(os, ep.deterministic_mouth_signal.values);
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  binio::expect_magic(is, "DYSW");
  const auto version = binio::get<std::uint16_t>(is);
  if (version != kDatasetVersion)
    throw binio::FormatError("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.config = WorldConfig::from_kv(KeyValues::parse(binio::get_string32(is)));
  const auto count = binio::get<std::uint32_t>(is);
  const double frame_s = ds.config.audio_frame_ms() / 1000.0;
  for (std::uint32_t e = 0; e < count; ++e) {
    OracleEpisode ep;
    const std::size_t frames = binio::get<std::uint32_t>(is);
    const std::size_t audio_frames = binio::get<std::uint32_t>(is);
    const std::size_t audio_dim = binio::get<std::uint32_t>(is);
    const std::size_t motion_dim = binio::get<std::uint32_t>(is);
    const std::size_t mouth = binio::get<std::uint32_t>(is);
    if (mouth > motion_dim) throw binio::FormatError("mouth channel count exceeds motion_dim");
    for (std::size_t i = 0; i < mouth; ++i) ep.mouth_channels.push_back(binio::get<std::uint32_t>(is));
    ep.audio.frame_period_s = frame_s;
    ep.audio.speaker = Tensor({audio_frames, audio_dim}, binio::get_f32_array(is, audio_frames * audio_dim));
    ep.audio.listener = Tensor({audio_frames, audio_dim}, binio::get_f32_array(is, audio_frames * audio_dim));
    ep.motion = Tensor({frames, motion_dim}, binio::get_f32_array(is, frames * motion_dim));
    ep.deterministic_mouth_signal = Tensor({frames, mouth}, binio::get_f32_array(is, frames * mouth));
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& dataset_path) {
  std::filesystem::path p = dataset_path;
  p += ".manifest";
  return p;
}

void write_manifest(const std::filesystem::path& path, const Dataset& ds) {
  KeyValues kv;
  ds.config.to_kv(kv);
  kv.set("dataset.format_version", static_cast<std::uint64_t>(kDatasetVersion));
  kv.set("dataset.episodes", static_cast<std::uint64_t>(ds.episodes.size()));
  kv.set("dataset.total_motion_frames", static_cast<std::uint64_t>(ds.total_motion_frames()));
  kv.set("dataset.mouth_channels", "0.." + std::to_string(ds.config.mouth_count() - 1));
  kv.save(path);
}

}  // namespace dystream
