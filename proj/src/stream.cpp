#include "dystream/stream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "binio.hpp"

namespace dystream {
namespace {

double wall_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void append_rows(std::deque<std::vector<double>>& buf, const Tensor& t) {
  for (std::size_t r = 0; r < t.rows(); ++r) buf.emplace_back(t.row(r).begin(), t.row(r).end());
}

Tensor rows_to_tensor(const std::deque<std::vector<double>>& rows, std::size_t begin, std::size_t end,
                      std::size_t cols) {
  Tensor t = Tensor::zeros(end - begin, cols);
  for (std::size_t r = begin; r < end; ++r) std::copy(rows[r].begin(), rows[r].end(), t.row(r - begin).begin());
  return t;
}

}  // namespace

void SamplerConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("sampler steps must be at least 1");
  const auto& g = guidance;
  for (double w : {g.w_s, g.w_l, g.w_r, g.w_all})
    if (!std::isfinite(w)) throw std::invalid_argument("guidance weights must be finite");
}

ConditionFlags branch_flags(Branch b) {
  switch (b) {
    case Branch::all: return {true, true, true};
    case Branch::speaker: return {true, false, false};
    case Branch::listener: return {false, true, false};
    case Branch::anchor: return {false, false, true};
    case Branch::uncond: return {false, false, false};
  }
  return {};
}

double branch_weight(Branch b, const GuidanceWeights& w) {
  switch (b) {
    case Branch::all: return w.w_all;
    case Branch::speaker: return w.w_s;
    case Branch::listener: return w.w_l;
    case Branch::anchor: return w.w_r;
    case Branch::uncond: return w.w_uncond();
  }
  return 0.0;
}

std::string to_string(Branch b) {
  switch (b) {
    case Branch::all: return "S,L,R";
    case Branch::speaker: return "S,0,0";
    case Branch::listener: return "0,L,0";
    case Branch::anchor: return "0,0,R";
    case Branch::uncond: return "0,0,0";
  }
  return "?";
}

Tensor cfg_combine(const BranchPredictions& p, const GuidanceWeights& w) {
  const std::vector<std::size_t>* shape = nullptr;
  for (const auto& m : p.m0) {
    if (!m) continue;
    if (shape && m->shape != *shape)
      throw ShapeError("guidance branches disagree: " + shape_string(*shape) + " vs " + shape_string(m->shape));
    shape = &m->shape;
  }
  if (!shape) throw std::invalid_argument("no branch predictions to combine");
  Tensor out(*shape, std::vector<double>(shape_product(*shape), 0.0));
  // Unconditional first, then the single-condition branches, then all.
  for (Branch b : {Branch::uncond, Branch::speaker, Branch::listener, Branch::anchor, Branch::all}) {
    const double wb = branch_weight(b, w);
    if (wb == 0.0) continue;
    const auto& m = p[b];
    if (!m) throw std::invalid_argument("missing prediction for branch (" + to_string(b) + ") with nonzero weight");
    for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] += wb * m->values[i];
  }
  return out;
}

Tensor euler_integrate(const SamplerConfig& sampler, const BranchDenoiser& denoise, Tensor noise) {
  sampler.validate();
  Tensor m = std::move(noise);
  const double s = static_cast<double>(sampler.steps);
  for (std::size_t k = 0; k < sampler.steps; ++k) {
    const double t = static_cast<double>(sampler.steps - k) / s;
    const double t_next = static_cast<double>(sampler.steps - k - 1) / s;
    BranchPredictions p;
    for (Branch b : kBranches)
      if (branch_weight(b, sampler.guidance) != 0.0) p[b] = denoise(b, m, t);
    const Tensor m0 = cfg_combine(p, sampler.guidance);
    const double keep = t_next / t;
    for (std::size_t i = 0; i < m.numel(); ++i) m.values[i] = keep * m.values[i] + (1.0 - keep) * m0.values[i];
  }
  return m;
}

Tensor euler_sample(const SamplerConfig& sampler, const BranchDenoiser& denoise, std::size_t rows,
                    std::size_t dim, Rng& rng) {
  Tensor noise = Tensor::zeros(rows, dim);
  for (auto& v : noise.values) v = rng.normal();
  return euler_integrate(sampler, denoise, std::move(noise));
}

// ------------------------------------------------------------------- rollout

Rollout::Rollout(const MotionModel& model, const SamplerConfig& sampler, const Tensor& anchor)
    : model_(model), sampler_(sampler), anchor_(anchor) {
  sampler_.validate();
  const auto& gc = model.config().generator;
  if (anchor.rows() != 1 || anchor.cols() != gc.motion_dim)
    throw ShapeError("anchor must be 1 x " + std::to_string(gc.motion_dim));
  const std::size_t k = gc.window_N - 1;
  for (std::size_t i = 0; i < k; ++i) history_.emplace_back(anchor.values);
  for (std::size_t i = 0; i + 1 < k; ++i) {
    speaker_.emplace_back(model.null_speaker().value.values);
    listener_.emplace_back(model.null_listener().value.values);
  }
}

std::vector<double> Rollout::step(std::span<const double> speaker_row, std::span<const double> listener_row) {
  const auto& cfg = model_.config();
  const auto& gc = cfg.generator;
  const std::size_t k = gc.window_N - 1;
  if (speaker_row.size() != cfg.speaker.model_dim || listener_row.size() != cfg.listener.model_dim)
    throw ShapeError("encoder row width does not match the model");
  {
    Graph g(false);
    const std::vector<double> s(speaker_row.begin(), speaker_row.end());
    const std::vector<double> l(listener_row.begin(), listener_row.end());
    speaker_.push_back(model_.project_speaker(g, g.constant(1, s.size(), s)).tensor().values);
    listener_.push_back(model_.project_listener(g, g.constant(1, l.size(), l)).tensor().values);
  }

  Graph g(false);
  Var history = g.constant(rows_to_tensor(history_, 0, k, gc.motion_dim));
  Var speaker = g.constant(rows_to_tensor(speaker_, 0, k, gc.ar_dim));
  Var listener = g.constant(rows_to_tensor(listener_, 0, k, gc.ar_dim));
  Var anchor = g.constant(anchor_);
  std::array<std::optional<Var>, 5> cond;
  for (Branch b : kBranches) {
    if (branch_weight(b, sampler_.guidance) == 0.0) continue;
    ConditionFlags flags = branch_flags(b);
    flags.anchor = flags.anchor && sampler_.anchor_token;
    Var c = model_.ar_forward(g, history, speaker, listener, anchor, flags);
    cond[static_cast<std::size_t>(b)] = ag::slice_rows(c, k - 1, k);
  }
  last_tokens_ = k + 1;

  Tensor frame;
  if (gc.deterministic_mode) {
    BranchPredictions p;
    for (Branch b : kBranches)
      if (const auto& c = cond[static_cast<std::size_t>(b)]) p[b] = model_.deterministic_predict(g, *c).tensor();
    frame = cfg_combine(p, sampler_.guidance);
  } else {
    Rng rng = Rng(sampler_.seed).split("sample").split(static_cast<std::uint64_t>(frame_));
    auto denoise = [&](Branch b, const Tensor& mt, double t) {
      Graph h(false);
      const Var c = h.constant(cond[static_cast<std::size_t>(b)]->tensor());
      return model_.head_denoise(h, h.constant(mt), {t}, c).tensor();
    };
    frame = euler_sample(sampler_, denoise, 1, gc.motion_dim, rng);
  }

  history_.push_back(frame.values);
  history_.pop_front();
  speaker_.pop_front();
  listener_.pop_front();
  ++frame_;
  return frame.values;
}

std::size_t motion_frames_for(const WorldConfig& world, std::size_t audio_frames) {
  return audio_frames / world.audio_frames_per_video_frame;
}

Tensor generate_offline(const MotionModel& model, const DyadicAudioFeatures& audio,
                        const SamplerConfig& sampler, const Tensor& anchor) {
  const auto& world = model.config().world;
  const std::size_t frames = motion_frames_for(world, audio.frames());
  if (frames == 0)
    throw std::invalid_argument("audio of " + std::to_string(audio.frames()) +
                                " frames is shorter than one motion frame");
  const Tensor s = model.speaker_encoder().encode(audio.speaker, 0);
  const Tensor l = model.listener_encoder().encode(audio.listener, 0);
  Rollout ro(model, sampler, anchor);
  Tensor out = Tensor::zeros(frames, model.config().generator.motion_dim);
  for (std::size_t i = 0; i < frames; ++i) {
    const auto row = ro.step(s.row(world.align(i)), l.row(world.align(i)));
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

// --------------------------------------------------------------------- trace

double LatencyTrace::fps() const {
  return compute_s > 0.0 ? static_cast<double>(records.size()) / compute_s : 0.0;
}

double LatencyTrace::mean_apd() const {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.apd_s;
  return s / static_cast<double>(records.size());
}

double LatencyTrace::max_apd() const {
  double m = 0.0;
  for (const auto& r : records) m = std::max(m, r.apd_s);
  return m;
}

double LatencyTrace::min_apd() const {
  if (records.empty()) return 0.0;
  double m = std::numeric_limits<double>::infinity();
  for (const auto& r : records) m = std::min(m, r.apd_s);
  return m;
}

double LatencyTrace::rtf() const { return audio_s > 0.0 ? compute_s / audio_s : 0.0; }

double LatencyTrace::mean_packet_processing_s() const {
  return packets ? compute_s / static_cast<double>(packets) : 0.0;
}

void LatencyTrace::write_csv(std::ostream& os) const {
  os << "frame,packet_arrival_s,emit_s,apd_s\n";
  for (const auto& r : records)
    os << r.frame << ',' << format_double(r.packet_arrival_s) << ',' << format_double(r.emit_s) << ','
       << format_double(r.apd_s) << '\n';
}

std::string LatencyTrace::summary() const {
  std::ostringstream os;
  os << "fps=" << format_double(fps()) << '\n'
     << "mean_apd_s=" << format_double(mean_apd()) << '\n'
     << "max_apd_s=" << format_double(max_apd()) << '\n'
     << "rtf=" << format_double(rtf()) << '\n'
     << "frames=" << records.size() << '\n'
     << "packets=" << packets << '\n'
     << "mean_packet_processing_s=" << format_double(mean_packet_processing_s()) << '\n';
  return os.str();
}

std::string validate_trace_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) return "empty trace";
  if (line != "frame,packet_arrival_s,emit_s,apd_s") return "bad header: " + line;
  std::size_t expected = 0;
  double last_emit = -std::numeric_limits<double>::infinity();
  double last_arrival = -std::numeric_limits<double>::infinity();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    const std::string where = "row " + std::to_string(expected) + ": ";
    if (f.size() != 4) return where + "expected 4 fields";
    double frame, arrival, emit, apd;
    try {
      std::size_t used = 0;
      frame = std::stod(f[0], &used);
      arrival = std::stod(f[1]);
      emit = std::stod(f[2]);
      apd = std::stod(f[3]);
    } catch (const std::exception&) {
      return where + "unparsable number";
    }
    if (frame != static_cast<double>(expected)) return where + "frame index not consecutive";
    if (emit < last_emit) return where + "emission time decreased";
    if (arrival < last_arrival) return where + "packet arrival time decreased";
    if (apd < 0.0) return where + "negative APD";
    if (std::abs(apd - (emit - arrival)) > 1e-9 * std::max(1.0, std::abs(emit))) return where + "APD != emit - arrival";
    last_emit = emit;
    last_arrival = arrival;
    ++expected;
  }
  return "";
}

ClockMode clock_mode_from_string(const std::string& s) {
  if (s == "virtual") return ClockMode::virtual_clock;
  if (s == "wall") return ClockMode::wall;
  throw std::invalid_argument("unknown clock '" + s + "' (expected virtual or wall)");
}

// ------------------------------------------------------------------- session

StreamSession::StreamSession(const MotionModel& model, const SamplerConfig& sampler, const Tensor& anchor,
                             StreamOptions opt)
    : model_(model), opt_(opt), rollout_(model, sampler, anchor) {
  const auto& cfg = model.config();
  const auto ls = cfg.speaker.effective_lookahead(), ll = cfg.listener.effective_lookahead();
  if (!ls || !ll) throw std::invalid_argument("streaming requires causal encoders (full-context mode cannot stream)");
  lookahead_ = std::max(*ls, *ll);
  wall_origin_ = wall_seconds();
}

double StreamSession::now() const {
  return opt_.clock == ClockMode::wall ? wall_seconds() - wall_origin_ : virtual_now_;
}

std::size_t StreamSession::generable_frames(const WorldConfig& world, std::size_t lookahead,
                                            std::size_t available) {
  // align(i) + L < available  <=>  (i + 1) * r <= available - L
  if (available < lookahead) return 0;
  return (available - lookahead) / world.audio_frames_per_video_frame;
}

std::vector<std::vector<double>> StreamSession::push(const StreamPacket& packet) {
  if (finished_) throw std::logic_error("stream already finished");
  if (received_ > 0 && !(packet.arrival_s > last_arrival_))
    throw std::runtime_error("out-of-order packet: arrival " + format_double(packet.arrival_s) +
                             " s is not after " + format_double(last_arrival_) + " s");
  if (packet.first_frame != received_)
    throw std::runtime_error("packet starts at audio frame " + std::to_string(packet.first_frame) +
                             " but " + std::to_string(received_) + " frames were received");
  const std::size_t dim = model_.config().world.audio_feature_dim;
  if (packet.speaker.cols() != dim || packet.listener.cols() != dim ||
      packet.speaker.rows() != packet.listener.rows())
    throw ShapeError("packet tracks must both be frames x " + std::to_string(dim));
  last_arrival_ = packet.arrival_s;
  if (opt_.clock == ClockMode::wall) {
    std::this_thread::sleep_until(std::chrono::steady_clock::time_point(
        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
            std::chrono::duration<double>(wall_origin_ + packet.arrival_s))));
  } else {
    virtual_now_ = std::max(virtual_now_, packet.arrival_s);
  }
  append_rows(speaker_buf_, packet.speaker);
  append_rows(listener_buf_, packet.listener);
  received_ += packet.speaker.rows();
  trace_.packets += 1;
  trace_.audio_s += static_cast<double>(packet.speaker.rows()) * model_.config().world.audio_frame_ms() / 1000.0;
  return generate_until(generable_frames(model_.config().world, lookahead_, received_), packet.arrival_s);
}

std::vector<std::vector<double>> StreamSession::finish() {
  if (finished_) throw std::logic_error("stream already finished");
  auto out = generate_until(motion_frames_for(model_.config().world, received_), std::max(last_arrival_, 0.0));
  finished_ = true;
  return out;
}

std::vector<std::vector<double>> StreamSession::generate_until(std::size_t end, double arrival_s) {
  std::vector<std::vector<double>> out;
  const std::size_t next = rollout_.next_frame();
  if (end <= next) return out;
  const auto& cfg = model_.config();
  const auto& world = cfg.world;
  const bool fixed = opt_.fixed_frame_cost_ms.has_value();

  double t0 = wall_seconds();
  // Window start: far enough back to cover every row that influences align(next).
  std::size_t ws = 0;
  const auto ps = cfg.speaker.receptive_past(), pl = cfg.listener.receptive_past();
  if (ps && pl) {
    const std::size_t past = std::max(*ps, *pl);
    ws = world.align(next) > past ? world.align(next) - past : 0;
  }
  ws = std::max(ws, buffer_start_);
  const std::size_t dim = world.audio_feature_dim;
  const Tensor s = model_.speaker_encoder().encode(
      rows_to_tensor(speaker_buf_, ws - buffer_start_, received_ - buffer_start_, dim), ws);
  const Tensor l = model_.listener_encoder().encode(
      rows_to_tensor(listener_buf_, ws - buffer_start_, received_ - buffer_start_, dim), ws);
  double t1 = wall_seconds();
  const double encode_cost = fixed ? 0.0 : t1 - t0;
  trace_.compute_s += encode_cost;
  if (opt_.clock == ClockMode::virtual_clock) virtual_now_ += encode_cost;

  for (std::size_t i = next; i < end; ++i) {
    t0 = wall_seconds();
    out.push_back(rollout_.step(s.row(world.align(i) - ws), l.row(world.align(i) - ws)));
    t1 = wall_seconds();
    const double cost = fixed ? *opt_.fixed_frame_cost_ms / 1000.0 : t1 - t0;
    trace_.compute_s += cost;
    if (opt_.clock == ClockMode::virtual_clock) virtual_now_ += cost;
    const double emit = now();
    trace_.records.push_back({i, arrival_s, emit, emit - arrival_s});
  }

  // Drop audio no future frame can reach.
  if (ps && pl) {
    const std::size_t past = std::max(*ps, *pl);
    const std::size_t a = world.align(end);
    const std::size_t keep_from = a > past ? a - past : 0;
    while (buffer_start_ < keep_from && !speaker_buf_.empty()) {
      speaker_buf_.pop_front();
      listener_buf_.pop_front();
      ++buffer_start_;
    }
  }
  return out;
}

StreamResult run_stream(const MotionModel& model, const std::vector<StreamPacket>& packets,
                        const SamplerConfig& sampler, const Tensor& anchor, StreamOptions opt) {
  const double frame_period_ms = 1000.0 / model.config().world.video_fps();
  for (std::size_t p = 0; p + 1 < packets.size(); ++p)
    if (packets[p].duration_ms + 1e-9 < frame_period_ms)
      throw std::invalid_argument("packet duration " + format_double(packets[p].duration_ms) +
                                  " ms is shorter than one motion frame");
  StreamSession session(model, sampler, anchor, opt);
  std::vector<std::vector<double>> frames;
  StreamResult res;
  for (std::size_t p = 0; p < packets.size(); ++p) {
    auto f = session.push(packets[p]);
    if (p == 0) res.first_packet_frames = f.size();
    for (auto& row : f) frames.push_back(std::move(row));
  }
  for (auto& row : session.finish()) frames.push_back(std::move(row));
  const std::size_t dim = model.config().generator.motion_dim;
  res.motion = Tensor::zeros(frames.size(), dim);
  for (std::size_t i = 0; i < frames.size(); ++i) std::copy(frames[i].begin(), frames[i].end(), res.motion.row(i).begin());
  res.trace = session.trace();
  return res;
}

LatencyTrace simulate_chunk_baseline(double chunk_s, std::size_t motion_frames, double frame_period_s,
                                     const ChunkComputeModel& compute) {
  if (!(chunk_s > 0.0)) throw std::invalid_argument("chunk duration must be positive");
  if (!(frame_period_s > 0.0)) throw std::invalid_argument("frame period must be positive");
  const auto per_chunk = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(chunk_s / frame_period_s)));
  const double chunk_dur = static_cast<double>(per_chunk) * frame_period_s;
  LatencyTrace tr;
  double busy_until = 0.0;  // one processor: chunks are computed in order
  double last_emit = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c * per_chunk < motion_frames; ++c) {
    const std::size_t begin = c * per_chunk, end = std::min(motion_frames, begin + per_chunk);
    const double start = static_cast<double>(begin) * frame_period_s;
    const double cost = compute ? compute(end - begin) : 0.0;
    if (cost < 0.0) throw std::invalid_argument("chunk compute time must be nonnegative");
    // The chunk is complete one chunk duration after its first audio arrives
    // (a trailing partial chunk still waits, as the stream end is unknown).
    const double ready = std::max(start + chunk_dur, busy_until) + cost;
    busy_until = ready;
    for (std::size_t i = begin; i < end; ++i) {
      const double arrival = start + static_cast<double>(i - begin) * frame_period_s;
      // Playback is sequential at the video rate.
      const double emit = i == begin ? std::max(ready, last_emit + frame_period_s) : last_emit + frame_period_s;
      last_emit = emit;
      tr.records.push_back({i, arrival, emit, emit - arrival});
    }
    tr.compute_s += cost;
    tr.packets += 1;
  }
  tr.audio_s = static_cast<double>(motion_frames) * frame_period_s;
  return tr;
}

std::vector<StreamPacket> read_packet_stream(std::istream& is, std::size_t audio_dim, double frame_ms,
                                             double packet_ms) {
  std::vector<StreamPacket> out;
  std::size_t first = 0;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto bytes = binio::get<std::uint32_t>(is);
    const std::size_t row_bytes = 2 * audio_dim * 4;
    if (bytes == 0 || bytes % row_bytes != 0)
      throw binio::FormatError("packet payload of " + std::to_string(bytes) + " bytes is not a whole number of " +
                               std::to_string(audio_dim) + "-dim speaker+listener frames");
    const std::size_t frames = bytes / row_bytes;
    StreamPacket p;
    p.arrival_s = static_cast<double>(out.size()) * packet_ms / 1000.0;
    p.duration_ms = static_cast<double>(frames) * frame_ms;
    p.first_frame = first;
    p.speaker = Tensor({frames, audio_dim}, binio::get_f32_array(is, frames * audio_dim));
    p.listener = Tensor({frames, audio_dim}, binio::get_f32_array(is, frames * audio_dim));
    first += frames;
    out.push_back(std::move(p));
  }
  return out;
}

void write_packet_stream(std::ostream& os, const std::vector<StreamPacket>& packets) {
  for (const auto& p : packets) {
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>((p.speaker.numel() + p.listener.numel()) * 4));
    binio::put_f32_array(os, p.speaker.values);
    binio::put_f32_array(os, p.listener.values);
  }
}

}  // namespace dystream
