// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "dystream/experiments.hpp"
#include "support.hpp"

using namespace dystream;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs per-seed trials until the majority of `seeds` is decided either way.
template <class Trial>
std::pair<std::size_t, std::size_t> majority_vote(std::size_t seeds, std::size_t needed, Trial&& trial) {
  std::size_t passed = 0, run = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    passed += trial(s) ? 1 : 0;
    ++run;
    if (passed >= needed || run - passed > seeds - needed) break;
  }
  return {passed, run};
}

Outcome causality_bound() {
  Stopwatch sw;
  RunConfig rc = desk_config(0);
  rc.teacher.steps = 40;
  rc.distill.steps = 20;
  rc.episodes = 8;
  const Dataset data = make_training_data(rc);
  const auto teacher = train_teacher(rc, data);
  Rng rng(101);
  std::ostringstream detail;
  bool ok = true;
  for (std::size_t L = 0; L <= 3; ++L) {
    const auto student = distill_encoder(rc, *teacher, L, data);
    const AudioEncoder& enc = student->encoder;
    const std::size_t frames = 80;
    const Tensor audio = test::random_tensor(frames, rc.model.world.audio_feature_dim, rng);
    const Tensor base = enc.encode(audio);
    std::size_t invariant = 0, edge_changed = 0;
    for (int probe = 0; probe < 100; ++probe) {
      const std::size_t i = rng.below(frames - L - 1);
      Tensor far = audio;
      for (std::size_t f = i + L + 1; f < frames; ++f)
        for (std::size_t c = 0; c < far.cols(); ++c) far.at(f, c) = 2.0 * rng.normal();
      const Tensor out = enc.encode(far);
      bool same = true;
      for (std::size_t r = 0; r <= i; ++r) same = same && test::bitwise_equal(out.row(r), base.row(r));
      invariant += same;
      Tensor edge = audio;
      edge.at(i + L, rng.below(edge.cols())) += 1.0 + rng.uniform();
      edge_changed += !test::bitwise_equal(enc.encode(edge).row(i), base.row(i));
    }
    ok = ok && invariant == 100 && (L == 0 || edge_changed > 0);
    detail << "L=" << L << " invariant " << invariant << "/100 edge-sensitive " << edge_changed << "/100; ";
  }
  const double t = sw.seconds();
  detail << fmt("%.1f s", t);
  return {ok && t < 60.0, detail.str()};
}

Outcome lookahead_trend() {
  Stopwatch sw;
  std::ostringstream detail;
  const auto [passed, run] = majority_vote(5, 3, [&](std::size_t seed) {
    RunConfig rc = desk_config(seed);
    rc.model.world.coart_lag_q = 2;
    const auto rows = run_lookahead_ablation(rc, {0, 1, 2, 3, 4});
    const double s0 = rows[0].sync_proxy, s1 = rows[1].sync_proxy, s2 = rows[2].sync_proxy,
                 s4 = rows[4].sync_proxy;
    const bool ok = s1 > s0 && s2 > s1 && s2 - s0 >= 0.1 && std::abs(s4 - s2) <= 0.05;
    detail << fmt("seed %zu: %.3f %.3f %.3f %.3f %.3f %s; ", seed, s0, s1, s2, rows[3].sync_proxy, s4,
                  ok ? "ok" : "no");
    std::fflush(stdout);
    return ok;
  });
  const double t = sw.seconds();
  detail << fmt("%zu/%zu seeds satisfy, %.0f s", passed, run, t);
  return {passed >= 3 && t < 1800.0, detail.str()};
}

Outcome cfg_algebra() {
  BranchPredictions p;
  Rng rng(3);
  for (Branch b : kBranches) p[b] = test::random_tensor(3, 4, rng);
  bool ok = cfg_combine(p, {0, 0, 0, 1}) == *p[Branch::all] && cfg_combine(p, {0, 0, 0, 0}) == *p[Branch::uncond];
  BranchPredictions example;
  for (Branch b : kBranches) example[b] = Tensor::filled(1, 1, b == Branch::speaker ? 2.0 : 0.0);
  const Tensor v = cfg_combine(example, {0.5, 0.5, 0.5, 1.0});
  ok = ok && v.values[0] == 1.0;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GuidanceWeights w{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    double sum = 0.0;
    for (Branch b : kBranches) sum += branch_weight(b, w);
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  ok = ok && worst <= 1e-12;
  return {ok, fmt("worked example %.17g, max |sum - 1| over 1000 draws %.2e", v.values[0], worst)};
}

Outcome euler_sampler() {
  const WorldConfig w = test::tiny_world();
  Rng rng(4);
  MotionModel model(test::tiny_model(w), rng);
  test::randomize(model.params(), rng, 0.3);
  std::array<Tensor, 5> cond;
  for (auto& c : cond) c = test::random_tensor(1, model.config().generator.ar_dim, rng);
  const auto head = [&](Branch b, const Tensor& mt, double t) {
    Graph g(false);
    return model.head_denoise(g, g.constant(mt), {t}, g.constant(cond[static_cast<std::size_t>(b)])).tensor();
  };
  SamplerConfig one;
  one.steps = 1;
  const Tensor noise = test::random_tensor(1, w.motion_dim, rng);
  BranchPredictions at_one;
  for (Branch b : kBranches) at_one[b] = head(b, noise, 1.0);
  bool ok = euler_integrate(one, head, noise) == cfg_combine(at_one, one.guidance);

  const Tensor k = test::random_tensor(1, w.motion_dim, rng);
  const auto constant = [&](Branch, const Tensor&, double) { return k; };
  double worst = 0.0;
  for (std::size_t steps : {1u, 5u, 10u}) {
    SamplerConfig s;
    s.steps = steps;
    Rng r(steps);
    const Tensor out = euler_sample(s, constant, 1, w.motion_dim, r);
    for (std::size_t i = 0; i < out.numel(); ++i) worst = std::max(worst, std::abs(out.values[i] - k.values[i]));
  }
  ok = ok && worst <= 1e-10;
  return {ok, fmt("one step equals guided prediction: %s, constant model max error %.2e",
                  ok ? "yes" : "no", worst)};
}

Outcome flow_objective() {
  Stopwatch sw;
  Rng rng(5);
  const Tensor m = test::random_tensor(2, 4, rng);
  bool ok;
  {
    Graph g;
    ok = flow_loss(g.constant(m), g.constant(m)).item() == 0.0;
  }
  std::ostringstream detail;
  const WorldConfig w = test::tiny_world();
  for (bool deterministic : {false, true}) {
    ModelConfig mc = test::tiny_model(w, 2);
    mc.generator.deterministic_mode = deterministic;
    Rng r(6);
    MotionModel model(mc, r);
    test::randomize(model.params(), r, 0.3);
    const auto inst = test::TwoFrameInstance::make(mc, r);
    const auto gc = test::check_gradients(model.params(), [&](Graph& g) { return inst.loss(model, g); });
    ok = ok && gc.max_rel_error < 1e-4;
    detail << (deterministic ? "deterministic" : "flow head") << fmt(" max rel %.2e over %zu; ", gc.max_rel_error,
                                                                     gc.checked);
  }
  const double t = sw.seconds();
  detail << fmt("%.1f s", t);
  return {ok && t < 60.0, detail.str()};
}

Outcome anchor_drift() {
  Stopwatch sw;
  std::ostringstream detail;
  const auto [passed, run] = majority_vote(5, 3, [&](std::size_t seed) {
    const RunConfig rc = desk_config(seed);
    const double last10 = anchor_drift_experiment(rc, AnchorMode::last10, 500);
    const double random = anchor_drift_experiment(rc, AnchorMode::random, 500);
    const double none = anchor_drift_experiment(rc, AnchorMode::none, 500);
    const bool ok = last10 < random && random < none && last10 <= 0.5 * none;
    detail << fmt("seed %zu: last10 %.3f random %.3f none %.3f %s; ", seed, last10, random, none, ok ? "ok" : "no");
    return ok;
  });
  const double t = sw.seconds();
  detail << fmt("%zu/%zu seeds satisfy, %.0f s", passed, run, t);
  return {passed >= 3 && t < 1200.0, detail.str()};
}

Outcome flow_head_diversity() {
  RunConfig rc = desk_config(0);
  rc.model.world.noise_scale = 0.3;
  const auto flow = diversity_experiment(rc, false);
  const auto det = diversity_experiment(rc, true);
  const bool ok = flow.var_pose >= 1.1 * det.var_pose && flow.sid_pose > det.sid_pose &&
                  std::abs(flow.sync_proxy - det.sync_proxy) <= 0.05;
  return {ok, fmt("Var_pose %.4f vs %.4f (x%.2f), SID_pose %.3f vs %.3f, sync %.4f vs %.4f", flow.var_pose,
                  det.var_pose, flow.var_pose / det.var_pose, flow.sid_pose, det.sid_pose, flow.sync_proxy,
                  det.sync_proxy)};
}

Outcome online_offline() {
  RunConfig rc = desk_config(0);
  rc.eval_episodes = 2;
  rc.eval_frames = 100;
  const Dataset eval = make_eval_data(rc);
  const auto& ep = eval.episodes[0];
  const Tensor anchor = ep.motion.slice_rows(0, 1);
  const double frame_ms = rc.model.world.audio_frame_ms();
  bool equal = true, first = true;
  std::size_t min_first = 1000;
  for (std::size_t L = 0; L <= 3; ++L) {
    ModelConfig mc = rc.model;
    mc.speaker.lookahead = L;
    Rng rng(10 + L);
    MotionModel model(mc, rng);
    test::randomize(model.params(), rng, 0.2);
    const Tensor offline = generate_offline(model, ep.audio, rc.sampler, anchor);
    for (double packet_ms : {40.0, 100.0, 160.0}) {
      const auto res = run_stream(model, audio_to_wire(ep.audio, frame_ms, packet_ms), rc.sampler, anchor);
      equal = equal && res.motion == offline;
      if (packet_ms == 100.0) {
        first = first && res.first_packet_frames >= 1;
        min_first = std::min(min_first, res.first_packet_frames);
      }
    }
  }
  // Throughput of the trained desk-scale model on the wall clock.
  RunConfig tr = rc;
  tr.train.steps = 100;
  const auto model = train_model(tr, make_training_data(tr), nullptr, nullptr);
  StreamOptions wall;
  wall.clock = ClockMode::wall;
  const auto res = run_stream(*model, audio_to_wire(ep.audio, frame_ms, 100.0), rc.sampler, anchor, wall);
  const double per_packet = res.trace.mean_packet_processing_s();
  const bool ok = equal && first && res.trace.rtf() < 1.0 && per_packet < 0.1;
  return {ok, fmt("bitwise equal %s, first 100 ms packet emits >= %zu frame(s), RTF %.3f, %.1f ms per packet",
                  equal ? "yes" : "no", min_first, res.trace.rtf(), 1000.0 * per_packet)};
}

Outcome chunk_baseline() {
  RunConfig rc = desk_config(0);
  rc.eval_episodes = 1;
  rc.eval_frames = 250;
  const Dataset eval = make_eval_data(rc);
  const auto& ep = eval.episodes[0];
  Rng rng(12);
  MotionModel model(rc.model, rng);
  const double packet_s = 0.1;
  const auto packets = audio_to_wire(ep.audio, rc.model.world.audio_frame_ms(), 1000.0 * packet_s);
  const auto frame = run_stream(model, packets, rc.sampler, ep.motion.slice_rows(0, 1));
  const double per_frame = frame.trace.compute_s / static_cast<double>(frame.trace.records.size());
  const double frame_period = 1.0 / rc.model.world.video_fps();
  const auto chunk = simulate_chunk_baseline(0.96, ep.frames(), frame_period,
                                             [&](std::size_t n) { return per_frame * static_cast<double>(n); });
  std::ostringstream a, b;
  frame.trace.write_csv(a);
  chunk.write_csv(b);
  std::istringstream ia(a.str()), ib(b.str());
  const std::string va = validate_trace_csv(ia), vb = validate_trace_csv(ib);
  const double bound = packet_s + frame.trace.mean_packet_processing_s();
  const bool ok = chunk.mean_apd() >= 0.96 && frame.trace.mean_apd() <= bound && va.empty() && vb.empty();
  return {ok, fmt("chunk mean APD %.3f s, frame-based mean APD %.4f s (bound %.4f s), traces %s", chunk.mean_apd(),
                  frame.trace.mean_apd(), bound, va.empty() && vb.empty() ? "valid" : (va + vb).c_str())};
}

Outcome metric_oracles() {
  // Moment-matched samples: means 0 and 1.5, unbiased variances 2 and 8.
  const Tensor a = Tensor::from_rows({{-1.0}, {1.0}, {-1.0}, {1.0}});
  const Tensor b = Tensor::from_rows({{-0.5}, {3.5}, {-0.5}, {3.5}});
  const double va = 4.0 / 3.0, vb = 16.0 / 3.0;
  const double closed = 1.5 * 1.5 + std::pow(std::sqrt(va) - std::sqrt(vb), 2);
  const double fd = frechet_distance(a, b);

  KMeans km;
  bool sid_ok = true;
  double sid_err = 0.0;
  for (std::size_t k : {2u, 4u, 8u}) {
    km.centroids = Tensor::zeros(k, 1);
    Tensor motion = Tensor::zeros(8 * k * 3, 1);
    for (std::size_t c = 0; c < k; ++c) km.centroids.at(c, 0) = 10.0 * static_cast<double>(c);
    for (std::size_t r = 0; r < motion.rows(); ++r) motion.at(r, 0) = 10.0 * static_cast<double>((r / 8) % k);
    const double e = std::abs(sid_metric({motion}, {0}, km, 8) - std::log(static_cast<double>(k)));
    sid_err = std::max(sid_err, e);
    sid_ok = sid_ok && e <= 1e-9;
  }

  Rng rng(13);
  const Tensor ref = test::random_tensor(80, 2, rng);
  Tensor lagged = test::random_tensor(80, 2, rng);
  for (std::size_t i = 2; i < 80; ++i)
    for (std::size_t c = 0; c < 2; ++c) lagged.at(i, c) = ref.at(i - 2, c);
  const auto sync = sync_proxy(lagged, ref, 4);
  const bool ok = std::abs(fd - closed) <= 1e-6 && sid_ok && sync.offset == -2;
  return {ok, fmt("FD %.12f vs closed form %.12f, SID max error %.1e, recovered offset %d", fd, closed, sid_err,
                  sync.offset)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"causality bound", causality_bound},
      {"lookahead trend", lookahead_trend},
      {"guidance algebra", cfg_algebra},
      {"Euler sampler", euler_sampler},
      {"flow objective and gradients", flow_objective},
      {"anchor anti-drift", anchor_drift},
      {"flow-head diversity", flow_head_diversity},
      {"online/offline equivalence and latency", online_offline},
      {"chunk-baseline APD", chunk_baseline},
      {"metric oracles", metric_oracles},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
