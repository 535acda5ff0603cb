#include <array>
#include <cmath>

#include "doctest.h"
#include "dystream/generator.hpp"
#include "support.hpp"

using namespace dystream;

namespace {

struct Inputs {
  Tensor history, speaker, listener, anchor;
};

Inputs random_inputs(const ModelConfig& mc, std::size_t k, Rng& rng) {
  return {test::random_tensor(k, mc.generator.motion_dim, rng), test::random_tensor(k, mc.generator.ar_dim, rng),
          test::random_tensor(k, mc.generator.ar_dim, rng), test::random_tensor(1, mc.generator.motion_dim, rng)};
}

Tensor conditions(const MotionModel& m, const Inputs& in, ConditionFlags flags) {
  Graph g(false);
  return m.ar_forward(g, g.constant(in.history), g.constant(in.speaker), g.constant(in.listener),
                      g.constant(in.anchor), flags)
      .tensor();
}

}  // namespace

TEST_CASE("generator config validation") {
  GeneratorConfig g;
  g.validate();
  g.window_N = 10;
  CHECK_THROWS(g.validate());
  g.window_N = 11;
  g.validate();
  g.ar_heads = 3;
  CHECK_THROWS(g.validate());
  KeyValues kv;
  ModelConfig mc = test::tiny_model(test::tiny_world());
  mc.generator.deterministic_mode = true;
  mc.to_kv(kv);
  const ModelConfig back = ModelConfig::from_kv(kv);
  CHECK(back.generator.deterministic_mode);
  CHECK(back.generator.window_N == 12);
  CHECK(back.speaker.lookahead == 2);
  CHECK(back.listener.lookahead == 0);
  CHECK(kv.raw("gen.alignment") == "end_of_frame");
}

TEST_CASE("flow sample interpolant") {
  Rng rng(1);
  const Tensor m0 = test::random_tensor(3, 4, rng), eps = test::random_tensor(3, 4, rng);
  CHECK(flow_sigma(0.0) == 0.0);
  CHECK(flow_sigma(1.0) == 1.0);
  for (double t : {0.0, 0.25, 0.7, 1.0}) {
    const auto s = FlowSample::make(m0, eps, t);
    CHECK(s.sigma == t);
    for (std::size_t i = 0; i < m0.numel(); ++i)
      CHECK(s.mt.values[i] == (1.0 - s.sigma) * m0.values[i] + s.sigma * eps.values[i]);
  }
  CHECK(FlowSample::make(m0, eps, 0.0).mt == m0);
  CHECK(FlowSample::make(m0, eps, 1.0).mt == eps);
}

TEST_CASE("audio alignment") {
  const Tensor constant = Tensor::filled(10, 3, 1.75);
  const Tensor a = align_audio(constant, 5);
  CHECK(a.rows() == 5);
  for (double v : a.values) CHECK(v == 1.75);

  Rng rng(2);
  const Tensor x = test::random_tensor(7, 2, rng);
  CHECK(align_audio(x, 7) == x);

  const Tensor two = Tensor::from_rows({{1.0, -1.0}, {3.0, 5.0}});
  CHECK(align_audio(two, 2) == two);

  // With r audio frames per motion frame, frame i reads exactly row (i+1)r-1.
  const Tensor y = test::random_tensor(12, 2, rng);
  const Tensor z = align_audio(y, 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(test::bitwise_equal(z.row(i), y.row(2 * i + 1)));
  // Non-integer ratios interpolate but never read past the aligned position.
  const auto taps = alignment_taps(10, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const double pos = (static_cast<double>(i) + 1.0) * 10.0 / 4.0 - 1.0;
    CHECK(static_cast<double>(taps[i].lo) <= pos);
    CHECK(static_cast<double>(taps[i].hi) <= std::ceil(pos));
  }
  CHECK_THROWS(align_audio(Tensor::zeros(0, 2), 3));
}

TEST_CASE("ar_forward causality and condition nulling") {
  const ModelConfig mc = test::tiny_model(test::tiny_world());
  Rng rng(3);
  MotionModel m(mc, rng);
  test::randomize(m.params(), rng);
  const std::size_t k = 8;
  const Inputs in = random_inputs(mc, k, rng);
  const Tensor base = conditions(m, in, {});
  CHECK(base.rows() == k);
  CHECK(base.cols() == mc.generator.ar_dim);

  for (std::size_t j = 1; j < k; ++j) {
    Inputs changed = in;
    for (std::size_t c = 0; c < mc.generator.motion_dim; ++c) changed.history.at(j, c) += 1.0 + rng.normal();
    for (std::size_t c = 0; c < mc.generator.ar_dim; ++c) changed.speaker.at(j, c) += 1.0;
    const Tensor out = conditions(m, changed, {});
    for (std::size_t i = 0; i < j; ++i) CHECK(test::bitwise_equal(out.row(i), base.row(i)));
    CHECK_FALSE(test::bitwise_equal(out.row(j), base.row(j)));
  }

  // Every condition dropped: audio and anchor have no influence at all.
  const ConditionFlags none{false, false, false};
  const Tensor dropped = conditions(m, in, none);
  Inputs noisy = in;
  noisy.speaker = test::random_tensor(k, mc.generator.ar_dim, rng);
  noisy.listener = test::random_tensor(k, mc.generator.ar_dim, rng);
  noisy.anchor = test::random_tensor(1, mc.generator.motion_dim, rng);
  CHECK(conditions(m, noisy, none) == dropped);
  CHECK_FALSE(conditions(m, noisy, {}) == base);

  const Tensor single = conditions(m, random_inputs(mc, 1, rng), {});
  CHECK(single.rows() == 1);
  CHECK(single.cols() == mc.generator.ar_dim);

  CHECK_THROWS(conditions(m, random_inputs(mc, mc.generator.window_N, rng), {}));
}

TEST_CASE("head starts at zero and is a pure function") {
  const ModelConfig mc = test::tiny_model(test::tiny_world());
  Rng rng(4);
  MotionModel m(mc, rng);
  const Tensor mt = test::random_tensor(3, mc.generator.motion_dim, rng);
  const Tensor c = test::random_tensor(3, mc.generator.ar_dim, rng);
  const std::vector<double> t{0.1, 0.5, 1.0};
  const auto run = [&](const MotionModel& model) {
    Graph g(false);
    return model.head_denoise(g, g.constant(mt), t, g.constant(c)).tensor();
  };
  for (double v : run(m).values) CHECK(v == 0.0);
  test::randomize(m.params(), rng);
  const Tensor a = run(m);
  CHECK(a == run(m));
  Graph g(false);
  CHECK_THROWS(m.head_denoise(g, g.constant(mt), {0.1, 0.5, 1.5}, g.constant(c)));
  CHECK_THROWS(m.head_denoise(g, g.constant(mt), {0.1, -0.01, 0.5}, g.constant(c)));
}

TEST_CASE("deterministic mode bypasses the head") {
  ModelConfig mc = test::tiny_model(test::tiny_world());
  mc.generator.deterministic_mode = true;
  Rng rng(5);
  MotionModel m(mc, rng);
  CHECK_FALSE(m.params().contains("gen.head_out"));
  CHECK(m.params().contains("gen.det_out.w"));
  test::randomize(m.params(), rng);
  const Tensor c = test::random_tensor(2, mc.generator.ar_dim, rng);
  Graph g(false);
  const Tensor direct = m.deterministic_predict(g, g.constant(c)).tensor();
  const Tensor via_head =
      m.head_denoise(g, g.constant(test::random_tensor(2, mc.generator.motion_dim, rng)), {0.2, 0.9}, g.constant(c))
          .tensor();
  CHECK(direct == via_head);
  // A single affine map of c.
  const Parameter& w = m.params().get("gen.det_out.w");
  const Parameter& b = m.params().get("gen.det_out.b");
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < mc.generator.motion_dim; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < mc.generator.ar_dim; ++i) acc += c.at(r, i) * w.value.at(i, o);
      CHECK(direct.at(r, o) == doctest::Approx(acc + b.value.values[o]).epsilon(1e-12));
    }
}

TEST_CASE("adaptive norm modulation is independent per block") {
  const ModelConfig mc = test::tiny_model(test::tiny_world());
  Rng rng(6);
  MotionModel m(mc, rng);
  test::randomize(m.params(), rng);
  const std::vector<double> t{0.2, 0.8};
  const Tensor c = test::random_tensor(2, mc.generator.ar_dim, rng);
  std::vector<Tensor> before;
  for (std::size_t b = 0; b < mc.generator.head_blocks; ++b) before.push_back(m.head_modulation(b, t, c));
  for (std::size_t k = 0; k < mc.generator.head_blocks; ++k) {
    Parameter& w = m.params().get("gen.head" + std::to_string(k) + ".ada.w");
    const Tensor saved = w.value;
    std::fill(w.value.values.begin(), w.value.values.end(), 0.0);
    for (std::size_t b = 0; b < mc.generator.head_blocks; ++b) {
      if (b == k) CHECK_FALSE(m.head_modulation(b, t, c) == before[b]);
      else CHECK(m.head_modulation(b, t, c) == before[b]);
    }
    w.value = saved;
  }
}

TEST_CASE("flow loss values") {
  Rng rng(7);
  const Tensor m0 = test::random_tensor(4, 3, rng);
  Tensor shifted = m0;
  for (double& v : shifted.values) v += 1.0;
  Graph g(false);
  CHECK(flow_loss(g.constant(m0), g.constant(m0)).item() == 0.0);
  CHECK(flow_loss(g.constant(shifted), g.constant(m0)).item() == doctest::Approx(1.0).epsilon(1e-14));
  for (int i = 0; i < 20; ++i)
    CHECK(flow_loss(g.constant(test::random_tensor(4, 3, rng)), g.constant(m0)).item() >= 0.0);
}

TEST_CASE("anchor sampling") {
  Rng rng(8);
  for (std::size_t n : {1u, 11u, 40u, 500u}) CHECK(sample_anchor(n, AnchorPhase::infer, rng) == 0);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_anchor(11, AnchorPhase::train, rng);
    CHECK(a >= 1);
    CHECK(a <= 10);
  }
  CHECK_THROWS(sample_anchor(10, AnchorPhase::train, rng));

  // Chi-square goodness of fit over 10^4 draws; 21.666 is the p = 0.01
  // critical value with 9 degrees of freedom.
  std::array<double, 10> counts{};
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto a = sample_anchor(40, AnchorPhase::train, rng);
    REQUIRE(a >= 30);
    REQUIRE(a <= 39);
    counts[a - 30] += 1.0;
  }
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
  CHECK(chi2 < 21.666);
}

TEST_CASE("condition dropout draws") {
  WorldConfig w = test::tiny_world();
  Rng drng(9);
  const Dataset data = make_dataset(w, 2, 30, drng);
  const ModelConfig mc = test::tiny_model(w);
  Rng rng(10);
  MotionModel m(mc, rng);
  TrainOptions opt;
  opt.drop_speaker = opt.drop_listener = opt.drop_anchor = 0.0;
  Trainer none(m, opt);
  for (int i = 0; i < 50; ++i) {
    const auto s = none.draw_window(data);
    CHECK(s.flags == ConditionFlags{});
    REQUIRE(s.anchor_frame.has_value());
    CHECK(*s.anchor_frame >= s.start + mc.generator.window_N - 10);
    CHECK(*s.anchor_frame < s.start + mc.generator.window_N);
    CHECK(s.t.size() == mc.generator.window_N - 1);
  }
  opt.anchor_mode = AnchorMode::none;
  Trainer no_anchor(m, opt);
  for (int i = 0; i < 20; ++i) CHECK_FALSE(no_anchor.draw_window(data).anchor_frame.has_value());

  opt = TrainOptions{};
  Trainer standard(m, opt);
  std::size_t speaker = 0, listener = 0, anchor = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const auto s = standard.draw_window(data);
    speaker += !s.flags.speaker;
    listener += !s.flags.listener;
    anchor += !s.flags.anchor;
  }
  CHECK(speaker / double(n) == doctest::Approx(0.5).epsilon(0.08));
  CHECK(listener / double(n) == doctest::Approx(0.5).epsilon(0.08));
  CHECK(anchor / double(n) == doctest::Approx(0.1).epsilon(0.2));
}

TEST_CASE("episodes shorter than the window are rejected") {
  WorldConfig w = test::tiny_world();
  Rng drng(11);
  const Dataset data = make_dataset(w, 1, 8, drng);
  Rng rng(12);
  MotionModel m(test::tiny_model(w), rng);
  Trainer trainer(m, TrainOptions{});
  CHECK_THROWS(trainer.step(data));
}

TEST_CASE("two-frame flow loss passes the finite-difference check") {
  for (bool deterministic : {false, true}) {
    ModelConfig mc = test::tiny_model(test::tiny_world());
    mc.generator.deterministic_mode = deterministic;
    Rng rng(13);
    MotionModel m(mc, rng);
    test::randomize(m.params(), rng);
    const auto inst = test::TwoFrameInstance::make(mc, rng);
    const auto res = test::check_gradients(m.params(), [&](Graph& g) { return inst.loss(m, g); });
    MESSAGE("checked " << res.checked << " scalars, max rel err " << res.max_rel_error << " at " << res.worst);
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
  }
}

TEST_CASE("training converges on a deterministic world") {
  WorldConfig w = test::tiny_world();
  w.noise_scale = 0.0;
  w.coart_lag_q = 0;
  Rng drng(14);
  const Dataset data = make_dataset(w, 6, 40, drng);
  ModelConfig mc = test::tiny_model(w, 0);
  mc.generator.ar_dim = mc.generator.head_dim = 16;
  mc.speaker.model_dim = mc.listener.model_dim = 16;
  Rng rng(15);
  MotionModel m(mc, rng);
  TrainOptions opt;
  opt.optimizer.lr = 3e-3;
  opt.drop_speaker = opt.drop_listener = opt.drop_anchor = 0.0;
  Trainer trainer(m, opt);
  std::vector<double> losses;
  for (int s = 0; s < 500; ++s) losses.push_back(trainer.step(data).loss);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) head += losses[i] / 10.0;
  for (int i = 490; i < 500; ++i) tail += losses[i] / 10.0;
  MESSAGE("loss " << head << " -> " << tail);
  CHECK(tail < 0.1 * head);
}
