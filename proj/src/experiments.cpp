#include "dystream/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace dystream {

RunConfig::RunConfig() {
  model = ModelConfig::defaults_for(model.world);
  reseed(0);
}

void RunConfig::sync_model_to_world() {
  model.speaker.input_dim = model.world.audio_feature_dim;
  model.listener.input_dim = model.world.audio_feature_dim;
  model.generator.motion_dim = model.world.motion_dim;
}

void RunConfig::reseed(std::uint64_t root) {
  seed = root;
  teacher.seed = mix_seed(root, hash_tag("teacher"));
  distill.seed = mix_seed(root, hash_tag("distill"));
  train.seed = mix_seed(root, hash_tag("train"));
  sampler.seed = mix_seed(root, hash_tag("sample"));
  metrics.seed = mix_seed(root, hash_tag("metrics"));
}

RunConfig desk_config(std::uint64_t seed) {
  RunConfig rc;
  rc.reseed(seed);
  for (EncoderConfig* e : {&rc.model.speaker, &rc.model.listener}) {
    e->model_dim = 32;
    e->context = 8;
  }
  rc.model.generator.ar_dim = 32;
  rc.model.generator.head_dim = 32;
  rc.model.generator.window_N = 20;
  rc.teacher.steps = 200;
  rc.distill.steps = 150;
  rc.train.steps = 1200;
  rc.train.optimizer.lr = 3e-3;
  return rc;
}

namespace {

void read_encoder_opts(const KeyValues& kv, const std::string& p, EncoderTrainOptions& o) {
  kv.read(p + ".steps", o.steps);
  kv.read(p + ".batch", o.batch);
  kv.read(p + ".segment_frames", o.segment_frames);
  kv.read(p + ".mask_fraction", o.mask_fraction);
  kv.read(p + ".lr", o.optimizer.lr);
}

void write_encoder_opts(KeyValues& kv, const std::string& p, const EncoderTrainOptions& o) {
  kv.set(p + ".steps", o.steps);
  kv.set(p + ".batch", o.batch);
  kv.set(p + ".segment_frames", o.segment_frames);
  kv.set(p + ".mask_fraction", o.mask_fraction);
  kv.set(p + ".lr", o.optimizer.lr);
}

}  // namespace

RunConfig RunConfig::from_kv(const KeyValues& kv) {
  RunConfig rc;
  std::uint64_t seed = 0;
  kv.read("seed", seed);
  rc.reseed(seed);
  rc.model.world = WorldConfig::from_kv(kv);
  rc.model = ModelConfig::defaults_for(rc.model.world);
  rc.model.speaker = EncoderConfig::from_kv(kv, "enc_s");
  rc.model.listener = EncoderConfig::from_kv(kv, "enc_l");
  if (!kv.has("enc_s.lookahead_frames")) rc.model.speaker.lookahead = rc.model.world.coart_lag_q;
  rc.model.generator = GeneratorConfig::from_kv(kv);
  rc.sync_model_to_world();
  kv.read("sampler.steps", rc.sampler.steps);
  kv.read("sampler.w_s", rc.sampler.guidance.w_s);
  kv.read("sampler.w_l", rc.sampler.guidance.w_l);
  kv.read("sampler.w_r", rc.sampler.guidance.w_r);
  kv.read("sampler.w_all", rc.sampler.guidance.w_all);
  kv.read("sampler.anchor_token", rc.sampler.anchor_token);
  kv.read("data.episodes", rc.episodes);
  kv.read("data.frames", rc.frames);
  kv.read("data.eval_episodes", rc.eval_episodes);
  kv.read("data.eval_frames", rc.eval_frames);
  read_encoder_opts(kv, "teacher", rc.teacher);
  read_encoder_opts(kv, "distill", rc.distill);
  kv.read("train.steps", rc.train.steps);
  kv.read("train.batch", rc.train.batch);
  kv.read("train.lr", rc.train.optimizer.lr);
  kv.read("train.drop_speaker", rc.train.drop_speaker);
  kv.read("train.drop_listener", rc.train.drop_listener);
  kv.read("train.drop_anchor", rc.train.drop_anchor);
  kv.read("train.finetune_encoders", rc.train.finetune_encoders);
  if (kv.has("train.anchor_mode")) rc.train.anchor_mode = anchor_mode_from_string(kv.raw("train.anchor_mode"));
  kv.read("metrics.max_offset", rc.metrics.max_offset);
  kv.read("metrics.k_exp", rc.metrics.k_exp);
  kv.read("metrics.k_pose", rc.metrics.k_pose);
  kv.read("metrics.sid_window", rc.metrics.sid_window);
  return rc;
}

void RunConfig::to_kv(KeyValues& kv) const {
  kv.set("seed", seed);
  model.to_kv(kv);
  kv.set("sampler.steps", sampler.steps);
  kv.set("sampler.w_s", sampler.guidance.w_s);
  kv.set("sampler.w_l", sampler.guidance.w_l);
  kv.set("sampler.w_r", sampler.guidance.w_r);
  kv.set("sampler.w_all", sampler.guidance.w_all);
  kv.set("sampler.anchor_token", sampler.anchor_token);
  kv.set("data.episodes", episodes);
  kv.set("data.frames", frames);
  kv.set("data.eval_episodes", eval_episodes);
  kv.set("data.eval_frames", eval_frames);
  write_encoder_opts(kv, "teacher", teacher);
  write_encoder_opts(kv, "distill", distill);
  kv.set("train.steps", train.steps);
  kv.set("train.batch", train.batch);
  kv.set("train.lr", train.optimizer.lr);
  kv.set("train.drop_speaker", train.drop_speaker);
  kv.set("train.drop_listener", train.drop_listener);
  kv.set("train.drop_anchor", train.drop_anchor);
  kv.set("train.finetune_encoders", train.finetune_encoders);
  kv.set("train.anchor_mode", to_string(train.anchor_mode));
  kv.set("metrics.max_offset", metrics.max_offset);
  kv.set("metrics.k_exp", metrics.k_exp);
  kv.set("metrics.k_pose", metrics.k_pose);
  kv.set("metrics.sid_window", metrics.sid_window);
}

Dataset make_training_data(const RunConfig& rc) {
  Rng rng = Rng(rc.seed).split("data");
  return make_dataset(rc.model.world, rc.episodes, rc.frames, rng);
}

Dataset make_eval_data(const RunConfig& rc) {
  Rng rng = Rng(rc.seed).split("eval-data");
  return make_dataset(rc.model.world, rc.eval_episodes, rc.eval_frames, rng);
}

std::unique_ptr<EncoderModel> train_teacher(const RunConfig& rc, const Dataset& data, TrainLog* log) {
  EncoderConfig tc = rc.model.speaker;
  tc.mode = EncoderMode::full;
  tc.context.reset();
  Rng rng = Rng(rc.seed).split("init-teacher");
  auto teacher = std::make_unique<EncoderModel>(tc, rng);
  TrainLog l = pretrain_teacher(*teacher, data, rc.teacher);
  if (log) *log = std::move(l);
  return teacher;
}

std::unique_ptr<EncoderModel> distill_encoder(const RunConfig& rc, const EncoderModel& teacher,
                                              std::size_t lookahead, const Dataset& data, TrainLog* log) {
  EncoderConfig sc = rc.model.speaker;
  sc.mode = EncoderMode::causal_lookahead;
  sc.lookahead = lookahead;
  sc.initialized_from_teacher = true;
  Rng rng = Rng(rc.seed).split("init-student").split(static_cast<std::uint64_t>(lookahead));
  auto student = std::make_unique<EncoderModel>(sc, rng);
  EncoderTrainOptions opt = rc.distill;
  opt.seed = mix_seed(rc.distill.seed, lookahead);
  TrainLog l = distill_student(teacher, *student, data, opt, true);
  if (log) *log = std::move(l);
  return student;
}

std::unique_ptr<MotionModel> train_model(const RunConfig& rc, const Dataset& data, const EncoderModel* speaker,
                                         const EncoderModel* listener, const StepCallback& on_step) {
  Rng rng = Rng(rc.seed).split("init-model");
  ModelConfig mc = rc.model;
  if (speaker) mc.speaker = speaker->encoder.config();
  if (listener) {
    mc.listener = listener->encoder.config();
    if (mc.listener.lookahead != 0) throw std::invalid_argument("listener encoder must have lookahead 0");
  }
  auto model = std::make_unique<MotionModel>(mc, rng);
  if (speaker) model->load_speaker_encoder(speaker->store);
  if (listener) model->load_listener_encoder(listener->store);
  Trainer trainer(*model, rc.train);
  for (std::size_t s = 0; s < rc.train.steps; ++s) {
    const auto r = trainer.step(data);
    if (on_step) on_step(s, r);
  }
  return model;
}

SamplerConfig sampler_for_episode(const SamplerConfig& base, std::size_t episode) {
  SamplerConfig s = base;
  s.seed = mix_seed(base.seed, episode);
  return s;
}

std::vector<Tensor> generate_all(const MotionModel& model, const Dataset& data, const SamplerConfig& sampler) {
  std::vector<Tensor> out;
  for (std::size_t e = 0; e < data.episodes.size(); ++e) {
    const auto& ep = data.episodes[e];
    out.push_back(generate_offline(model, ep.audio, sampler_for_episode(sampler, e), ep.motion.slice_rows(0, 1)));
  }
  return out;
}

Evaluation evaluate_dataset(const std::vector<Tensor>& generated, const Dataset& data, const MetricsConfig& cfg) {
  std::vector<const OracleEpisode*> eps;
  for (const auto& e : data.episodes) eps.push_back(&e);
  return evaluate(generated, eps, data.config, cfg);
}

std::string format_ablation_row(const AblationRow& r) {
  std::ostringstream os;
  os << r.lookahead_frames << ',' << format_double(r.lookahead_ms) << ',' << format_double(r.sync_proxy) << ','
     << format_double(r.mse);
  return os.str();
}

std::vector<AblationRow> run_lookahead_ablation(const RunConfig& rc, const std::vector<std::size_t>& lookaheads,
                                                const std::function<void(const AblationRow&)>& on_row) {
  return run_lookahead_ablation(rc, lookaheads, make_training_data(rc), make_eval_data(rc), on_row);
}

std::vector<AblationRow> run_lookahead_ablation(const RunConfig& rc, const std::vector<std::size_t>& lookaheads,
                                                const Dataset& train, const Dataset& eval,
                                                const std::function<void(const AblationRow&)>& on_row) {
  const auto teacher = train_teacher(rc, train);
  const auto listener = distill_encoder(rc, *teacher, 0, train);
  std::vector<AblationRow> rows;
  for (std::size_t L : lookaheads) {
    const auto speaker = L == 0 ? nullptr : distill_encoder(rc, *teacher, L, train);
    const auto model = train_model(rc, train, speaker ? speaker.get() : listener.get(), listener.get());
    const auto gen = generate_all(*model, eval, rc.sampler);
    const auto ev = evaluate_dataset(gen, eval, rc.metrics);
    AblationRow row{L, static_cast<double>(L) * rc.model.world.audio_frame_ms(), ev.aggregate.sync_proxy,
                    ev.aggregate.mse};
    rows.push_back(row);
    if (on_row) on_row(row);
  }
  return rows;
}

double anchor_drift_experiment(const RunConfig& rc, AnchorMode mode, std::size_t rollout_frames) {
  RunConfig r = rc;
  r.train.anchor_mode = mode;
  if (mode == AnchorMode::none) r.sampler.anchor_token = false;
  const Dataset train = make_training_data(r);
  RunConfig er = r;
  er.eval_frames = rollout_frames;
  const Dataset eval = make_eval_data(er);
  const auto model = train_model(r, train, nullptr, nullptr);
  const auto gen = generate_all(*model, eval, r.sampler);
  const auto pose = pose_channels_of(r.model.world);
  double total = 0.0;
  for (std::size_t e = 0; e < gen.size(); ++e)
    total += drift_metric(gen[e], eval.episodes[e].motion.slice_rows(0, 1), pose);
  return total / static_cast<double>(gen.size());
}

DiversityResult diversity_experiment(const RunConfig& rc, bool deterministic) {
  RunConfig r = rc;
  r.model.generator.deterministic_mode = deterministic;
  const Dataset train = make_training_data(r);
  const Dataset eval = make_eval_data(r);
  const auto model = train_model(r, train, nullptr, nullptr);
  const auto gen = generate_all(*model, eval, r.sampler);
  const auto ev = evaluate_dataset(gen, eval, r.metrics);
  return {ev.aggregate.var_pose, ev.aggregate.sid_pose, ev.aggregate.sync_proxy};
}

void write_motion_csv(const std::filesystem::path& path, const Tensor& motion) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t c = 0; c < motion.cols(); ++c) os << (c ? "," : "") << 'm' << c;
  os << '\n';
  for (std::size_t r = 0; r < motion.rows(); ++r) {
    for (std::size_t c = 0; c < motion.cols(); ++c) os << (c ? "," : "") << format_double(motion.at(r, c));
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_motion_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty motion file");
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::size_t n = 0;
    for (std::string cell; std::getline(ss, cell, ','); ++n) values.push_back(std::stod(cell));
    if (n != cols) throw std::runtime_error(path.string() + ": row " + std::to_string(rows) + " has " +
                                            std::to_string(n) + " fields, expected " + std::to_string(cols));
    ++rows;
  }
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace dystream
