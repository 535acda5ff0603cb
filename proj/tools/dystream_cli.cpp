// dystream: command-line driver for the synthetic dyadic audio-to-motion engine.
//
// Exit codes: 0 success, 1 usage error, 2 runtime or data error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dystream/checkpoint.hpp"
#include "dystream/experiments.hpp"
#include "dystream/kernels.hpp"

namespace fs = std::filesystem;
using namespace dystream;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> overrides;
};

// Defaults < config file < --set overrides < dedicated flags.
KeyValues base_config(const Globals& g) {
  KeyValues kv;
  if (!g.config.empty()) kv = KeyValues::load(g.config);
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (g.seed) kv.set("seed", *g.seed);
  return kv;
}

fs::path out_dir(const Globals& g) {
  const fs::path p(g.out);
  if (!fs::is_directory(p)) throw std::runtime_error("output directory " + p.string() + " does not exist");
  return p;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw std::runtime_error(std::string(what) + " file " + path + " does not exist");
}

// Dataset world settings win over anything in the config.
RunConfig config_for_dataset(const KeyValues& kv, const Dataset& data) {
  KeyValues merged = kv;
  data.config.to_kv(merged);
  return RunConfig::from_kv(merged);
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(cell, &used);
      if (used != cell.size()) throw std::invalid_argument(cell);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("bad list entry '" + cell + "'");
    }
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

std::vector<std::size_t> episode_selection(const std::optional<std::size_t>& episode, const Dataset& data) {
  if (episode) {
    if (*episode >= data.episodes.size())
      throw std::runtime_error("episode " + std::to_string(*episode) + " out of range (dataset has " +
                               std::to_string(data.episodes.size()) + ")");
    return {*episode};
  }
  std::vector<std::size_t> all(data.episodes.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

void check_model_matches(const MotionModel& model, const Dataset& data) {
  const auto& w = model.config().world;
  if (w.motion_dim != data.config.motion_dim || w.audio_feature_dim != data.config.audio_feature_dim ||
      w.audio_frames_per_video_frame != data.config.audio_frames_per_video_frame)
    throw std::runtime_error("model was trained for a different world (dims or frame rate differ)");
}

std::string motion_file(std::size_t e) { return "motion_ep" + std::to_string(e) + ".csv"; }

struct SamplerFlags {
  std::optional<std::size_t> steps;
  std::optional<double> w_s, w_l, w_r, w_all;
  void add(CLI::App* c) {
    c->add_option("--steps", steps, "Euler steps");
    c->add_option("--w-s", w_s, "speaker guidance weight");
    c->add_option("--w-l", w_l, "listener guidance weight");
    c->add_option("--w-r", w_r, "anchor guidance weight");
    c->add_option("--w-all", w_all, "joint guidance weight");
  }
  void apply(KeyValues& kv) const {
    if (steps) kv.set("sampler.steps", *steps);
    if (w_s) kv.set("sampler.w_s", *w_s);
    if (w_l) kv.set("sampler.w_l", *w_l);
    if (w_r) kv.set("sampler.w_r", *w_r);
    if (w_all) kv.set("sampler.w_all", *w_all);
  }
};

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();
  CLI::App app{"Streaming dyadic audio-to-motion engine on a synthetic oracle world"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "key = value config file");
  app.add_option("--seed", g.seed, "root seed");
  app.add_option("--out", g.out, "output directory (must exist)");
  app.add_option("--set", g.overrides, "override one config key (key=value), repeatable");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dyadic dataset");
  std::size_t synth_episodes = 100, synth_frames = 200;
  std::string synth_name = "dataset.dsw";
  synth->add_option("--episodes", synth_episodes, "episode count");
  synth->add_option("--frames", synth_frames, "motion frames per episode");
  synth->add_option("--name", synth_name, "dataset file name inside --out");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train the full-context teacher encoder");
  std::string data_path;
  std::optional<std::size_t> enc_steps;
  pretrain->add_option("--data", data_path, "dataset file")->required();
  pretrain->add_option("--steps", enc_steps, "optimizer steps");

  // distill
  auto* distill = app.add_subcommand("distill", "distill a causal lookahead student from the teacher");
  std::string teacher_path;
  std::size_t lookahead = 0;
  distill->add_option("--data", data_path, "dataset file")->required();
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--lookahead", lookahead, "student lookahead in audio frames");
  distill->add_option("--steps", enc_steps, "optimizer steps");

  // train
  auto* train = app.add_subcommand("train", "train the generator");
  std::string speaker_path, listener_path, anchor_mode;
  std::optional<std::size_t> train_steps, train_batch, checkpoint_every;
  std::optional<double> train_lr;
  bool deterministic = false;
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--speaker-encoder", speaker_path, "speaker encoder checkpoint");
  train->add_option("--listener-encoder", listener_path, "listener encoder checkpoint (lookahead 0)");
  train->add_option("--steps", train_steps, "optimizer steps");
  train->add_option("--batch", train_batch, "windows per step");
  train->add_option("--lr", train_lr, "learning rate");
  train->add_option("--anchor-mode", anchor_mode, "last10, random or none")
      ->check(CLI::IsMember({"last10", "random", "none"}));
  train->add_flag("--deterministic", deterministic, "replace the flow head by a linear projection");
  train->add_option("--checkpoint-every", checkpoint_every, "also save model_step<N>.dyst every N steps");

  // generate
  auto* generate = app.add_subcommand("generate", "offline generation (whole track encoded in one pass)");
  std::string model_path;
  std::optional<std::size_t> episode;
  SamplerFlags gen_flags;
  generate->add_option("--model", model_path, "generator checkpoint")->required();
  generate->add_option("--data", data_path, "dataset file")->required();
  generate->add_option("--episode", episode, "only this episode");
  gen_flags.add(generate);

  // stream
  auto* stream = app.add_subcommand("stream", "packetized streaming generation with latency trace");
  double packet_ms = 100.0;
  std::string clock = "virtual";
  std::optional<double> virtual_cost_ms;
  bool from_stdin = false;
  SamplerFlags stream_flags;
  stream->add_option("--model", model_path, "generator checkpoint")->required();
  stream->add_option("--data", data_path, "dataset file (replayed as packets)");
  stream->add_option("--episode", episode, "only this episode");
  stream->add_flag("--stdin", from_stdin, "read length-prefixed packets from standard input");
  stream->add_option("--packet-ms", packet_ms, "packet duration in ms");
  stream->add_option("--clock", clock, "virtual or wall")->check(CLI::IsMember({"virtual", "wall"}));
  stream->add_option("--virtual-cost-ms", virtual_cost_ms,
                     "charge this fixed cost per frame instead of measured time (reproducible traces)");
  stream_flags.add(stream);

  // eval
  auto* eval = app.add_subcommand("eval", "metrics against the oracle dataset");
  std::string motion_dir;
  bool ground_truth = false;
  eval->add_option("--data", data_path, "dataset file")->required();
  eval->add_option("--motion-dir", motion_dir, "directory with motion_ep<N>.csv files");
  eval->add_flag("--ground-truth", ground_truth, "evaluate the dataset's own motion");
  eval->add_option("--episode", episode, "only this episode");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "lookahead sweep: distill, train and evaluate per lookahead");
  std::string lookahead_list = "0,1,2,3,4";
  ablate->add_option("--data", data_path, "dataset file (last data.eval_episodes episodes are held out)");
  ablate->add_option("--lookahead-list", lookahead_list, "comma-separated lookaheads in audio frames");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    KeyValues kv = base_config(g);

    if (synth->parsed()) {
      const fs::path dir = out_dir(g);
      RunConfig rc = RunConfig::from_kv(kv);
      Rng rng = Rng(rc.seed).split("data");
      const Dataset ds = make_dataset(rc.model.world, synth_episodes, synth_frames, rng);
      const fs::path path = dir / synth_name;
      write_dataset(path, ds);
      write_manifest(manifest_path_for(path), ds);
      std::cout << "wrote " << path.string() << " (" << ds.episodes.size() << " episodes, "
                << ds.total_motion_frames() << " frames)\n";
      return 0;
    }

    if (pretrain->parsed()) {
      require_file(data_path, "data");
      const fs::path dir = out_dir(g);
      const Dataset ds = read_dataset(data_path);
      if (enc_steps) kv.set("teacher.steps", *enc_steps);
      const RunConfig rc = config_for_dataset(kv, ds);
      TrainLog log;
      auto teacher = train_teacher(rc, ds, &log);
      save_encoder(dir / "teacher.dyst", *teacher);
      std::ofstream lf(dir / "teacher_loss.csv");
      lf << "step,loss\n";
      for (std::size_t i = 0; i < log.losses.size(); ++i) lf << i << ',' << format_double(log.losses[i]) << '\n';
      std::cout << "teacher loss " << format_double(log.head_mean(20)) << " -> " << format_double(log.tail_mean(20))
                << "\n";
      return 0;
    }

    if (distill->parsed()) {
      require_file(data_path, "data");
      require_file(teacher_path, "teacher");
      const fs::path dir = out_dir(g);
      const Dataset ds = read_dataset(data_path);
      if (enc_steps) kv.set("distill.steps", *enc_steps);
      const RunConfig rc = config_for_dataset(kv, ds);
      const auto teacher = load_encoder(teacher_path);
      TrainLog log;
      auto student = distill_encoder(rc, *teacher, lookahead, ds, &log);
      const fs::path path = dir / ("student_L" + std::to_string(lookahead) + ".dyst");
      save_encoder(path, *student);
      std::cout << "wrote " << path.string() << " (distillation loss "
                << format_double(distillation_loss(*teacher, *student, ds)) << ")\n";
      return 0;
    }

    if (train->parsed()) {
      require_file(data_path, "data");
      const fs::path dir = out_dir(g);
      const Dataset ds = read_dataset(data_path);
      if (train_steps) kv.set("train.steps", *train_steps);
      if (train_batch) kv.set("train.batch", *train_batch);
      if (train_lr) kv.set("train.lr", *train_lr);
      if (!anchor_mode.empty()) kv.set("train.anchor_mode", anchor_mode);
      if (deterministic) kv.set("gen.deterministic_mode", true);
      const RunConfig rc = config_for_dataset(kv, ds);
      std::unique_ptr<EncoderModel> speaker, listener;
      if (!speaker_path.empty()) {
        require_file(speaker_path, "speaker-encoder");
        speaker = load_encoder(speaker_path);
      }
      if (!listener_path.empty()) {
        require_file(listener_path, "listener-encoder");
        listener = load_encoder(listener_path);
      }
      std::ofstream log(dir / "loss.csv");
      log << "step,loss\n";
      MotionModel* live = nullptr;
      std::unique_ptr<MotionModel> model;
      // Periodic checkpoints need the model while it trains, so build it here.
      Rng rng = Rng(rc.seed).split("init-model");
      ModelConfig mc = rc.model;
      if (speaker) mc.speaker = speaker->encoder.config();
      if (listener) mc.listener = listener->encoder.config();
      try {
        model = std::make_unique<MotionModel>(mc, rng);
        if (speaker) model->load_speaker_encoder(speaker->store);
        if (listener) model->load_listener_encoder(listener->store);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("incompatible encoder checkpoint: ") + e.what());
      }
      live = model.get();
      Trainer trainer(*live, rc.train);
      for (std::size_t s = 0; s < rc.train.steps; ++s) {
        const auto r = trainer.step(ds);
        log << s << ',' << format_double(r.loss) << '\n';
        if (checkpoint_every && *checkpoint_every > 0 && (s + 1) % *checkpoint_every == 0)
          save_model(dir / ("model_step" + std::to_string(s + 1) + ".dyst"), *live);
      }
      save_model(dir / "model.dyst", *live);
      KeyValues used;
      rc.to_kv(used);
      used.save(dir / "train_config.txt");
      std::cout << "wrote " << (dir / "model.dyst").string() << " after " << rc.train.steps << " steps\n";
      return 0;
    }

    if (generate->parsed()) {
      require_file(model_path, "model");
      require_file(data_path, "data");
      const fs::path dir = out_dir(g);
      const auto model = load_model(model_path);
      const Dataset ds = read_dataset(data_path);
      check_model_matches(*model, ds);
      gen_flags.apply(kv);
      const RunConfig rc = config_for_dataset(kv, ds);
      for (std::size_t e : episode_selection(episode, ds)) {
        const auto& ep = ds.episodes[e];
        const Tensor motion =
            generate_offline(*model, ep.audio, sampler_for_episode(rc.sampler, e), ep.motion.slice_rows(0, 1));
        write_motion_csv(dir / motion_file(e), motion);
      }
      std::cout << "generated " << episode_selection(episode, ds).size() << " episode(s)\n";
      return 0;
    }

    if (stream->parsed()) {
      require_file(model_path, "model");
      const fs::path dir = out_dir(g);
      const auto model = load_model(model_path);
      stream_flags.apply(kv);
      StreamOptions opt;
      opt.clock = clock_mode_from_string(clock);
      opt.fixed_frame_cost_ms = virtual_cost_ms;
      const auto& world = model->config().world;
      auto run_one = [&](const std::vector<StreamPacket>& packets, const Tensor& anchor, const SamplerConfig& s,
                         std::size_t e) {
        const StreamResult res = run_stream(*model, packets, s, anchor, opt);
        write_motion_csv(dir / motion_file(e), res.motion);
        std::ofstream tf(dir / ("trace_ep" + std::to_string(e) + ".csv"));
        res.trace.write_csv(tf);
        std::ofstream sf(dir / ("trace_ep" + std::to_string(e) + ".summary"));
        sf << res.trace.summary();
        std::cout << "episode=" << e << '\n' << res.trace.summary();
      };
      if (from_stdin) {
        if (!data_path.empty()) throw UsageError("--stdin and --data are exclusive");
        KeyValues merged = kv;
        world.to_kv(merged);
        const RunConfig rc = RunConfig::from_kv(merged);
        std::ios::sync_with_stdio(false);
        const auto packets = read_packet_stream(std::cin, world.audio_feature_dim, world.audio_frame_ms(), packet_ms);
        if (packets.empty()) throw std::runtime_error("no packets on standard input");
        // Without a reference episode the anchor is the neutral (zero) pose.
        run_one(packets, Tensor::zeros(1, world.motion_dim), rc.sampler, 0);
        return 0;
      }
      require_file(data_path, "data");
      const Dataset ds = read_dataset(data_path);
      check_model_matches(*model, ds);
      const RunConfig rc = config_for_dataset(kv, ds);
      for (std::size_t e : episode_selection(episode, ds)) {
        const auto& ep = ds.episodes[e];
        run_one(audio_to_wire(ep.audio, world.audio_frame_ms(), packet_ms), ep.motion.slice_rows(0, 1),
                sampler_for_episode(rc.sampler, e), e);
      }
      return 0;
    }

    if (eval->parsed()) {
      require_file(data_path, "data");
      const Dataset ds = read_dataset(data_path);
      if (ground_truth == !motion_dir.empty()) throw UsageError("give exactly one of --motion-dir and --ground-truth");
      const RunConfig rc = config_for_dataset(kv, ds);
      std::vector<Tensor> gen;
      std::vector<const OracleEpisode*> eps;
      for (std::size_t e : episode_selection(episode, ds)) {
        gen.push_back(ground_truth ? ds.episodes[e].motion : read_motion_csv(fs::path(motion_dir) / motion_file(e)));
        eps.push_back(&ds.episodes[e]);
      }
      const Evaluation ev = evaluate(gen, eps, ds.config, rc.metrics);
      const fs::path dir = out_dir(g);
      std::ofstream rf(dir / "report.txt");
      rf << ev.aggregate.to_key_values();
      std::ofstream cf(dir / "metrics.csv");
      cf << MetricsReport::csv_header() << '\n';
      const auto sel = episode_selection(episode, ds);
      for (std::size_t i = 0; i < ev.per_episode.size(); ++i) ev.per_episode[i].write_csv_row(cf, std::to_string(sel[i]));
      std::cout << ev.aggregate.to_key_values();
      return 0;
    }

    if (ablate->parsed()) {
      const fs::path dir = out_dir(g);
      const auto list = parse_list(lookahead_list);
      std::ofstream csv(dir / "ablation.csv");
      csv << kAblationHeader << '\n' << std::flush;
      auto on_row = [&](const AblationRow& r) {
        csv << format_ablation_row(r) << '\n' << std::flush;
        std::cout << format_ablation_row(r) << '\n' << std::flush;
      };
      if (data_path.empty()) {
        const RunConfig rc = RunConfig::from_kv(kv);
        run_lookahead_ablation(rc, list, on_row);
      } else {
        require_file(data_path, "data");
        const Dataset ds = read_dataset(data_path);
        const RunConfig rc = config_for_dataset(kv, ds);
        if (rc.eval_episodes == 0 || rc.eval_episodes >= ds.episodes.size())
          throw std::runtime_error("dataset too small to hold out " + std::to_string(rc.eval_episodes) + " episodes");
        Dataset tr{ds.config, {}}, ev{ds.config, {}};
        const std::size_t split = ds.episodes.size() - rc.eval_episodes;
        for (std::size_t e = 0; e < ds.episodes.size(); ++e) (e < split ? tr : ev).episodes.push_back(ds.episodes[e]);
        run_lookahead_ablation(rc, list, tr, ev, on_row);
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
