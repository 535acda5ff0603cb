// Config, checkpoint and file-format round trips, plus end-to-end runs of the
// dystream executable on a tiny world.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "dystream/checkpoint.hpp"
#include "dystream/experiments.hpp"
#include "support.hpp"

using namespace dystream;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dystream_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

const char* kTinyConfig = R"(# tiny world for fast end-to-end runs
world.motion_dim = 4
world.audio_feature_dim = 3
enc_s.model_dim = 8
enc_s.heads = 2
enc_s.layers = 2
enc_s.context_frames = 4
enc_l.model_dim = 8
enc_l.heads = 2
enc_l.layers = 2
enc_l.context_frames = 4
gen.ar_dim = 8
gen.ar_heads = 2
gen.ar_blocks = 1
gen.head_dim = 8
gen.head_blocks = 2
gen.time_freqs = 4
gen.window_N = 12
teacher.steps = 5
distill.steps = 5
train.steps = 10
train.batch = 2
data.episodes = 4
data.frames = 40
data.eval_episodes = 2
data.eval_frames = 40
metrics.k_exp = 3
metrics.k_pose = 3
)";

struct Cli {
  fs::path dir;
  explicit Cli(const std::string& name) : dir(scratch(name)) {
    std::ofstream(dir / "tiny.cfg") << kTinyConfig;
  }
  int run(const std::string& args) const {
    const std::string cmd = std::string(DYSTREAM_CLI_PATH) + " --config " + (dir / "tiny.cfg").string() + " " + args +
                            " >" + (dir / "stdout.txt").string() + " 2>" + (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string out() const { return "--out " + dir.string(); }
  std::string stderr_text() const { return slurp(dir / "stderr.txt"); }
};

}  // namespace

TEST_CASE("config text parsing and precedence") {
  const auto kv = KeyValues::parse("# comment\n a = 1 \nb=two words\n\nc = 0.1\n");
  CHECK(kv.raw("a") == "1");
  CHECK(kv.raw("b") == "two words");
  double c = 0.0;
  kv.read("c", c);
  CHECK(c == 0.1);
  std::uint64_t missing = 7;
  kv.read("nope", missing);
  CHECK(missing == 7);
  CHECK_THROWS_AS(KeyValues::parse("no equals sign\n"), ConfigError);
  std::uint64_t bad = 0;
  CHECK_THROWS_AS(KeyValues::parse("x = 1.5\n").read("x", bad), ConfigError);
  CHECK(KeyValues::parse(kv.format()).entries() == kv.entries());

  KeyValues file = KeyValues::parse("train.steps = 5\nseed = 3\n");
  file.merge(KeyValues::parse("train.steps = 9\n"));
  const RunConfig rc = RunConfig::from_kv(file);
  CHECK(rc.train.steps == 9);
  CHECK(rc.seed == 3);
  KeyValues round;
  rc.to_kv(round);
  KeyValues again;
  RunConfig::from_kv(round).to_kv(again);
  CHECK(round.format() == again.format());
}

TEST_CASE("shortest round-trip doubles") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-20, 20));
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("model checkpoints round trip bitwise") {
  const auto dir = scratch("ckpt");
  const WorldConfig w = test::tiny_world();
  Rng rng(2);
  MotionModel model(test::tiny_model(w), rng);
  test::randomize(model.params(), rng);
  save_model(dir / "m.dyst", model);
  const auto back = load_model(dir / "m.dyst");
  for (const Parameter* p : model.params().all()) CHECK(p->value == back->params().get(p->name).value);
  KeyValues a, b;
  model.config().to_kv(a);
  back->config().to_kv(b);
  CHECK(a.format() == b.format());
  CHECK(slurp(dir / "m.dyst").substr(0, 4) == "DYST");

  save_model(dir / "again.dyst", *back);
  CHECK(slurp(dir / "m.dyst") == slurp(dir / "again.dyst"));

  std::ofstream(dir / "m.dyst", std::ios::app | std::ios::binary) << 'x';
  CHECK_THROWS_AS(load_model(dir / "m.dyst"), CheckpointError);
  std::ofstream(dir / "bad.dyst", std::ios::binary) << "DYSX";
  CHECK_THROWS_AS(load_model(dir / "bad.dyst"), CheckpointError);
  CHECK_THROWS(load_model(dir / "missing.dyst"));
  fs::remove_all(dir);
}

TEST_CASE("applying a checkpoint requires matching names and shapes") {
  Rng rng(3);
  ParamStore store;
  store.add("a", {2, 2});
  store.add("b", {1, 3});
  CheckpointData ok{KeyValues{}, {{"a", test::random_tensor(2, 2, rng)}, {"b", test::random_tensor(1, 3, rng)}}};
  apply_checkpoint(ok, store);
  CHECK(store.get("a").value == ok.tensors[0].second);

  CheckpointData renamed = ok;
  renamed.tensors[1].first = "c";
  CHECK_THROWS_AS(apply_checkpoint(renamed, store), CheckpointError);
  CheckpointData reshaped = ok;
  reshaped.tensors[0].second = Tensor::zeros(4, 1);
  CHECK_THROWS_AS(apply_checkpoint(reshaped, store), CheckpointError);
  CheckpointData missing = ok;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(apply_checkpoint(missing, store), CheckpointError);
}

TEST_CASE("motion CSV round trip") {
  const auto dir = scratch("csv");
  Rng rng(4);
  const Tensor m = test::random_tensor(7, 4, rng);
  write_motion_csv(dir / "m.csv", m);
  CHECK(read_motion_csv(dir / "m.csv") == m);
  CHECK(slurp(dir / "m.csv").rfind("m0,m1,m2,m3\n", 0) == 0);
  std::ofstream(dir / "ragged.csv") << "m0,m1\n1,2\n3\n";
  CHECK_THROWS(read_motion_csv(dir / "ragged.csv"));
  fs::remove_all(dir);
}

TEST_CASE("cli exit codes") {
  Cli cli("codes");
  CHECK(cli.run("--help") == 0);
  CHECK(cli.run("") == 1);
  CHECK(cli.run("frobnicate") == 1);
  CHECK(cli.run("synth --episodes notanumber " + cli.out()) == 1);
  CHECK(cli.run("--set nokey synth " + cli.out()) == 1);
  CHECK(cli.run("synth --out " + (cli.dir / "absent").string()) == 2);
  CHECK(cli.stderr_text().find("does not exist") != std::string::npos);
  CHECK(cli.run("generate --model " + (cli.dir / "none.dyst").string() + " --data x " + cli.out()) == 2);
  CHECK(cli.run("stream --clock sundial --model x " + cli.out()) == 1);
}

TEST_CASE("cli pipeline end to end") {
  Cli cli("pipeline");
  const std::string data = " --data " + (cli.dir / "synth.dsw").string();
  REQUIRE(cli.run("--seed 5 synth --episodes 6 --frames 40 --name synth.dsw " + cli.out()) == 0);
  const std::string first = slurp(cli.dir / "synth.dsw");
  REQUIRE(cli.run("--seed 5 synth --episodes 6 --frames 40 --name synth.dsw " + cli.out()) == 0);
  CHECK(first == slurp(cli.dir / "synth.dsw"));
  CHECK(fs::exists(manifest_path_for(cli.dir / "synth.dsw")));

  CHECK(cli.run("distill --teacher " + (cli.dir / "teacher.dyst").string() + data + " " + cli.out()) == 2);
  REQUIRE(cli.run("pretrain" + data + " " + cli.out()) == 0);
  REQUIRE(cli.run("distill --lookahead 2 --teacher " + (cli.dir / "teacher.dyst").string() + data + " " + cli.out()) ==
          0);
  CHECK(fs::exists(cli.dir / "student_L2.dyst"));

  // Zero steps still writes a loadable model.
  REQUIRE(cli.run("train --steps 0" + data + " " + cli.out()) == 0);
  CHECK(slurp(cli.dir / "loss.csv") == "step,loss\n");
  CHECK_NOTHROW(load_model(cli.dir / "model.dyst"));

  REQUIRE(cli.run("train --speaker-encoder " + (cli.dir / "student_L2.dyst").string() + data + " " + cli.out()) == 0);
  const auto model = load_model(cli.dir / "model.dyst");
  CHECK(model->config().speaker.lookahead == 2);

  const fs::path gen_dir = cli.dir / "gen", stream_dir = cli.dir / "stream", eval_dir = cli.dir / "eval";
  for (const auto& d : {gen_dir, stream_dir, eval_dir}) fs::create_directories(d);
  const std::string model_arg = " --model " + (cli.dir / "model.dyst").string();
  REQUIRE(cli.run("--out " + gen_dir.string() + " generate" + model_arg + data) == 0);
  REQUIRE(cli.run("--out " + stream_dir.string() + " stream --packet-ms 100 --virtual-cost-ms 1" + model_arg + data) ==
          0);
  for (std::size_t e = 0; e < 6; ++e) {
    const std::string name = "motion_ep" + std::to_string(e) + ".csv";
    CHECK(slurp(gen_dir / name) == slurp(stream_dir / name));
    std::ifstream trace(stream_dir / ("trace_ep" + std::to_string(e) + ".csv"));
    CHECK(validate_trace_csv(trace) == "");
  }
  CHECK(cli.run("stream --stdin" + model_arg + data + " " + cli.out()) == 1);

  REQUIRE(cli.run("--out " + eval_dir.string() + " eval --ground-truth" + data) == 0);
  const auto truth = KeyValues::load(eval_dir / "report.txt");
  CHECK(truth.raw("mse") == "0");
  REQUIRE(cli.run("--out " + eval_dir.string() + " eval --motion-dir " + gen_dir.string() + data) == 0);
  CHECK(KeyValues::load(eval_dir / "report.txt").has("sync_proxy"));
  CHECK(cli.run("--out " + eval_dir.string() + " eval" + data) == 1);

  REQUIRE(cli.run("ablate --lookahead-list 0" + data + " " + cli.out()) == 0);
  const std::string csv = slurp(cli.dir / "ablation.csv");
  CHECK(csv.rfind(std::string(kAblationHeader) + "\n0,0,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(cli.run("ablate --lookahead-list 0,x" + data + " " + cli.out()) == 1);
  fs::remove_all(cli.dir);
}
