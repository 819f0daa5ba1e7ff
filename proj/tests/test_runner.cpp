#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcn/runner.hpp"

using namespace dcn;
namespace fs = std::filesystem;

namespace {

std::string tiny_sinusoid_config(std::size_t iterations, std::uint64_t seed = 7) {
  std::ostringstream s;
  s << R"({
  "experiment": "sinusoid",
  "seed": )" << seed << R"(,
  "model": {
    "layers": [1, 8, 8, 1],
    "dcn_layers": [1],
    "latent": {"d": 2, "groups": 4},
    "trunk": {"heads": 1, "m": 2},
    "head": {"heads": 2, "m": 4},
    "decoders": 4,
    "state_vars": 2
  },
  "data": {"shot": 3, "query": 3},
  "inner": {"steps": 1, "alpha": 0.01},
  "outer": {"beta": 0.001, "batch": 4, "iterations": )" << iterations << R"(},
  "ensemble": {"checkpoint_interval": 2, "pool_cap": 3, "val_episodes": 4},
  "eval": {"episodes": 20, "inner_steps": 3}
})";
  return s.str();
}

std::string glyph_config(std::size_t iterations, std::uint64_t seed) {
  std::ostringstream s;
  s << R"({
    "experiment": "glyph",
    "seed": )" << seed << R"(,
    "model": {
      "layers": [196, 16, 16, 5],
      "dcn_layers": [1],
      "embed_layers": 1,
      "latent": {"d": 2, "groups": 4},
      "trunk": {"heads": 1, "m": 2},
      "head": {"heads": 2, "m": 4},
      "decoders": 2,
      "state_vars": 1
    },
    "data": {"way": 5, "shot": 1, "query": 1, "class_count": 32},
    "inner": {"steps": 1, "alpha": 0.01, "clip_norm": 1.0, "learnable_rates": true},
    "outer": {"beta": 0.001, "batch": 2, "iterations": )" << iterations << R"(},
    "eval": {"episodes": 4, "inner_steps": 2}
  })";
  return s.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::path("runner_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config rejects unknown keys with the offending path") {
  std::string good = tiny_sinusoid_config(5);
  CHECK_NOTHROW(parse_config(good));

  std::string bad = good;
  bad.replace(bad.find("\"alpha\""), 7, "\"alhpa\"");
  try {
    parse_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("inner.alhpa") != std::string::npos);
  }
}

TEST_CASE("config validates decoder count against state variables") {
  std::string bad = tiny_sinusoid_config(5);
  bad.replace(bad.find("\"decoders\": 4"), 13, "\"decoders\": 3");
  try {
    parse_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("decoders") != std::string::npos);
  }
}

TEST_CASE("malformed JSON is reported as a parse diagnostic") {
  CHECK_THROWS_AS(parse_config("{ not json"), ConfigError);
}

TEST_CASE("checkpoint round trip is byte-identical") {
  TmpDir tmp("ckpt_roundtrip");
  Checkpoint ckpt;
  ckpt.config_json = parse_config(tiny_sinusoid_config(5)).to_json();
  ckpt.iteration = 42;
  ckpt.rng_state = "12345678901234567890";
  Rng rng(3);
  Tensor a({3, 4});
  for (auto& v : a.data()) v = rng.uniform(-1, 1);
  ckpt.arrays.emplace_back("alpha", a);
  ckpt.arrays.emplace_back("beta", Tensor({2}, {1e-300, -0.0}));

  std::string p1 = (tmp.path / "one.ckpt").string();
  std::string p2 = (tmp.path / "two.ckpt").string();
  save_checkpoint(p1, ckpt);
  Checkpoint back = load_checkpoint(p1);
  save_checkpoint(p2, back);
  CHECK(read_file(p1) == read_file(p2));
  CHECK(back.iteration == 42);
  CHECK(back.find("alpha") != nullptr);
  CHECK(*back.find("alpha") == a);
}

TEST_CASE("training smoke run: one metrics line per iteration plus a final checkpoint") {
  TmpDir tmp("smoke");
  RunConfig cfg = parse_config(tiny_sinusoid_config(10));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  TrainOutcome out = run_train(cfg, opt);
  CHECK(out.iterations == 10);
  CHECK(fs::exists(out.final_checkpoint));
  std::string metrics = read_file(out.metrics_path);
  CHECK(line_count(metrics) == 10);
  // every line parses on its own
  std::istringstream is(metrics);
  std::string line;
  while (std::getline(is, line)) CHECK(line.find("\"iter\"") != std::string::npos);
}

TEST_CASE("equal seeds produce bit-identical metrics and checkpoints") {
  TmpDir t1("det_a"), t2("det_b");
  RunConfig cfg = parse_config(tiny_sinusoid_config(6));
  TrainOptions o1, o2;
  o1.out_dir = t1.str();
  o2.out_dir = t2.str();
  TrainOutcome r1 = run_train(cfg, o1);
  TrainOutcome r2 = run_train(cfg, o2);
  CHECK(read_file(r1.metrics_path) == read_file(r2.metrics_path));
  CHECK(read_file(r1.final_checkpoint) == read_file(r2.final_checkpoint));

  TmpDir t3("det_c");
  TrainOptions o3;
  o3.out_dir = t3.str();
  o3.seed = 99;  // different seed, different bytes
  TrainOutcome r3 = run_train(cfg, o3);
  CHECK(read_file(r1.metrics_path) != read_file(r3.metrics_path));
}

TEST_CASE("checkpoint resume equals uninterrupted training bitwise") {
  RunConfig cfg = parse_config(tiny_sinusoid_config(8));

  TmpDir full("resume_full");
  TrainOptions fo;
  fo.out_dir = full.str();
  TrainOutcome whole = run_train(cfg, fo);

  TmpDir part("resume_part");
  RunConfig half = cfg;
  half.iterations = 5;
  TrainOptions po;
  po.out_dir = part.str();
  TrainOutcome first = run_train(half, po);

  TrainOptions ro;
  ro.out_dir = part.str();
  ro.resume = first.final_checkpoint;
  // resuming rewrites final.ckpt after continuing to the full horizon
  TrainOutcome second = run_train(cfg, ro);
  CHECK(read_file(second.final_checkpoint) == read_file(whole.final_checkpoint));
}

TEST_CASE("eval is deterministic and checks the architecture") {
  TmpDir tmp("eval");
  RunConfig cfg = parse_config(tiny_sinusoid_config(5));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  TrainOutcome out = run_train(cfg, opt);

  EvalOptions ev;
  ev.episodes = 30;
  ev.inner_steps = 3;
  EvalReport r1 = run_eval(cfg, out.final_checkpoint, ev);
  EvalReport r2 = run_eval(cfg, out.final_checkpoint, ev);
  CHECK(r1.to_json() == r2.to_json());
  CHECK(r1.mean_loss > 0.0);

  RunConfig other = cfg;
  other.layer_sizes = {1, 9, 9, 1};
  CHECK_THROWS_AS(run_eval(other, out.final_checkpoint, ev), ArchMismatchError);
}

TEST_CASE("confidence interval shrinks roughly like 1/sqrt(n)") {
  // bounded per-episode accuracies give the cleanest 1/sqrt(n) behaviour;
  // raw sinusoid MSE is too heavy-tailed for a sample-sd comparison
  TmpDir tmp("ci");
  RunConfig cfg = parse_config(glyph_config(3, /*seed=*/5));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  TrainOutcome out = run_train(cfg, opt);

  double ci_small = 0.0, ci_big = 0.0;
  for (std::uint64_t s = 11; s <= 13; ++s) {
    EvalOptions small, big;
    small.episodes = 200;
    small.inner_steps = 1;
    small.seed = s;
    big.episodes = 800;
    big.inner_steps = 1;
    big.seed = 100 + s;
    ci_small += run_eval(cfg, out.final_checkpoint, small).ci95_accuracy;
    ci_big += run_eval(cfg, out.final_checkpoint, big).ci95_accuracy;
  }
  double ratio = ci_big / ci_small;
  CHECK(ratio > 0.5 * 0.8);
  CHECK(ratio < 0.5 * 1.2);
}

TEST_CASE("ensemble of a single checkpoint reproduces the plain evaluation") {
  TmpDir tmp("ens_single");
  RunConfig cfg = parse_config(tiny_sinusoid_config(4));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  TrainOutcome out = run_train(cfg, opt);

  TmpDir only("ens_only");
  fs::copy_file(out.final_checkpoint, only.path / "final.ckpt");

  EnsembleOptions eo;
  eo.eval_episodes = 25;
  eo.inner_steps = 3;
  EnsembleReport rep = run_ensemble(cfg, only.str(), eo);
  CHECK(rep.selection.selected.size() == 1);

  EvalOptions ev;
  ev.episodes = 25;
  ev.inner_steps = 3;
  EvalReport plain = run_eval(cfg, out.final_checkpoint, ev);
  CHECK(rep.ensemble_eval.mean_loss == doctest::Approx(plain.mean_loss).epsilon(1e-12));
}

TEST_CASE("ensemble validation score is at least the best single score") {
  TmpDir tmp("ens_multi");
  RunConfig cfg = parse_config(tiny_sinusoid_config(8));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  run_train(cfg, opt);  // checkpoint_interval 2 -> several snapshots

  EnsembleOptions eo;
  eo.eval_episodes = 10;
  eo.inner_steps = 2;
  EnsembleReport rep = run_ensemble(cfg, tmp.str(), eo);
  CHECK(rep.selection.candidates.size() >= 2);
  CHECK(rep.ensemble_val_score >= rep.best_single_val_score - 1e-12);
  CHECK(!rep.trace_text.empty());
  // trace mentions every candidate
  CHECK(line_count(rep.trace_text) == rep.selection.candidates.size());
}

TEST_CASE("ensemble on an empty directory is a config error") {
  TmpDir tmp("ens_empty");
  RunConfig cfg = parse_config(tiny_sinusoid_config(3));
  EnsembleOptions eo;
  CHECK_THROWS_AS(run_ensemble(cfg, tmp.str(), eo), ConfigError);
}

TEST_CASE("glyph smoke training with learnable rates and clipping") {
  TmpDir tmp("glyph_smoke");
  RunConfig cfg = parse_config(glyph_config(3, 5));
  TrainOptions opt;
  opt.out_dir = tmp.str();
  TrainOutcome out = run_train(cfg, opt);
  CHECK(fs::exists(out.final_checkpoint));

  EvalOptions ev;
  ev.episodes = 6;
  ev.inner_steps = 2;
  EvalReport rep = run_eval(cfg, out.final_checkpoint, ev);
  CHECK(rep.classification);
  CHECK(rep.mean_accuracy >= 0.0);
  CHECK(rep.mean_accuracy <= 1.0);
}
