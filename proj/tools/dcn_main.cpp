#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dcn/runner.hpp"

namespace {

// exit codes: 0 ok, 2 config, 3 non-finite loss, 4 architecture mismatch
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitArch = 4;

int do_train(const std::string& config_path, const dcn::TrainOptions& opt) {
  dcn::RunConfig cfg = dcn::load_config(config_path);
  dcn::TrainOutcome out = dcn::run_train(cfg, opt);
  std::cout << "trained " << out.iterations << " iterations\n"
            << "metrics: " << out.metrics_path << "\n"
            << "checkpoint: " << out.final_checkpoint << "\n";
  return 0;
}

int do_eval(const std::string& config_path, const std::string& checkpoint,
            const dcn::EvalOptions& opt, const std::string& out_dir) {
  dcn::RunConfig cfg = dcn::load_config(config_path);
  dcn::EvalReport rep = dcn::run_eval(cfg, checkpoint, opt);
  std::cout << rep.table_header() << "\n" << rep.table_row() << "\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(std::filesystem::path(out_dir) / "eval_report.json");
    f << rep.to_json() << "\n";
  }
  return 0;
}

int do_ensemble(const std::string& config_path, const std::string& dir,
                const dcn::EnsembleOptions& opt, const std::string& out_dir) {
  dcn::RunConfig cfg = dcn::load_config(config_path);
  dcn::EnsembleReport rep = dcn::run_ensemble(cfg, dir, opt);
  std::cout << "selection (" << rep.selection.selected.size() << " of "
            << rep.selection.candidates.size() << " snapshots):\n"
            << rep.trace_text;
  std::cout << "validation: best single " << rep.best_single_val_score << ", ensemble "
            << rep.ensemble_val_score << "\n";
  std::cout << rep.ensemble_eval.table_header() << "\n"
            << rep.ensemble_eval.table_row() << "\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream trace(std::filesystem::path(out_dir) / "selection_trace.txt");
    trace << rep.trace_text;
    std::ofstream f(std::filesystem::path(out_dir) / "ensemble_report.json");
    f << rep.ensemble_eval.to_json() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decoder-choice-network meta-learning toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume, checkpoint, ckpt_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t threads = 1;
  std::size_t iterations = 0;
  std::size_t episodes = 1000;
  std::size_t inner_steps = 10;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--threads", threads, "task-level parallelism (1 = bitwise reproducible)");
    cmd->add_option("--out", out_dir, "output directory");
  };

  CLI::App* train = app.add_subcommand("train", "run the outer training loop");
  train->add_option("config", config_path, "run config (JSON)")->required();
  train->add_option("--iterations", iterations, "override outer.iterations");
  train->add_option("--resume", resume, "continue from a checkpoint");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh episodes");
  eval->add_option("config", config_path, "run config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--episodes", episodes, "number of evaluation episodes");
  eval->add_option("--inner-steps", inner_steps, "adaptation steps per episode");
  add_common(eval);

  CLI::App* ens = app.add_subcommand("ensemble", "greedy snapshot selection and evaluation");
  ens->add_option("config", config_path, "run config (JSON)")->required();
  ens->add_option("--dir", ckpt_dir, "directory of snapshot checkpoints")->required();
  ens->add_option("--episodes", episodes, "number of evaluation episodes");
  ens->add_option("--inner-steps", inner_steps, "adaptation steps per episode");
  add_common(ens);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      dcn::TrainOptions opt;
      opt.out_dir = out_dir.empty() ? "." : out_dir;
      if (seed_set) opt.seed = seed;
      if (iterations > 0) opt.iterations = iterations;
      opt.threads = threads;
      opt.resume = resume;
      opt.progress = &std::cerr;
      return do_train(config_path, opt);
    }
    if (eval->parsed()) {
      dcn::EvalOptions opt;
      opt.episodes = episodes;
      opt.inner_steps = inner_steps;
      if (seed_set) opt.seed = seed;
      opt.threads = threads;
      return do_eval(config_path, checkpoint, opt, out_dir);
    }
    dcn::EnsembleOptions opt;
    opt.eval_episodes = episodes;
    opt.inner_steps = inner_steps;
    opt.threads = threads;
    return do_ensemble(config_path, ckpt_dir, opt, out_dir);
  } catch (const dcn::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dcn::ArchMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitArch;
  } catch (const dcn::TrainingError& e) {
    std::cerr << "error: " << e.what();
    if (e.task_id >= 0) std::cerr << " (task " << e.task_id << ")";
    std::cerr << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
