#include "dcn/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <thread>

namespace dcn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// master-seed stream tags
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainStream = 2;
constexpr std::uint64_t kEvalStream = 3;
constexpr std::uint64_t kValStream = 4;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct MeanCi {
  double mean = 0.0, ci95 = 0.0;
};

MeanCi mean_ci(const std::vector<double>& xs) {
  MeanCi r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= double(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    double sd = std::sqrt(ss / double(xs.size() - 1));
    r.ci95 = 1.96 * sd / std::sqrt(double(xs.size()));
  }
  return r;
}

std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

}  // namespace

MetaModel build_model(const RunConfig& cfg, Rng& init_rng) {
  return make_meta_model(init_rng, cfg.model_spec(), cfg.inner_alpha);
}

Episode EpisodeStream::next(std::int64_t task_id) {
  Episode ep = cfg_.experiment == ExperimentKind::kSinusoid
                   ? sample_sinusoid_episode(rng_, cfg_.shot, cfg_.query)
                   : sample_glyph_episode(rng_, cfg_.glyph_spec(), cfg_.way, cfg_.shot,
                                          cfg_.query);
  ep.task_id = task_id;
  return ep;
}

Checkpoint make_snapshot(const RunConfig& cfg, const MetaModel& model, const AmsgradState& opt,
                         std::int64_t iteration, std::uint64_t task_rng_state) {
  Checkpoint ckpt;
  ckpt.config_json = cfg.to_json();
  ckpt.iteration = iteration;
  ckpt.rng_state = std::to_string(task_rng_state);
  for (const auto& p : model.learnable(true)) ckpt.arrays.emplace_back(p.name, p.var.value());
  auto opt_params = model.learnable(cfg.learnable_rates);
  ckpt.arrays.emplace_back("opt.step_count",
                           Tensor({1}, {double(opt.step_count)}));
  for (std::size_t i = 0; i < opt_params.size(); ++i) {
    ckpt.arrays.emplace_back("opt.m1." + opt_params[i].name, opt.m1[i]);
    ckpt.arrays.emplace_back("opt.m2." + opt_params[i].name, opt.m2[i]);
    ckpt.arrays.emplace_back("opt.m2max." + opt_params[i].name, opt.m2_max[i]);
  }
  return ckpt;
}

void restore_model(MetaModel& model, const Checkpoint& ckpt) {
  for (const auto& p : model.learnable(true)) {
    const Tensor* t = ckpt.find(p.name);
    if (!t) throw ArchMismatchError("checkpoint missing parameter '" + p.name + "'");
    if (t->shape() != p.var.shape())
      throw ArchMismatchError("checkpoint shape mismatch for '" + p.name + "'");
    p.var.set_value(*t);
  }
}

void restore_optimizer(AmsgradState& opt, const std::vector<NamedVar>& opt_params,
                       const Checkpoint& ckpt) {
  const Tensor* steps = ckpt.find("opt.step_count");
  if (!steps) throw ArchMismatchError("checkpoint missing optimizer state");
  opt.step_count = std::int64_t((*steps)[0]);
  for (std::size_t i = 0; i < opt_params.size(); ++i) {
    const Tensor* m1 = ckpt.find("opt.m1." + opt_params[i].name);
    const Tensor* m2 = ckpt.find("opt.m2." + opt_params[i].name);
    const Tensor* mm = ckpt.find("opt.m2max." + opt_params[i].name);
    if (!m1 || !m2 || !mm)
      throw ArchMismatchError("checkpoint missing optimizer state for '" + opt_params[i].name +
                              "'");
    opt.m1[i] = *m1;
    opt.m2[i] = *m2;
    opt.m2_max[i] = *mm;
  }
}

TrainOutcome run_train(const RunConfig& cfg_in, const TrainOptions& opt) {
  RunConfig cfg = cfg_in;
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.iterations) cfg.iterations = *opt.iterations;

  fs::create_directories(opt.out_dir);
  Rng master(cfg.seed);
  Rng init_rng = master.spawn(kInitStream);
  EpisodeStream tasks(cfg, master.spawn(kTrainStream));

  MetaModel model = build_model(cfg, init_rng);
  auto opt_params = model.learnable(cfg.learnable_rates);
  AmsgradState optimizer = make_amsgrad_state(opt_params);

  std::size_t start_iter = 0;
  if (!opt.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(opt.resume);
    RunConfig saved = parse_config(ckpt.config_json);
    if (saved.fingerprint() != cfg.fingerprint())
      throw ArchMismatchError("resume checkpoint was built for a different architecture");
    restore_model(model, ckpt);
    restore_optimizer(optimizer, opt_params, ckpt);
    start_iter = std::size_t(ckpt.iteration);
    tasks.set_rng_state(std::stoull(ckpt.rng_state));
  }

  std::string metrics_path = (fs::path(opt.out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path,
                        opt.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw TrainingError("cannot write metrics file " + metrics_path);

  LrSchedule sched = cfg.schedule();
  InnerConfig icfg = cfg.inner_config();
  // snapshots start with the cyclic regime when one exists, else mid-run
  std::size_t snapshot_start =
      sched.cyclic_start > 0 ? sched.cyclic_start : cfg.iterations / 2;
  std::vector<std::string> snapshots;

  auto t_begin = std::chrono::steady_clock::now();
  TrainOutcome outcome;
  for (std::size_t t = start_iter + 1; t <= cfg.iterations; ++t) {
    double lr = lr_at(t, sched);
    std::vector<Episode> batch;
    batch.reserve(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i)
      batch.push_back(tasks.next(std::int64_t((t - 1) * cfg.batch + i)));

    OuterMetrics m;
    try {
      m = outer_step(model, batch, icfg, optimizer, lr, opt.threads);
    } catch (const TrainingError& e) {
      throw TrainingError("iteration " + std::to_string(t) + ": " + e.what(), e.task_id);
    }
    outcome.last = m;

    json line;
    line["iter"] = t;
    line["train_loss"] = m.mean_train_loss;
    line["test_loss"] = m.mean_test_loss;
    line["accuracy"] = m.accuracy;
    line["lr"] = lr;
    metrics << line.dump() << "\n";

    if (opt.progress && (t % 100 == 0 || t == cfg.iterations)) {
      auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t_begin)
                    .count();
      (*opt.progress) << "iter " << t << "/" << cfg.iterations << " test_loss "
                      << format_double(m.mean_test_loss) << " lr " << format_double(lr, 8)
                      << " wall_ms " << ms << "\n";
    }

    if (cfg.checkpoint_interval > 0 && t >= snapshot_start &&
        (t - snapshot_start) % cfg.checkpoint_interval == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "snap_%08zu.ckpt", t);
      std::string path = (fs::path(opt.out_dir) / name).string();
      save_checkpoint(path, make_snapshot(cfg, model, optimizer, std::int64_t(t),
                                          tasks.rng_state()));
      snapshots.push_back(path);
      while (snapshots.size() > cfg.pool_cap) {
        fs::remove(snapshots.front());
        snapshots.erase(snapshots.begin());
      }
    }
  }
  metrics.flush();

  outcome.final_checkpoint = (fs::path(opt.out_dir) / "final.ckpt").string();
  save_checkpoint(outcome.final_checkpoint,
                  make_snapshot(cfg, model, optimizer, std::int64_t(cfg.iterations),
                                tasks.rng_state()));
  outcome.metrics_path = metrics_path;
  outcome.iterations = cfg.iterations;
  return outcome;
}

namespace {

struct EpisodeScore {
  double loss = 0.0;
  double accuracy = 0.0;
  Tensor prediction;
};

EpisodeScore score_episode(const MetaModel& model, const Episode& ep, InnerConfig icfg,
                           std::size_t steps) {
  icfg.steps = steps;
  InnerResult r = adapt(model, ep, icfg, /*track_meta=*/false);
  EpisodeScore s;
  s.loss = r.test_loss.value()[0];
  s.accuracy = r.test_accuracy;
  s.prediction = r.test_pred;
  return s;
}

/// loss/accuracy of an averaged prediction against the episode's targets
EpisodeScore score_prediction(const RunConfig& cfg, const Episode& ep, Tensor pred) {
  EpisodeScore s;
  s.prediction = std::move(pred);
  if (cfg.experiment == ExperimentKind::kSinusoid) {
    double mse = 0.0;
    for (std::size_t i = 0; i < s.prediction.numel(); ++i) {
      double d = s.prediction[i] - ep.test_y[i];
      mse += d * d;
    }
    s.loss = mse / double(s.prediction.numel());
  } else {
    s.accuracy = accuracy(s.prediction, ep.test_y);
    // cross entropy of averaged probabilities
    double ce = 0.0;
    std::size_t n = s.prediction.rows(), w = s.prediction.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < w; ++k)
        if (ep.test_y[i * w + k] > 0.5)
          ce -= std::log(std::max(s.prediction[i * w + k], 1e-300));
    s.loss = ce / double(n);
  }
  return s;
}

}  // namespace

std::string EvalReport::table_header() const {
  return classification
             ? "model            shot  steps  accuracy +- 95% CI    loss"
             : "model            shot  steps  mse +- 95% CI";
}

std::string EvalReport::table_row() const {
  char buf[160];
  if (classification) {
    std::snprintf(buf, sizeof(buf), "%-16s %-5zu %-6zu %.4f +- %.4f      %.6f", model_label.c_str(),
                  shot, inner_steps, mean_accuracy, ci95_accuracy, mean_loss);
  } else {
    std::snprintf(buf, sizeof(buf), "%-16s %-5zu %-6zu %.6f +- %.6f", model_label.c_str(), shot,
                  inner_steps, mean_loss, ci95_loss);
  }
  return buf;
}

std::string EvalReport::to_json() const {
  json j;
  j["episodes"] = episodes;
  j["inner_steps"] = inner_steps;
  j["shot"] = shot;
  j["classification"] = classification;
  j["mean_loss"] = mean_loss;
  j["ci95_loss"] = ci95_loss;
  j["mean_accuracy"] = mean_accuracy;
  j["ci95_accuracy"] = ci95_accuracy;
  j["model"] = model_label;
  return j.dump();
}

EvalReport run_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const EvalOptions& opt) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig saved = parse_config(ckpt.config_json);
  if (saved.fingerprint() != cfg.fingerprint())
    throw ArchMismatchError("checkpoint architecture does not match the config");

  Rng master(opt.seed ? *opt.seed : cfg.seed);
  Rng init_rng = master.spawn(kInitStream);
  MetaModel model = build_model(cfg, init_rng);
  restore_model(model, ckpt);

  EpisodeStream stream(cfg, master.spawn(kEvalStream));
  std::vector<Episode> episodes;
  episodes.reserve(opt.episodes);
  for (std::size_t i = 0; i < opt.episodes; ++i) episodes.push_back(stream.next(std::int64_t(i)));

  InnerConfig icfg = cfg.inner_config();
  std::vector<double> losses(opt.episodes), accs(opt.episodes);
  parallel_for(opt.episodes, opt.threads, [&](std::size_t i) {
    EpisodeScore s = score_episode(model, episodes[i], icfg, opt.inner_steps);
    losses[i] = s.loss;
    accs[i] = s.accuracy;
  });

  MeanCi l = mean_ci(losses), a = mean_ci(accs);
  EvalReport rep;
  rep.episodes = opt.episodes;
  rep.inner_steps = opt.inner_steps;
  rep.shot = cfg.shot;
  rep.classification = cfg.experiment == ExperimentKind::kGlyph;
  rep.mean_loss = l.mean;
  rep.ci95_loss = l.ci95;
  rep.mean_accuracy = a.mean;
  rep.ci95_accuracy = a.ci95;
  rep.model_label = cfg.maml ? "maml" : "dcn";
  return rep;
}

EnsembleReport run_ensemble(const RunConfig& cfg, const std::string& checkpoint_dir,
                            const EnsembleOptions& opt) {
  std::vector<std::string> paths;
  if (fs::is_directory(checkpoint_dir)) {
    for (const auto& entry : fs::directory_iterator(checkpoint_dir)) {
      if (entry.path().extension() == ".ckpt") paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty())
    throw ConfigError("ensemble: no .ckpt files in '" + checkpoint_dir + "'");

  Rng master(cfg.seed);
  std::vector<MetaModel> models;
  std::vector<std::int64_t> iterations;
  models.reserve(paths.size());
  for (const auto& p : paths) {
    Checkpoint ckpt = load_checkpoint(p);
    RunConfig saved = parse_config(ckpt.config_json);
    if (saved.fingerprint() != cfg.fingerprint())
      throw ArchMismatchError("checkpoint '" + p + "' does not match the config");
    Rng init_rng = master.spawn(kInitStream);
    models.push_back(build_model(cfg, init_rng));
    restore_model(models.back(), ckpt);
    iterations.push_back(ckpt.iteration);
  }

  // fixed validation episodes; every member's predictions cached once
  EpisodeStream val_stream(cfg, master.spawn(kValStream));
  std::vector<Episode> val_eps;
  for (std::size_t i = 0; i < cfg.val_episodes; ++i)
    val_eps.push_back(val_stream.next(std::int64_t(i)));

  InnerConfig icfg = cfg.inner_config();
  bool classification = cfg.experiment == ExperimentKind::kGlyph;
  std::vector<std::vector<Tensor>> preds(models.size(),
                                         std::vector<Tensor>(val_eps.size()));
  std::vector<double> single_scores(models.size());
  parallel_for(models.size() * val_eps.size(), opt.threads, [&](std::size_t flat) {
    std::size_t m = flat / val_eps.size(), e = flat % val_eps.size();
    preds[m][e] = score_episode(models[m], val_eps[e], icfg, opt.inner_steps).prediction;
  });
  auto members_score = [&](const std::vector<std::size_t>& member_models) {
    double total = 0.0;
    for (std::size_t e = 0; e < val_eps.size(); ++e) {
      std::vector<Tensor> outs;
      outs.reserve(member_models.size());
      for (std::size_t m : member_models) outs.push_back(preds[m][e]);
      EpisodeScore s = score_prediction(cfg, val_eps[e], ensemble_predict(outs));
      total += classification ? s.accuracy : -s.loss;
    }
    return total / double(val_eps.size());
  };
  for (std::size_t m = 0; m < models.size(); ++m) single_scores[m] = members_score({m});

  std::vector<SnapshotCandidate> candidates;
  for (std::size_t m = 0; m < models.size(); ++m)
    candidates.push_back({paths[m], std::size_t(iterations[m]), single_scores[m]});

  // candidate -> model index by checkpoint path
  auto model_index = [&](const SnapshotCandidate* c) {
    return std::size_t(std::find(paths.begin(), paths.end(), c->checkpoint) - paths.begin());
  };
  SnapshotSet selection =
      greedy_select(candidates, [&](const std::vector<const SnapshotCandidate*>& members) {
        std::vector<std::size_t> ids;
        ids.reserve(members.size());
        for (const auto* c : members) ids.push_back(model_index(c));
        return members_score(ids);
      });

  EnsembleReport report;
  report.selection = selection;
  report.best_single_val_score =
      *std::max_element(single_scores.begin(), single_scores.end());
  report.ensemble_val_score = selection.ensemble_score;
  for (const auto& line : selection.trace) report.trace_text += line + "\n";

  // fresh evaluation episodes: every selected member adapts per task, outputs averaged
  std::vector<std::size_t> member_ids;
  for (std::size_t idx : selection.selected)
    member_ids.push_back(model_index(&selection.candidates[idx]));

  EpisodeStream eval_stream(cfg, master.spawn(kEvalStream));
  std::vector<Episode> eval_eps;
  for (std::size_t i = 0; i < opt.eval_episodes; ++i)
    eval_eps.push_back(eval_stream.next(std::int64_t(i)));
  std::vector<double> losses(eval_eps.size()), accs(eval_eps.size());
  parallel_for(eval_eps.size(), opt.threads, [&](std::size_t e) {
    std::vector<Tensor> outs;
    outs.reserve(member_ids.size());
    for (std::size_t m : member_ids)
      outs.push_back(score_episode(models[m], eval_eps[e], icfg, opt.inner_steps).prediction);
    EpisodeScore s = score_prediction(cfg, eval_eps[e], ensemble_predict(outs));
    losses[e] = s.loss;
    accs[e] = s.accuracy;
  });
  MeanCi l = mean_ci(losses), a = mean_ci(accs);
  report.ensemble_eval.episodes = eval_eps.size();
  report.ensemble_eval.inner_steps = opt.inner_steps;
  report.ensemble_eval.shot = cfg.shot;
  report.ensemble_eval.classification = classification;
  report.ensemble_eval.mean_loss = l.mean;
  report.ensemble_eval.ci95_loss = l.ci95;
  report.ensemble_eval.mean_accuracy = a.mean;
  report.ensemble_eval.ci95_accuracy = a.ci95;
  report.ensemble_eval.model_label = (cfg.maml ? std::string("maml") : std::string("dcn")) + "-e";
  return report;
}

}  // namespace dcn
