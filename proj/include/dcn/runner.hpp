#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "dcn/checkpoint.hpp"
#include "dcn/config.hpp"

namespace dcn {

class ArchMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

MetaModel build_model(const RunConfig& cfg, Rng& init_rng);

/// deterministic episode stream for one purpose (train / eval / validation)
class EpisodeStream {
 public:
  EpisodeStream(const RunConfig& cfg, Rng rng) : cfg_(cfg), rng_(rng) {}
  Episode next(std::int64_t task_id);
  std::uint64_t rng_state() const { return rng_.state(); }
  void set_rng_state(std::uint64_t s) { rng_.set_state(s); }

 private:
  RunConfig cfg_;
  Rng rng_;
};

/// every persistable array: parameters (rates included) plus optimizer state
Checkpoint make_snapshot(const RunConfig& cfg, const MetaModel& model, const AmsgradState& opt,
                         std::int64_t iteration, std::uint64_t task_rng_state);
void restore_model(MetaModel& model, const Checkpoint& ckpt);
void restore_optimizer(AmsgradState& opt, const std::vector<NamedVar>& opt_params,
                       const Checkpoint& ckpt);

struct TrainOptions {
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::size_t threads = 1;
  std::string resume;              // optional checkpoint path
  std::ostream* progress = nullptr;  // live progress (wall clock lives here only)
};

struct TrainOutcome {
  std::string final_checkpoint;
  std::string metrics_path;
  std::size_t iterations = 0;
  OuterMetrics last;
};

TrainOutcome run_train(const RunConfig& cfg, const TrainOptions& opt);

struct EvalOptions {
  std::size_t episodes = 1000;
  std::size_t inner_steps = 10;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

struct EvalReport {
  std::size_t episodes = 0;
  std::size_t inner_steps = 0;
  std::size_t shot = 0;
  bool classification = false;
  double mean_loss = 0.0, ci95_loss = 0.0;
  double mean_accuracy = 0.0, ci95_accuracy = 0.0;
  std::string model_label;

  std::string table_header() const;
  std::string table_row() const;
  std::string to_json() const;
};

EvalReport run_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const EvalOptions& opt);

struct EnsembleOptions {
  std::size_t eval_episodes = 1000;
  std::size_t inner_steps = 10;
  std::size_t threads = 1;
};

struct EnsembleReport {
  SnapshotSet selection;
  double best_single_val_score = 0.0;  // on the selection episodes
  double ensemble_val_score = 0.0;
  EvalReport ensemble_eval;            // on fresh evaluation episodes
  std::string trace_text;
};

EnsembleReport run_ensemble(const RunConfig& cfg, const std::string& checkpoint_dir,
                            const EnsembleOptions& opt);

}  // namespace dcn
