#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

/// Outer learning-rate schedule: step decay, optionally switching to cosine
/// cyclic annealing at `cyclic_start`. With cyclic_start == 1 the cyclic
/// branch is exactly alpha(t) = alpha0/2 (cos(pi mod(t-1,T)/T) + 1).
struct LrSchedule {
  double base = 1e-3;                 // alpha_0
  double decay_factor = 0.5;
  std::size_t decay_interval = 0;     // 0 disables step decay
  std::size_t cyclic_period = 2000;   // T
  std::size_t cyclic_start = 0;       // 0 disables the cyclic regime
};

double lr_at(std::size_t iteration, const LrSchedule& sched);  // iteration >= 1

struct SnapshotCandidate {
  std::string checkpoint;  // path or label
  std::size_t iteration = 0;
  double score = 0.0;      // single-model validation score, higher is better
};

struct SnapshotSet {
  std::vector<SnapshotCandidate> candidates;  // sorted by score, descending
  std::vector<std::size_t> selected;          // indices into candidates
  double ensemble_score = 0.0;
  std::vector<std::string> trace;             // admit / drop log lines
};

/// Greedy forward selection: candidates visited in descending single-model
/// score; the first is always kept, later ones only on strict improvement of
/// the ensemble score returned by `ensemble_score` for the trial member set.
using EnsembleScoreFn = std::function<double(const std::vector<const SnapshotCandidate*>&)>;
SnapshotSet greedy_select(std::vector<SnapshotCandidate> candidates,
                          const EnsembleScoreFn& ensemble_score);

/// arithmetic mean of per-member predictions (rows x outputs each)
Tensor ensemble_predict(const std::vector<Tensor>& member_outputs);

}  // namespace dcn
