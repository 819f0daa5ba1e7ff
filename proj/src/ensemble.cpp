#include "dcn/ensemble.hpp"

#include <algorithm>
#include <cmath>

namespace dcn {

double lr_at(std::size_t iteration, const LrSchedule& sched) {
  if (iteration < 1) throw TensorError("lr_at: iterations are 1-based");
  double base = sched.base;
  if (sched.decay_interval > 0)
    base *= std::pow(sched.decay_factor, double((iteration - 1) / sched.decay_interval));
  if (sched.cyclic_start == 0 || iteration < sched.cyclic_start) return base;
  std::size_t phase = (iteration - sched.cyclic_start) % sched.cyclic_period;
  constexpr double kPi = 3.14159265358979323846;
  return base / 2.0 * (std::cos(kPi * double(phase) / double(sched.cyclic_period)) + 1.0);
}

SnapshotSet greedy_select(std::vector<SnapshotCandidate> candidates,
                          const EnsembleScoreFn& ensemble_score) {
  if (candidates.empty()) throw TensorError("greedy_select: no candidates");
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const SnapshotCandidate& a, const SnapshotCandidate& b) {
                     return a.score > b.score;
                   });
  SnapshotSet set;
  set.candidates = std::move(candidates);
  for (std::size_t i = 0; i < set.candidates.size(); ++i) {
    const auto& cand = set.candidates[i];
    std::vector<std::size_t> trial = set.selected;
    trial.push_back(i);
    std::vector<const SnapshotCandidate*> members;
    members.reserve(trial.size());
    for (std::size_t idx : trial) members.push_back(&set.candidates[idx]);
    double score = ensemble_score(members);
    if (set.selected.empty() || score > set.ensemble_score) {
      set.selected = std::move(trial);
      set.ensemble_score = score;
      set.trace.push_back("admit " + cand.checkpoint + " single=" + std::to_string(cand.score) +
                          " ensemble=" + std::to_string(score));
    } else {
      set.trace.push_back("drop  " + cand.checkpoint + " single=" + std::to_string(cand.score) +
                          " ensemble=" + std::to_string(score));
    }
  }
  return set;
}

Tensor ensemble_predict(const std::vector<Tensor>& member_outputs) {
  if (member_outputs.empty()) throw TensorError("ensemble_predict: no members");
  Tensor mean = member_outputs[0];
  for (std::size_t i = 1; i < member_outputs.size(); ++i) {
    if (!member_outputs[i].same_shape(mean))
      throw TensorError("ensemble_predict: member output shapes differ");
    for (std::size_t j = 0; j < mean.numel(); ++j) mean[j] += member_outputs[i][j];
  }
  for (double& v : mean.data()) v /= double(member_outputs.size());
  return mean;
}

}  // namespace dcn
