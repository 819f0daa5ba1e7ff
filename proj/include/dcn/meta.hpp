#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn/choice.hpp"
#include "dcn/decoder.hpp"
#include "dcn/tasks.hpp"

namespace dcn {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& msg, std::int64_t task_id = -1)
      : std::runtime_error(msg), task_id(task_id) {}
  std::int64_t task_id;
};

enum class LossKind { kMse, kCrossEntropy };

/// Architecture of one experiment's model: a dense feed-forward predict net
/// (ReLU hidden layers, linear output) where selected weight matrices are
/// produced by the decoder bank instead of being free parameters.
struct ModelSpec {
  std::vector<std::size_t> layer_sizes;  // {in, hidden..., out}
  std::vector<std::size_t> dcn_layers;   // weight indices generated by decoders
  std::size_t embed_layers = 0;          // leading layers frozen during inner loops
  LatentSpec latent;
  std::size_t trunk_heads = 1, trunk_m = 1;
  std::size_t head_heads = 1, head_m = 1;
  std::size_t decoders = 4;    // S
  std::size_t state_vars = 2;  // N_f, S = 2^{N_f}
  std::size_t routing_iters = 3;
  double shrink_lambda = 0.01;
  double latent_init_sigma = 0.1;
  bool normalize_blocks = true;
  DecoderKind decoder_kind = DecoderKind::kGlt;
  LossKind loss = LossKind::kMse;
  Reduction loss_reduction = Reduction::kMean;
  bool is_dcn = true;  // false: plain model, every parameter inner-tuned (MAML)

  std::size_t weight_count() const { return layer_sizes.size() - 1; }
  bool layer_generated(std::size_t l) const;
  std::size_t choice_channels() const;  // input width of the DCN layers
};

struct NamedVar {
  std::string name;
  Var var;
};

/// Full learnable state: frozen embedding, latent code, decoder/choice
/// parameters, per-block norms, directly tuned dense parameters, and the
/// learnable inner-rate pairs.
struct MetaModel {
  ModelSpec spec;
  std::vector<Var> weights;  // per weight index; undefined where generated
  std::vector<Var> biases;   // always present
  Var z;
  DecoderBank bank;
  ChoiceParams choice;
  std::vector<ParamNorm> norms;        // one per generated block
  std::vector<ParamBlockSpec> blocks;  // target shapes, dcn_layers order
  Var rate_alpha_z, rate_wd_z;         // inner-rate pair for the latent code
  Var rate_alpha_fc, rate_wd_fc;       // pair for the directly tuned group

  /// stable-ordered parameter list; rates included only when requested
  std::vector<NamedVar> learnable(bool include_rates) const;
};

MetaModel make_meta_model(Rng& rng, const ModelSpec& spec, double alpha_init);

struct InnerConfig {
  std::size_t steps = 2;  // M
  double alpha = 0.01;
  bool learnable_rates = false;
  double clip_norm = 0.0;  // 0 disables clipping
  bool first_order = false;
};

struct InnerResult {
  Var test_loss;    // scalar node; differentiable w.r.t. Theta when tracked
  Var train_loss;   // last inner-step training loss
  Tensor test_pred;  // adapted query predictions (probabilities for classification)
  double test_accuracy = 0.0;
};

/// Algorithm: choices once from the initial forward pass, then M gradient
/// steps on (z', fc'), a final decode, and the query loss. theta_fe and
/// theta_cd are read, never written. track_meta=false detaches inner
/// gradients (evaluation / first-order).
InnerResult inner_loop(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                       bool track_meta = true);

/// plain MAML baseline: M gradient steps on every non-frozen parameter
InnerResult maml_inner_loop(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                            bool track_meta = true);

/// dispatch on spec.is_dcn
InnerResult adapt(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                  bool track_meta = true);

/// global-norm clipping as graph ops (meta-gradient flows through the factor)
std::vector<Var> clip_grad_norm(const std::vector<Var>& grads, double max_norm);

struct AmsgradState {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::int64_t step_count = 0;
  std::vector<Tensor> m1, m2, m2_max;
};

AmsgradState make_amsgrad_state(const std::vector<NamedVar>& params);
/// one AMSGrad update in place; lr_mult scales the rate per parameter
void amsgrad_step(const std::vector<NamedVar>& params, const std::vector<Tensor>& grads,
                  AmsgradState& st, double lr, const std::vector<double>& lr_mult);

struct OuterMetrics {
  double mean_train_loss = 0.0;
  double mean_test_loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

/// value of sum_i L_i^test over the batch (the FD-differentiable objective)
double meta_objective(const MetaModel& m, const std::vector<Episode>& episodes,
                      const InnerConfig& cfg);

/// d(sum_i L_i^test)/d(wrt), reduced over tasks in episode order
std::vector<Tensor> meta_gradient(const MetaModel& m, const std::vector<Episode>& episodes,
                                  const InnerConfig& cfg, const std::vector<NamedVar>& wrt,
                                  OuterMetrics* metrics = nullptr, std::size_t threads = 1);

/// inner loops over the batch, meta-gradient, one AMSGrad step on Theta
/// (inner-rate pairs stepped at 0.1x the outer rate)
OuterMetrics outer_step(MetaModel& m, const std::vector<Episode>& episodes,
                        const InnerConfig& icfg, AmsgradState& opt, double lr,
                        std::size_t threads = 1);

}  // namespace dcn
