#pragma once

#include <vector>

#include "dcn/autodiff.hpp"
#include "dcn/rng.hpp"

namespace dcn {

/// Scanning geometry of the layer whose task features are being extracted.
/// A fully-connected layer is the degenerate 1x1 kernel over a 1x1 image.
struct KernelSpec {
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t kernel_dims() const { return kernel_h * kernel_w; }
};

/// Learnable channel projections: per kernel dimension one [N_f, C_in]
/// matrix whose column e is the length-N_f weight vector of input channel e.
/// Shared across layers and examples.
struct ChoiceParams {
  std::vector<Var> w;            // [kernel_dims], each Var shape [N_f, C_in]
  std::size_t state_vars = 0;    // N_f
  std::size_t routing_iters = 3; // r
  std::size_t decoders() const { return std::size_t(1) << state_vars; }
};

ChoiceParams make_choice_params(Rng& rng, std::size_t kernel_dims, std::size_t channels,
                                std::size_t state_vars, std::size_t routing_iters = 3);

/// Prediction-vector matrices, one per kernel dimension: each is
/// [N_f, J] with J = H_ou * W_ou * N_d * C_in.
std::vector<Var> extract_task_features(const Var& layer_input,
                                       const std::vector<std::size_t>& input_dims,
                                       const KernelSpec& kernel, const ChoiceParams& params);

/// coupling/logit snapshots per routing iteration, for invariant checks
struct RoutingTrace {
  std::vector<Tensor> coupling;  // L, column-stochastic over the N_f axis
  std::vector<Tensor> logits;    // b after each update
};

/// v = squash(sum_j L_j o u_j) iterated r times from zero logits
Var dynamic_routing(const Var& u_hat, std::size_t iters, RoutingTrace* trace = nullptr);

/// norm-shrinking nonlinearity; |squash(s)| = |s|^2 / (1 + |s|^2) < 1
Var squash(const Var& s);

/// map capsule outputs from [-1, 1] to [0, 1]: gamma = (v + 1) / 2
Var state_variables(const Var& v);

/// triangular membership of fuzzy set A; mu_B = 1 - mu_A
Var membership(const Var& x);
double membership(double x);

/// 2^{N_f} firing-strength products; bit n of (s-1) clear selects mu_A.
/// Sums to 1 identically over gamma in [0,1]^{N_f}.
std::vector<Var> decoder_weights(const Var& gamma, std::size_t decoders);

/// fuzzy weighting for one layer and one kernel dimension
struct FuzzyWeights {
  Var gamma;            // [N_f]
  std::vector<Var> c;   // S scalars
};

/// full pipeline per kernel dimension: features -> routing -> state vars -> weights
std::vector<FuzzyWeights> choose(const Var& layer_input, const std::vector<std::size_t>& input_dims,
                                 const KernelSpec& kernel, const ChoiceParams& params);

}  // namespace dcn
