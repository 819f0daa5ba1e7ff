#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn/autodiff.hpp"
#include "dcn/rng.hpp"

namespace dcn {

/// Latent code layout: [d, N_g] — N_g column groups of width d. Column j of
/// any GLT output depends only on column j of z (group independence).
struct LatentSpec {
  std::size_t d = 2;
  std::size_t groups = 16;
  std::size_t dim() const { return d * groups; }
};

/// Group linear transformation: every weight matrix W_n [m, in_rows] is
/// applied to all column groups; the N_h results are stacked along rows.
struct GLTLayer {
  std::vector<Var> weights;  // N_h matrices, shared shape [m, in_rows]
  std::size_t head_count() const { return weights.size(); }
  std::size_t out_rows() const {
    return weights.empty() ? 0 : weights[0].value().rows() * weights.size();
  }
};

GLTLayer make_glt(Rng& rng, std::size_t heads, std::size_t m, std::size_t in_rows);

/// h_n = W_n z, stacked in head order -> [m*N_h, N_g]
Var glt_forward(const Var& z, const GLTLayer& layer);

enum class DecoderKind {
  kGlt,       // trunk GLT -> ELU -> per-head GLT -> softshrink
  kIdentity,  // every head returns flatten(z); for MAML-equivalence setups
};

/// S decoders sharing one trunk; two layers per decoder path.
struct DecoderBank {
  DecoderKind kind = DecoderKind::kGlt;
  GLTLayer trunk;
  std::vector<GLTLayer> heads;  // S of them, identical output dimension
  double shrink_lambda = 0.01;

  std::size_t head_count() const { return kind == DecoderKind::kIdentity ? identity_heads : heads.size(); }
  std::size_t identity_heads = 0;  // used when kind == kIdentity
  std::size_t out_dim(const LatentSpec& latent) const;
};

DecoderBank make_decoder_bank(Rng& rng, const LatentSpec& latent, std::size_t trunk_heads,
                              std::size_t trunk_m, std::size_t head_heads, std::size_t head_m,
                              std::size_t decoders, double shrink_lambda);
DecoderBank make_identity_bank(std::size_t decoders);

/// one flat raw parameter block per decoder, all the same length
std::vector<Var> decoder_forward(const Var& z, const DecoderBank& bank);

/// all S raw blocks as the rows of one [S, out_dim] tensor (fused form)
Var decoder_forward_stacked(const Var& z, const DecoderBank& bank);

/// convex combination of head outputs with fuzzy weights c (scalar Vars)
Var decode(const std::vector<Var>& heads, const std::vector<Var>& c);

/// decode from the stacked form: one [1,S] x [S,dim] product
Var decode_stacked(const Var& stacked, const std::vector<Var>& c);

/// batch-norm style standardization of one decoded block
struct ParamNorm {
  Var gamma_scale;  // scalar leaf
  Var beta_shift;   // scalar leaf
  double epsilon = 1e-5;
};

ParamNorm make_param_norm();
Var param_normalize(const Var& raw_block, const ParamNorm& pn);

/// target shape for one generated weight block
struct ParamBlockSpec {
  std::vector<std::size_t> shape;
  std::size_t flat_size() const { return shape_numel(shape); }
};

/// 1-D piecewise-linear resample to the block's flat size (identity when equal)
Var resize_params(const Var& raw_flat, const ParamBlockSpec& spec);

/// Parameter accounting for a model configuration. Enumerated counts are
/// ground truth; the closed-form fields reproduce the reference formulas for
/// comparison.
struct ComplexityReport {
  std::int64_t fc_decoder_params = 0;      // [dim(z) + dim(theta)*S] * dim(h)
  std::int64_t glt_formula_params = 0;     // informational closed form
  std::int64_t glt_actual_params = 0;      // enumerated trunk + heads
  std::int64_t predict_model_params = 0;   // all predict-net weights + biases
  std::int64_t maml_total_params = 0;      // plain model: everything learnable
  std::int64_t dcn_total_params = 0;       // latent + decoders + choice + norms + direct
  std::int64_t latent_params = 0;
  std::int64_t choice_params = 0;
  std::int64_t norm_params = 0;
  std::int64_t direct_params = 0;          // non-generated weights + all biases
  // predict-model descriptors
  std::int64_t channels = 0;     // F
  std::int64_t layer_count = 0;  // N_l
  std::int64_t kernel_size = 1;  // K_s
};

struct CountsInput {
  std::vector<std::size_t> layer_sizes;   // e.g. {1, 40, 40, 35, 1}
  std::vector<std::size_t> dcn_layers;    // indices into weight matrices (0-based)
  LatentSpec latent;
  std::size_t trunk_heads = 0, trunk_m = 0;
  std::size_t head_heads = 0, head_m = 0;
  std::size_t decoders = 0;               // S
  std::size_t state_vars = 0;             // N_f
  std::size_t choice_channels = 0;        // C_in feeding the choice net
};

ComplexityReport param_counts(const CountsInput& in);
std::string report_str(const ComplexityReport& r);

}  // namespace dcn
