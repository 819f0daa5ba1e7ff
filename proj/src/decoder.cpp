#include "dcn/decoder.hpp"

#include <cmath>

namespace dcn {

GLTLayer make_glt(Rng& rng, std::size_t heads, std::size_t m, std::size_t in_rows) {
  if (heads == 0 || m == 0 || in_rows == 0) throw TensorError("make_glt: zero dimension");
  GLTLayer layer;
  layer.weights.reserve(heads);
  double bound = 1.0 / std::sqrt(double(in_rows));
  for (std::size_t n = 0; n < heads; ++n) {
    Tensor w({m, in_rows});
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    layer.weights.push_back(leaf(std::move(w)));
  }
  return layer;
}

Var glt_forward(const Var& z, const GLTLayer& layer) {
  if (layer.weights.empty()) throw TensorError("glt_forward: no weights");
  if (z.value().rank() != 2)
    throw TensorError("glt_forward: latent must be [d, N_g], got " + shape_str(z.shape()));
  // stacking the weight matrices first makes the whole layer one product:
  // concat_rows(W_1..W_Nh) z == concat_rows(W_1 z, ..., W_Nh z)
  Var w = layer.weights.size() == 1 ? layer.weights[0] : concat_rows(layer.weights);
  return matmul(w, z);
}

std::size_t DecoderBank::out_dim(const LatentSpec& latent) const {
  if (kind == DecoderKind::kIdentity) return latent.dim();
  return heads.empty() ? 0 : heads[0].out_rows() * latent.groups;
}

DecoderBank make_decoder_bank(Rng& rng, const LatentSpec& latent, std::size_t trunk_heads,
                              std::size_t trunk_m, std::size_t head_heads, std::size_t head_m,
                              std::size_t decoders, double shrink_lambda) {
  DecoderBank bank;
  bank.kind = DecoderKind::kGlt;
  bank.shrink_lambda = shrink_lambda;
  bank.trunk = make_glt(rng, trunk_heads, trunk_m, latent.d);
  std::size_t hidden_rows = bank.trunk.out_rows();
  bank.heads.reserve(decoders);
  for (std::size_t s = 0; s < decoders; ++s)
    bank.heads.push_back(make_glt(rng, head_heads, head_m, hidden_rows));
  return bank;
}

DecoderBank make_identity_bank(std::size_t decoders) {
  DecoderBank bank;
  bank.kind = DecoderKind::kIdentity;
  bank.identity_heads = decoders;
  return bank;
}

Var decoder_forward_stacked(const Var& z, const DecoderBank& bank) {
  if (bank.kind == DecoderKind::kIdentity) {
    return broadcast_to(reshape(z, {1, z.numel()}), {bank.identity_heads, z.numel()});
  }
  Var hidden = elu(glt_forward(z, bank.trunk));
  // every head's matrices stacked into one product; row-major reshape then
  // yields one flat raw block per row
  std::vector<Var> all;
  all.reserve(bank.heads.size() * bank.heads[0].weights.size());
  for (const auto& head : bank.heads)
    for (const auto& w : head.weights) all.push_back(w);
  Var raw = softshrink(matmul(all.size() == 1 ? all[0] : concat_rows(all), hidden),
                       bank.shrink_lambda);
  return reshape(raw, {bank.heads.size(), raw.numel() / bank.heads.size()});
}

std::vector<Var> decoder_forward(const Var& z, const DecoderBank& bank) {
  Var stacked = decoder_forward_stacked(z, bank);
  std::size_t s_count = stacked.value().rows();
  std::size_t dim = stacked.value().cols();
  std::vector<Var> out;
  out.reserve(s_count);
  for (std::size_t s = 0; s < s_count; ++s)
    out.push_back(reshape(slice_rows(stacked, s, 1), {dim}));
  return out;
}

Var decode(const std::vector<Var>& heads, const std::vector<Var>& c) {
  if (heads.empty() || heads.size() != c.size())
    throw TensorError("decode: need one weight per decoder head");
  double total = 0.0;
  for (const auto& w : c) total += w.value()[0];
  if (std::abs(total - 1.0) > 1e-9)
    throw TensorError("decode: fuzzy weights must sum to 1, got " + std::to_string(total));
  Var acc = mul(c[0], heads[0]);
  for (std::size_t s = 1; s < heads.size(); ++s) acc = add(acc, mul(c[s], heads[s]));
  return acc;
}

Var decode_stacked(const Var& stacked, const std::vector<Var>& c) {
  if (stacked.value().rank() != 2 || stacked.value().rows() != c.size())
    throw TensorError("decode_stacked: need one weight per stacked row");
  double total = 0.0;
  for (const auto& w : c) total += w.value()[0];
  if (std::abs(total - 1.0) > 1e-9)
    throw TensorError("decode_stacked: fuzzy weights must sum to 1, got " + std::to_string(total));
  std::vector<Var> rows;
  rows.reserve(c.size());
  for (const auto& w : c) rows.push_back(reshape(w, {1, 1}));
  Var c_row = transpose(concat_rows(rows));  // [1, S]
  return reshape(matmul(c_row, stacked), {stacked.value().cols()});
}

ParamNorm make_param_norm() {
  return ParamNorm{leaf(Tensor::scalar(1.0)), leaf(Tensor::scalar(0.0)), 1e-5};
}

Var param_normalize(const Var& raw_block, const ParamNorm& pn) {
  std::size_t n = raw_block.numel();
  if (n == 0) throw TensorError("param_normalize: empty block");
  Var mean = scale(sum_all(raw_block), 1.0 / double(n));
  Var centered = sub(raw_block, mean);
  Var var = scale(sum_all(mul(centered, centered)), 1.0 / double(n));  // population variance
  Var denom = vsqrt(add_const(var, pn.epsilon));
  return add(mul(pn.gamma_scale, vdiv(centered, denom)), pn.beta_shift);
}

Var resize_params(const Var& raw_flat, const ParamBlockSpec& spec) {
  Var flat = raw_flat.value().rank() == 1 ? raw_flat : reshape(raw_flat, {raw_flat.numel()});
  return interp_linear(flat, spec.flat_size());
}

ComplexityReport param_counts(const CountsInput& in) {
  ComplexityReport r;
  if (in.layer_sizes.size() < 2) throw TensorError("param_counts: need at least two layer sizes");

  // predict model: weights + biases per layer
  std::size_t n_weights = in.layer_sizes.size() - 1;
  std::int64_t generated = 0;
  for (std::size_t l = 0; l < n_weights; ++l) {
    std::int64_t w = std::int64_t(in.layer_sizes[l]) * std::int64_t(in.layer_sizes[l + 1]);
    std::int64_t b = std::int64_t(in.layer_sizes[l + 1]);
    r.predict_model_params += w + b;
    bool is_dcn = false;
    for (std::size_t d : in.dcn_layers) is_dcn = is_dcn || d == l;
    if (is_dcn) generated += w;  // biases of generated layers stay direct
  }
  r.maml_total_params = r.predict_model_params;
  r.direct_params = r.predict_model_params - generated;

  // decoder bank, enumerated
  std::size_t hidden_rows = in.trunk_heads * in.trunk_m;
  r.glt_actual_params = std::int64_t(in.trunk_heads * in.trunk_m * in.latent.d) +
                        std::int64_t(in.decoders * in.head_heads * in.head_m * hidden_rows);
  r.latent_params = std::int64_t(in.latent.dim());
  r.choice_params = std::int64_t(in.choice_channels * in.state_vars);
  r.norm_params = std::int64_t(2 * in.dcn_layers.size());
  r.dcn_total_params = r.direct_params + r.latent_params + r.glt_actual_params +
                       r.choice_params + r.norm_params;

  // reference closed forms
  std::int64_t dim_z = std::int64_t(in.latent.dim());
  std::int64_t dim_h = std::int64_t(hidden_rows * in.latent.groups);
  std::int64_t dim_theta =
      std::int64_t(in.head_heads * in.head_m * in.latent.groups);  // one head's output
  r.fc_decoder_params = (dim_z + dim_theta * std::int64_t(in.decoders)) * dim_h;
  if (dim_z > 0 && dim_h > 0) {
    r.glt_formula_params =
        (dim_h / dim_z) * std::int64_t(in.latent.groups * in.latent.groups) +
        (dim_theta / dim_h) * std::int64_t(in.decoders * in.head_heads * in.head_heads);
  }

  // descriptors: dominant channel width, layer count, kernel size (1 for dense)
  for (std::size_t s : in.layer_sizes) r.channels = std::max<std::int64_t>(r.channels, s);
  r.layer_count = std::int64_t(n_weights);
  r.kernel_size = 1;
  return r;
}

std::string report_str(const ComplexityReport& r) {
  std::string s;
  s += "predict model params: " + std::to_string(r.predict_model_params) + "\n";
  s += "maml total:           " + std::to_string(r.maml_total_params) + "\n";
  s += "dcn total:            " + std::to_string(r.dcn_total_params) + "\n";
  s += "  latent:             " + std::to_string(r.latent_params) + "\n";
  s += "  decoder (glt):      " + std::to_string(r.glt_actual_params) + "\n";
  s += "  choice net:         " + std::to_string(r.choice_params) + "\n";
  s += "  block norms:        " + std::to_string(r.norm_params) + "\n";
  s += "  direct:             " + std::to_string(r.direct_params) + "\n";
  s += "fc decoder baseline:  " + std::to_string(r.fc_decoder_params) + "\n";
  s += "glt closed form:      " + std::to_string(r.glt_formula_params) + "\n";
  return s;
}

}  // namespace dcn
