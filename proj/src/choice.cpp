#include "dcn/choice.hpp"

#include <cmath>

namespace dcn {

ChoiceParams make_choice_params(Rng& rng, std::size_t kernel_dims, std::size_t channels,
                                std::size_t state_vars, std::size_t routing_iters) {
  if (state_vars == 0) throw TensorError("choice params: need at least one state variable");
  ChoiceParams p;
  p.state_vars = state_vars;
  p.routing_iters = routing_iters;
  p.w.reserve(kernel_dims);
  double bound = 1.0 / std::sqrt(double(channels));
  for (std::size_t k = 0; k < kernel_dims; ++k) {
    Tensor w({state_vars, channels});
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    p.w.push_back(leaf(std::move(w)));
  }
  return p;
}

std::vector<Var> extract_task_features(const Var& layer_input,
                                       const std::vector<std::size_t>& input_dims,
                                       const KernelSpec& kernel, const ChoiceParams& params) {
  if (input_dims.size() != 4)
    throw TensorError("extract_task_features: input_dims must be {N_d, C_in, H_in, W_in}");
  std::size_t nd = input_dims[0], cin = input_dims[1], hin = input_dims[2], win = input_dims[3];
  if (layer_input.numel() != nd * cin * hin * win)
    throw TensorError("extract_task_features: input tensor does not match dims");
  if (params.w.size() != kernel.kernel_dims() ||
      (!params.w.empty() && params.w[0].value().cols() != cin))
    throw TensorError("extract_task_features: channel weights do not match layer geometry");
  std::size_t nf = params.state_vars;

  // dense layers are the degenerate 1x1 scan; u_hat[n, (e,d)] = w[n,e] act[d,e]
  // built from broadcasts instead of per-channel gathers
  if (kernel.kernel_dims() == 1 && hin == 1 && win == 1 && kernel.stride_h == 1 &&
      kernel.stride_w == 1 && kernel.pad_h == 0 && kernel.pad_w == 0) {
    Var flat = reshape(transpose(reshape(layer_input, {nd, cin})), {1, cin * nd});
    Var w_exp = reshape(broadcast_to(reshape(params.w[0], {nf, cin, 1}), {nf, cin, nd}),
                        {nf, cin * nd});
    return {mul(w_exp, flat)};
  }

  std::size_t padded_h = hin + 2 * kernel.pad_h;
  std::size_t padded_w = win + 2 * kernel.pad_w;
  if (kernel.kernel_h > padded_h || kernel.kernel_w > padded_w)
    throw TensorError("extract_task_features: kernel larger than padded input");
  std::size_t hou = (padded_h - kernel.kernel_h) / kernel.stride_h + 1;
  std::size_t wou = (padded_w - kernel.kernel_w) / kernel.stride_w + 1;

  std::vector<Var> result;
  result.reserve(kernel.kernel_dims());
  for (std::size_t ka = 0; ka < kernel.kernel_h; ++ka) {
    for (std::size_t kb = 0; kb < kernel.kernel_w; ++kb) {
      std::size_t kd = ka * kernel.kernel_w + kb;
      // per channel: gather scanned positions across all examples into one row,
      // project by w_k^e, then concatenate channels along the column axis
      std::vector<Var> channel_blocks;
      channel_blocks.reserve(cin);
      for (std::size_t e = 0; e < cin; ++e) {
        auto idx = std::make_shared<std::vector<std::ptrdiff_t>>();
        idx->reserve(nd * hou * wou);
        for (std::size_t n = 0; n < nd; ++n) {
          for (std::size_t i = 0; i < hou; ++i) {
            for (std::size_t j = 0; j < wou; ++j) {
              std::ptrdiff_t h = std::ptrdiff_t(ka + i * kernel.stride_h) - std::ptrdiff_t(kernel.pad_h);
              std::ptrdiff_t w = std::ptrdiff_t(kb + j * kernel.stride_w) - std::ptrdiff_t(kernel.pad_w);
              if (h < 0 || w < 0 || h >= std::ptrdiff_t(hin) || w >= std::ptrdiff_t(win)) {
                idx->push_back(-1);  // zero padding
              } else {
                idx->push_back(std::ptrdiff_t(((n * cin + e) * hin + std::size_t(h)) * win) + w);
              }
            }
          }
        }
        Var row = gather(layer_input, IndexMap(idx), {1, nd * hou * wou});
        // channel e's weight column as [N_f, 1]
        Var w_col = transpose(slice_rows(transpose(params.w[kd]), e, 1));
        channel_blocks.push_back(transpose(matmul(w_col, row)));  // [L, N_f]
      }
      Var stacked = channel_blocks.size() == 1 ? channel_blocks[0] : concat_rows(channel_blocks);
      result.push_back(transpose(stacked));  // [N_f, J]
    }
  }
  return result;
}

Var squash(const Var& s) {
  Var n2 = sum_all(mul(s, s));
  // when |s| = 0 the output is exactly 0; the mask keeps sqrt off the 0 kink
  Var nonzero = mask_gt(n2, 0.0);
  Var norm = vsqrt(add(n2, sub(constant(1.0), nonzero)));
  return mul(s, vdiv(norm, add_const(n2, 1.0)));
}

Var dynamic_routing(const Var& u_hat, std::size_t iters, RoutingTrace* trace) {
  if (iters < 1) throw TensorError("dynamic_routing: need at least one iteration");
  if (u_hat.value().rank() != 2)
    throw TensorError("dynamic_routing: features must be [N_f, J]");
  std::size_t nf = u_hat.value().rows();

  Var b = constant(Tensor(u_hat.shape()));  // zero logits
  Var v;
  for (std::size_t r = 0; r < iters; ++r) {
    // softmax over the N_f axis: every column of L sums to 1
    Var coupling = transpose(softmax_rows(transpose(b)));
    Var s = sum_to_shape(mul(coupling, u_hat), {nf, 1});
    v = squash(s);
    b = mul(u_hat, v);  // b_{n.} = u_{n|.} v_n, overwritten each iteration
    if (trace) {
      trace->coupling.push_back(coupling.value());
      trace->logits.push_back(b.value());
    }
  }
  return reshape(v, {nf});
}

Var state_variables(const Var& v) { return scale(add_const(v, 1.0), 0.5); }

Var membership(const Var& x) {
  Var above0 = mask_gt(x, 0.0);
  Var above1 = mask_gt(x, 1.0);
  return add(sub(constant(1.0), above0), mul(sub(constant(1.0), x), sub(above0, above1)));
}

double membership(double x) {
  if (x <= 0.0) return 1.0;
  if (x > 1.0) return 0.0;
  return 1.0 - x;
}

std::vector<Var> decoder_weights(const Var& gamma, std::size_t decoders) {
  std::size_t nf = gamma.numel();
  if (decoders != (std::size_t(1) << nf))
    throw TensorError("decoder_weights: S must equal 2^{N_f}");
  Var mu_a = membership(gamma);
  Var mu_b = sub(constant(1.0), mu_a);
  std::vector<Var> c;
  c.reserve(decoders);
  for (std::size_t s = 0; s < decoders; ++s) {
    // bit n of (s-1), zero-based here: clear -> mu_A, set -> mu_B
    Var prod;
    for (std::size_t n = 0; n < nf; ++n) {
      Var factor = (s >> n) & 1 ? slice_rows(mu_b, n, 1) : slice_rows(mu_a, n, 1);
      prod = prod.defined() ? mul(prod, factor) : factor;
    }
    c.push_back(prod);
  }
  return c;
}

std::vector<FuzzyWeights> choose(const Var& layer_input, const std::vector<std::size_t>& input_dims,
                                 const KernelSpec& kernel, const ChoiceParams& params) {
  auto features = extract_task_features(layer_input, input_dims, kernel, params);
  std::vector<FuzzyWeights> out;
  out.reserve(features.size());
  for (const auto& u_hat : features) {
    Var v = dynamic_routing(u_hat, params.routing_iters);
    FuzzyWeights fw;
    fw.gamma = state_variables(v);
    fw.c = decoder_weights(fw.gamma, params.decoders());
    out.push_back(std::move(fw));
  }
  return out;
}

}  // namespace dcn
