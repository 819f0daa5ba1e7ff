#include "dcn/meta.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace dcn {

bool ModelSpec::layer_generated(std::size_t l) const {
  if (!is_dcn) return false;
  return std::find(dcn_layers.begin(), dcn_layers.end(), l) != dcn_layers.end();
}

std::size_t ModelSpec::choice_channels() const {
  if (dcn_layers.empty()) return 0;
  std::size_t ch = layer_sizes[dcn_layers[0]];
  for (std::size_t l : dcn_layers) {
    if (layer_sizes[l] != ch)
      throw TensorError("model spec: DCN layers must share their input width");
  }
  return ch;
}

std::vector<NamedVar> MetaModel::learnable(bool include_rates) const {
  std::vector<NamedVar> out;
  for (std::size_t l = 0; l < spec.weight_count(); ++l) {
    if (weights[l].defined())
      out.push_back({"layer" + std::to_string(l) + ".weight", weights[l]});
    out.push_back({"layer" + std::to_string(l) + ".bias", biases[l]});
  }
  if (spec.is_dcn) {
    out.push_back({"latent.z", z});
    if (bank.kind == DecoderKind::kGlt) {
      for (std::size_t n = 0; n < bank.trunk.weights.size(); ++n)
        out.push_back({"decoder.trunk.w" + std::to_string(n), bank.trunk.weights[n]});
      for (std::size_t s = 0; s < bank.heads.size(); ++s)
        for (std::size_t n = 0; n < bank.heads[s].weights.size(); ++n)
          out.push_back({"decoder.head" + std::to_string(s) + ".w" + std::to_string(n),
                         bank.heads[s].weights[n]});
    }
    for (std::size_t k = 0; k < choice.w.size(); ++k)
      out.push_back({"choice.k" + std::to_string(k), choice.w[k]});
    for (std::size_t i = 0; i < norms.size(); ++i) {
      out.push_back({"norm" + std::to_string(i) + ".gamma", norms[i].gamma_scale});
      out.push_back({"norm" + std::to_string(i) + ".beta", norms[i].beta_shift});
    }
  }
  if (include_rates) {
    if (spec.is_dcn) {
      out.push_back({"rates.alpha_z", rate_alpha_z});
      out.push_back({"rates.wd_z", rate_wd_z});
    }
    out.push_back({"rates.alpha_fc", rate_alpha_fc});
    out.push_back({"rates.wd_fc", rate_wd_fc});
  }
  return out;
}

MetaModel make_meta_model(Rng& rng, const ModelSpec& spec, double alpha_init) {
  if (spec.layer_sizes.size() < 2) throw TensorError("model spec: need at least two layer sizes");
  for (std::size_t l : spec.dcn_layers) {
    if (l >= spec.weight_count()) throw TensorError("model spec: DCN layer index out of range");
    if (l < spec.embed_layers) throw TensorError("model spec: DCN layer inside frozen embedding");
  }
  if (spec.is_dcn && spec.decoders != (std::size_t(1) << spec.state_vars))
    throw TensorError("model spec: S must equal 2^{N_f}");

  MetaModel m;
  m.spec = spec;
  m.weights.resize(spec.weight_count());
  m.biases.reserve(spec.weight_count());
  for (std::size_t l = 0; l < spec.weight_count(); ++l) {
    std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    if (!spec.layer_generated(l)) {
      double bound = 1.0 / std::sqrt(double(in));
      Tensor w({in, out});
      for (auto& v : w.data()) v = rng.uniform(-bound, bound);
      m.weights[l] = leaf(std::move(w));
    }
    m.biases.push_back(leaf(Tensor({1, out})));
  }

  if (spec.is_dcn) {
    if (spec.dcn_layers.empty()) throw TensorError("model spec: DCN model without DCN layers");
    Tensor zv({spec.latent.d, spec.latent.groups});
    for (auto& v : zv.data()) v = spec.latent_init_sigma * rng.normal();
    m.z = leaf(std::move(zv));
    m.bank = spec.decoder_kind == DecoderKind::kIdentity
                 ? make_identity_bank(spec.decoders)
                 : make_decoder_bank(rng, spec.latent, spec.trunk_heads, spec.trunk_m,
                                     spec.head_heads, spec.head_m, spec.decoders,
                                     spec.shrink_lambda);
    m.choice = make_choice_params(rng, 1, spec.choice_channels(), spec.state_vars,
                                  spec.routing_iters);
    for (std::size_t l : spec.dcn_layers) {
      m.norms.push_back(make_param_norm());
      m.blocks.push_back(ParamBlockSpec{{spec.layer_sizes[l], spec.layer_sizes[l + 1]}});
    }
  }

  m.rate_alpha_z = leaf(Tensor::scalar(alpha_init));
  m.rate_wd_z = leaf(Tensor::scalar(0.0));
  m.rate_alpha_fc = leaf(Tensor::scalar(alpha_init));
  m.rate_wd_fc = leaf(Tensor::scalar(0.0));
  return m;
}

namespace {

Var layer_activation(const ModelSpec& spec, std::size_t l, Var pre) {
  return l + 1 < spec.weight_count() ? relu(pre) : pre;  // linear output layer
}

Var task_loss(const ModelSpec& spec, const Var& pred, const Var& target) {
  return spec.loss == LossKind::kMse
             ? mse_loss(pred, target, spec.loss_reduction)
             : cross_entropy_loss(pred, target, spec.loss_reduction);
}

/// decode one block: combine heads with fuzzy weights, normalize, resize, reshape
Var block_weight(const MetaModel& m, const Var& stacked, std::size_t block_idx,
                 const std::vector<Var>& c) {
  Var mixed = decode_stacked(stacked, c);
  if (m.spec.normalize_blocks) mixed = param_normalize(mixed, m.norms[block_idx]);
  Var flat = resize_params(mixed, m.blocks[block_idx]);
  return reshape(flat, m.blocks[block_idx].shape);
}

struct InnerState {
  Var zcur;
  std::vector<Var> fc;  // inner-tuned direct parameters, slot order
};

struct FcSlot {
  std::size_t layer;
  bool is_bias;
};

std::vector<FcSlot> fc_slots(const ModelSpec& spec) {
  std::vector<FcSlot> slots;
  for (std::size_t l = spec.embed_layers; l < spec.weight_count(); ++l) {
    if (!spec.layer_generated(l)) slots.push_back({l, false});
    slots.push_back({l, true});
  }
  return slots;
}

struct LayerParams {
  Var w, b;
};

/// assemble per-layer parameters from the model, current inner state, and
/// freshly decoded blocks (empty for plain models)
std::vector<LayerParams> assemble(const MetaModel& m, const std::vector<FcSlot>& slots,
                                  const InnerState& st, const std::vector<Var>& decoded) {
  std::vector<LayerParams> lp(m.spec.weight_count());
  for (std::size_t l = 0; l < m.spec.weight_count(); ++l) {
    lp[l].w = m.weights[l];
    lp[l].b = m.biases[l];
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].is_bias)
      lp[slots[i].layer].b = st.fc[i];
    else
      lp[slots[i].layer].w = st.fc[i];
  }
  std::size_t bi = 0;
  for (std::size_t l : m.spec.dcn_layers) lp[l].w = decoded[bi++];
  return lp;
}

Var forward(const ModelSpec& spec, const std::vector<LayerParams>& lp, Var x) {
  for (std::size_t l = 0; l < spec.weight_count(); ++l)
    x = layer_activation(spec, l, add(matmul(x, lp[l].w), lp[l].b));
  return x;
}

/// gradient step on (z', fc') with per-group rates and decoupled weight decay
void apply_updates(const MetaModel& m, const InnerConfig& cfg, InnerState& st,
                   const std::vector<Var>& grads, bool has_latent) {
  Var az, wz, af, wf;
  if (cfg.learnable_rates) {
    az = m.rate_alpha_z;
    wz = m.rate_wd_z;
    af = m.rate_alpha_fc;
    wf = m.rate_wd_fc;
  } else {
    az = af = constant(cfg.alpha);
    wz = wf = Var{};
  }
  std::size_t gi = 0;
  if (has_latent) {
    Var step = wz.defined() ? add(grads[gi], mul(wz, st.zcur)) : grads[gi];
    st.zcur = sub(st.zcur, mul(az, step));
    ++gi;
  }
  for (auto& p : st.fc) {
    Var step = wf.defined() ? add(grads[gi], mul(wf, p)) : grads[gi];
    p = sub(p, mul(af, step));
    ++gi;
  }
}

void finish_result(const ModelSpec& spec, const Episode& ep, Var pred, Var test_loss,
                   Var train_loss, InnerResult& out) {
  if (!test_loss.value().all_finite() || !train_loss.value().all_finite())
    throw TrainingError("non-finite loss in inner loop", ep.task_id);
  out.test_loss = test_loss;
  out.train_loss = train_loss;
  if (spec.loss == LossKind::kCrossEntropy) {
    out.test_pred = softmax_rows(pred).value();
    out.test_accuracy = accuracy(out.test_pred, ep.test_y);
  } else {
    out.test_pred = pred.value();
  }
}

}  // namespace

std::vector<Var> clip_grad_norm(const std::vector<Var>& grads, double max_norm) {
  if (max_norm <= 0.0) throw TensorError("clip_grad_norm: max norm must be positive");
  Var n2;
  for (const auto& g : grads) {
    Var s = sum_all(mul(g, g));
    n2 = n2.defined() ? add(n2, s) : s;
  }
  // guard the sqrt at zero, and divide only on the clipped branch
  Var safe_n2 = add(n2, sub(constant(1.0), mask_gt(n2, 0.0)));
  Var norm = vsqrt(safe_n2);
  Var over = mask_gt(norm, max_norm);
  Var factor = add(sub(constant(1.0), over), mul(over, vdiv(constant(max_norm), norm)));
  std::vector<Var> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(mul(g, factor));
  return out;
}

InnerResult inner_loop(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                       bool track_meta) {
  if (!m.spec.is_dcn) throw TensorError("inner_loop: model has no decoder; use maml_inner_loop");
  const ModelSpec& spec = m.spec;
  auto slots = fc_slots(spec);

  InnerState st;
  st.zcur = m.z;
  st.fc.reserve(slots.size());
  for (const auto& s : slots) st.fc.push_back(s.is_bias ? m.biases[s.layer] : m.weights[s.layer]);

  Var train_x = constant(ep.train_x);
  Var train_y = constant(ep.train_y);

  // one initial pass over the training activations picks every layer's
  // decoder weights; they stay fixed for the whole adaptation
  std::vector<std::vector<Var>> block_c(m.blocks.size());
  std::vector<Var> decoded0(m.blocks.size());
  {
    Var stacked0 = decoder_forward_stacked(m.z, m.bank);
    Var act = train_x;
    std::size_t bi = 0;
    for (std::size_t l = 0; l < spec.weight_count(); ++l) {
      LayerParams p;
      p.w = m.weights[l];
      p.b = m.biases[l];
      if (spec.layer_generated(l)) {
        auto fw = choose(act, {act.value().rows(), act.value().cols(), 1, 1}, KernelSpec{},
                         m.choice);
        block_c[bi] = fw[0].c;
        decoded0[bi] = p.w = block_weight(m, stacked0, bi, block_c[bi]);
        ++bi;
      }
      act = layer_activation(spec, l, add(matmul(act, p.w), p.b));
    }
  }

  Var train_loss;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Var> decoded(m.blocks.size());
    if (step == 0) {
      decoded = decoded0;  // reuse the choice pass decode (same z)
    } else {
      Var stacked = decoder_forward_stacked(st.zcur, m.bank);
      for (std::size_t b = 0; b < m.blocks.size(); ++b)
        decoded[b] = block_weight(m, stacked, b, block_c[b]);
    }
    Var pred = forward(spec, assemble(m, slots, st, decoded), train_x);
    train_loss = task_loss(spec, pred, train_y);
    if (!train_loss.value().all_finite())
      throw TrainingError("non-finite training loss in inner loop", ep.task_id);

    std::vector<Var> wrt;
    wrt.push_back(st.zcur);
    for (const auto& p : st.fc) wrt.push_back(p);
    bool create = track_meta && !cfg.first_order;
    std::vector<Var> grads = grad(train_loss, wrt, create);
    if (cfg.clip_norm > 0.0) grads = clip_grad_norm(grads, cfg.clip_norm);
    apply_updates(m, cfg, st, grads, /*has_latent=*/true);
  }

  // final decode with the adapted latent code, same choices
  std::vector<Var> decoded(m.blocks.size());
  if (cfg.steps == 0) {
    decoded = decoded0;
  } else {
    Var stacked = decoder_forward_stacked(st.zcur, m.bank);
    for (std::size_t b = 0; b < m.blocks.size(); ++b)
      decoded[b] = block_weight(m, stacked, b, block_c[b]);
  }
  auto lp = assemble(m, slots, st, decoded);
  Var test_pred = forward(spec, lp, constant(ep.test_x));
  Var test_loss = task_loss(spec, test_pred, constant(ep.test_y));
  if (!train_loss.defined()) {
    Var pred0 = forward(spec, lp, train_x);
    train_loss = task_loss(spec, pred0, train_y);
  }

  InnerResult out;
  finish_result(spec, ep, test_pred, test_loss, train_loss, out);
  return out;
}

InnerResult maml_inner_loop(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                            bool track_meta) {
  if (m.spec.is_dcn) throw TensorError("maml_inner_loop: model has decoder components");
  const ModelSpec& spec = m.spec;
  auto slots = fc_slots(spec);

  InnerState st;
  for (const auto& s : slots) st.fc.push_back(s.is_bias ? m.biases[s.layer] : m.weights[s.layer]);

  Var train_x = constant(ep.train_x);
  Var train_y = constant(ep.train_y);

  Var train_loss;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Var pred = forward(spec, assemble(m, slots, st, {}), train_x);
    train_loss = task_loss(spec, pred, train_y);
    if (!train_loss.value().all_finite())
      throw TrainingError("non-finite training loss in inner loop", ep.task_id);
    bool create = track_meta && !cfg.first_order;
    std::vector<Var> grads = grad(train_loss, st.fc, create);
    if (cfg.clip_norm > 0.0) grads = clip_grad_norm(grads, cfg.clip_norm);
    apply_updates(m, cfg, st, grads, /*has_latent=*/false);
  }

  auto lp = assemble(m, slots, st, {});
  Var test_pred = forward(spec, lp, constant(ep.test_x));
  Var test_loss = task_loss(spec, test_pred, constant(ep.test_y));
  if (!train_loss.defined()) {
    Var pred0 = forward(spec, lp, train_x);
    train_loss = task_loss(spec, pred0, train_y);
  }

  InnerResult out;
  finish_result(spec, ep, test_pred, test_loss, train_loss, out);
  return out;
}

InnerResult adapt(const MetaModel& m, const Episode& ep, const InnerConfig& cfg,
                  bool track_meta) {
  return m.spec.is_dcn ? inner_loop(m, ep, cfg, track_meta)
                       : maml_inner_loop(m, ep, cfg, track_meta);
}

AmsgradState make_amsgrad_state(const std::vector<NamedVar>& params) {
  AmsgradState st;
  st.m1.reserve(params.size());
  for (const auto& p : params) {
    st.m1.push_back(Tensor(p.var.shape()));
    st.m2.push_back(Tensor(p.var.shape()));
    st.m2_max.push_back(Tensor(p.var.shape()));
  }
  return st;
}

void amsgrad_step(const std::vector<NamedVar>& params, const std::vector<Tensor>& grads,
                  AmsgradState& st, double lr, const std::vector<double>& lr_mult) {
  if (params.size() != grads.size() || params.size() != st.m1.size())
    throw TensorError("amsgrad_step: state does not match parameters");
  st.step_count += 1;
  double bc1 = 1.0 - std::pow(st.beta1, double(st.step_count));
  double bc2 = 1.0 - std::pow(st.beta2, double(st.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = grads[i];
    Tensor value = params[i].var.value();
    double rate = lr * (i < lr_mult.size() ? lr_mult[i] : 1.0);
    for (std::size_t j = 0; j < g.numel(); ++j) {
      st.m1[i][j] = st.beta1 * st.m1[i][j] + (1.0 - st.beta1) * g[j];
      st.m2[i][j] = st.beta2 * st.m2[i][j] + (1.0 - st.beta2) * g[j] * g[j];
      st.m2_max[i][j] = std::max(st.m2_max[i][j], st.m2[i][j]);
      double mhat = st.m1[i][j] / bc1;
      double vhat = st.m2_max[i][j] / bc2;
      value[j] -= rate * mhat / (std::sqrt(vhat) + st.epsilon);
    }
    params[i].var.set_value(std::move(value));
  }
}

double meta_objective(const MetaModel& m, const std::vector<Episode>& episodes,
                      const InnerConfig& cfg) {
  double total = 0.0;
  for (const auto& ep : episodes) total += adapt(m, ep, cfg, /*track_meta=*/false).test_loss.value()[0];
  return total;
}

std::vector<Tensor> meta_gradient(const MetaModel& m, const std::vector<Episode>& episodes,
                                  const InnerConfig& cfg, const std::vector<NamedVar>& wrt,
                                  OuterMetrics* metrics, std::size_t threads) {
  if (episodes.empty()) throw TensorError("meta_gradient: empty task batch");
  std::vector<Var> vars;
  vars.reserve(wrt.size());
  for (const auto& p : wrt) vars.push_back(p.var);

  // per-task backward: task graphs are independent, so each task's gradient
  // is computed (and freed) separately; the reduction below runs in ascending
  // task order, making the result identical for any thread count
  struct TaskOut {
    std::vector<Var> grads;
    double train_loss = 0.0, test_loss = 0.0, accuracy = 0.0;
  };
  std::vector<TaskOut> results(episodes.size());

  auto run_task = [&](std::size_t i) {
    InnerResult r = adapt(m, episodes[i], cfg);
    TaskOut out;
    out.grads = grad(r.test_loss, vars, /*create_graph=*/false);
    out.train_loss = r.train_loss.value()[0];
    out.test_loss = r.test_loss.value()[0];
    out.accuracy = r.test_accuracy;
    for (std::size_t p = 0; p < out.grads.size(); ++p) {
      if (!out.grads[p].value().all_finite())
        throw TrainingError("non-finite meta-gradient for " + wrt[p].name, episodes[i].task_id);
    }
    results[i] = std::move(out);
  };

  if (threads <= 1 || episodes.size() == 1) {
    for (std::size_t i = 0; i < episodes.size(); ++i) run_task(i);
  } else {
    std::size_t n_workers = std::min<std::size_t>(threads, episodes.size());
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < episodes.size(); i += n_workers) run_task(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (std::size_t p = 0; p < wrt.size(); ++p) out.push_back(results[0].grads[p].value());
  double train_sum = results[0].train_loss, test_sum = results[0].test_loss;
  double acc_sum = results[0].accuracy;
  for (std::size_t i = 1; i < episodes.size(); ++i) {
    for (std::size_t p = 0; p < wrt.size(); ++p) {
      const Tensor& g = results[i].grads[p].value();
      for (std::size_t j = 0; j < g.numel(); ++j) out[p][j] += g[j];
    }
    train_sum += results[i].train_loss;
    test_sum += results[i].test_loss;
    acc_sum += results[i].accuracy;
  }
  if (metrics) {
    metrics->mean_train_loss = train_sum / double(episodes.size());
    metrics->mean_test_loss = test_sum / double(episodes.size());
    metrics->accuracy = acc_sum / double(episodes.size());
  }
  return out;
}

OuterMetrics outer_step(MetaModel& m, const std::vector<Episode>& episodes,
                        const InnerConfig& icfg, AmsgradState& opt, double lr,
                        std::size_t threads) {
  auto params = m.learnable(icfg.learnable_rates);
  OuterMetrics metrics;
  std::vector<Tensor> grads = meta_gradient(m, episodes, icfg, params, &metrics, threads);
  std::vector<double> mult(params.size(), 1.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name.rfind("rates.", 0) == 0) mult[i] = 0.1;
  }
  amsgrad_step(params, grads, opt, lr, mult);
  metrics.lr = lr;
  return metrics;
}

}  // namespace dcn
