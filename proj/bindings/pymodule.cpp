#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcn/runner.hpp"

namespace py = pybind11;
using namespace dcn;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[std::size_t(i)] = std::size_t(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::dict episode_dict(const Episode& ep) {
  py::dict d;
  d["train_x"] = to_array(ep.train_x);
  d["train_y"] = to_array(ep.train_y);
  d["test_x"] = to_array(ep.test_x);
  d["test_y"] = to_array(ep.test_y);
  d["way"] = ep.way;
  d["shot"] = ep.shot;
  d["query"] = ep.query;
  d["task_id"] = ep.task_id;
  return d;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["episodes"] = r.episodes;
  d["inner_steps"] = r.inner_steps;
  d["shot"] = r.shot;
  d["classification"] = r.classification;
  d["mean_loss"] = r.mean_loss;
  d["ci95_loss"] = r.ci95_loss;
  d["mean_accuracy"] = r.mean_accuracy;
  d["ci95_accuracy"] = r.ci95_accuracy;
  d["model"] = r.model_label;
  d["row"] = r.table_row();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "decoder-choice-network meta-learning toolkit (C++ core)";

  // elementwise nonlinearities
  m.def("elu", [](const Array& x) { return to_array(elu(constant(to_tensor(x))).value()); },
        py::arg("x"));
  m.def("softshrink",
        [](const Array& x, double lam) {
          return to_array(softshrink(constant(to_tensor(x)), lam).value());
        },
        py::arg("x"), py::arg("lambda_") = 0.01);

  // choice network pieces
  m.def("membership",
        [](const Array& x) { return to_array(membership(constant(to_tensor(x))).value()); },
        py::arg("x"));
  m.def("state_variables",
        [](const Array& v) { return to_array(state_variables(constant(to_tensor(v))).value()); },
        py::arg("v"));
  m.def("squash", [](const Array& s) { return to_array(squash(constant(to_tensor(s))).value()); },
        py::arg("s"));
  m.def("decoder_weights",
        [](const Array& gamma) {
          Tensor g = to_tensor(gamma);
          auto c = decoder_weights(constant(g), std::size_t(1) << g.numel());
          std::vector<double> out;
          out.reserve(c.size());
          for (const auto& ci : c) out.push_back(ci.value()[0]);
          return out;
        },
        py::arg("gamma"), "fuzzy firing-strength products, one weight per decoder");
  m.def("dynamic_routing",
        [](const Array& u_hat, std::size_t iters) {
          return to_array(dynamic_routing(constant(to_tensor(u_hat)), iters).value());
        },
        py::arg("u_hat"), py::arg("iters") = 3);

  // decoder pieces
  m.def("glt_forward",
        [](const Array& z, const std::vector<Array>& weights) {
          GLTLayer layer;
          for (const auto& w : weights) layer.weights.push_back(constant(to_tensor(w)));
          return to_array(glt_forward(constant(to_tensor(z)), layer).value());
        },
        py::arg("z"), py::arg("weights"), "stacked group linear transformation");
  m.def("decode",
        [](const std::vector<Array>& heads, const std::vector<double>& c) {
          std::vector<Var> hs, cs;
          for (const auto& h : heads) hs.push_back(constant(to_tensor(h)));
          for (double w : c) cs.push_back(constant(w));
          return to_array(decode(hs, cs).value());
        },
        py::arg("heads"), py::arg("c"));
  m.def("param_normalize",
        [](const Array& block, double gamma, double beta, double eps) {
          ParamNorm pn{leaf(Tensor::scalar(gamma)), leaf(Tensor::scalar(beta)), eps};
          return to_array(param_normalize(constant(to_tensor(block)), pn).value());
        },
        py::arg("block"), py::arg("gamma") = 1.0, py::arg("beta") = 0.0, py::arg("eps") = 1e-5);
  m.def("resize_params",
        [](const Array& block, std::size_t size) {
          return to_array(
              resize_params(constant(to_tensor(block)), ParamBlockSpec{{size}}).value());
        },
        py::arg("block"), py::arg("size"));

  // losses
  m.def("mse_loss",
        [](const Array& pred, const Array& target, bool sum_reduction) {
          return mse_loss(constant(to_tensor(pred)), constant(to_tensor(target)),
                          sum_reduction ? Reduction::kSum : Reduction::kMean)
              .value()[0];
        },
        py::arg("pred"), py::arg("target"), py::arg("sum_reduction") = false);
  m.def("cross_entropy_loss",
        [](const Array& logits, const Array& onehot, bool sum_reduction) {
          return cross_entropy_loss(constant(to_tensor(logits)), constant(to_tensor(onehot)),
                                    sum_reduction ? Reduction::kSum : Reduction::kMean)
              .value()[0];
        },
        py::arg("logits"), py::arg("onehot"), py::arg("sum_reduction") = false);

  // schedules and accounting
  m.def("lr_at",
        [](std::size_t t, double base, std::size_t decay_interval, double decay_factor,
           std::size_t cyclic_period, std::size_t cyclic_start) {
          LrSchedule s{base, decay_factor, decay_interval, cyclic_period, cyclic_start};
          return lr_at(t, s);
        },
        py::arg("t"), py::arg("base") = 1e-3, py::arg("decay_interval") = 0,
        py::arg("decay_factor") = 0.5, py::arg("cyclic_period") = 2000,
        py::arg("cyclic_start") = 0);
  m.def("param_counts",
        [](const std::string& config_json) {
          RunConfig cfg = parse_config(config_json);
          CountsInput in;
          in.layer_sizes = cfg.layer_sizes;
          in.dcn_layers = cfg.maml ? std::vector<std::size_t>{} : cfg.dcn_layers;
          in.latent = LatentSpec{cfg.latent_d, cfg.latent_groups};
          in.trunk_heads = cfg.trunk_heads;
          in.trunk_m = cfg.trunk_m;
          in.head_heads = cfg.head_heads;
          in.head_m = cfg.head_m;
          in.decoders = cfg.decoders;
          in.state_vars = cfg.state_vars;
          in.choice_channels = cfg.maml ? 0 : cfg.layer_sizes[cfg.dcn_layers[0]];
          ComplexityReport r = param_counts(in);
          py::dict d;
          d["predict_model"] = r.predict_model_params;
          d["maml_total"] = r.maml_total_params;
          d["dcn_total"] = r.dcn_total_params;
          d["decoder_glt"] = r.glt_actual_params;
          d["latent"] = r.latent_params;
          d["choice"] = r.choice_params;
          d["norms"] = r.norm_params;
          d["direct"] = r.direct_params;
          d["fc_decoder_baseline"] = r.fc_decoder_params;
          d["glt_closed_form"] = r.glt_formula_params;
          return d;
        },
        py::arg("config_json"));

  // episodic data
  m.def("sinusoid_episode",
        [](std::uint64_t seed, std::size_t shot, std::size_t query) {
          Rng rng(seed);
          return episode_dict(sample_sinusoid_episode(rng, shot, query));
        },
        py::arg("seed"), py::arg("shot") = 5, py::arg("query") = 5);
  m.def("glyph_episode",
        [](std::uint64_t seed, std::size_t way, std::size_t shot, std::size_t query,
           std::size_t class_count, std::size_t image_size) {
          Rng rng(seed);
          GlyphSpec spec;
          spec.class_count = class_count;
          spec.image_size = image_size;
          return episode_dict(sample_glyph_episode(rng, spec, way, shot, query));
        },
        py::arg("seed"), py::arg("way") = 5, py::arg("shot") = 1, py::arg("query") = 1,
        py::arg("class_count") = 64, py::arg("image_size") = 14);

  // end-to-end drivers
  m.def("train",
        [](const std::string& config_json, const std::string& out_dir,
           std::optional<std::size_t> iterations, std::optional<std::uint64_t> seed,
           std::size_t threads) {
          RunConfig cfg = parse_config(config_json);
          TrainOptions opt;
          opt.out_dir = out_dir;
          opt.iterations = iterations;
          opt.seed = seed;
          opt.threads = threads;
          TrainOutcome out = run_train(cfg, opt);
          py::dict d;
          d["checkpoint"] = out.final_checkpoint;
          d["metrics"] = out.metrics_path;
          d["iterations"] = out.iterations;
          d["last_test_loss"] = out.last.mean_test_loss;
          return d;
        },
        py::arg("config_json"), py::arg("out_dir"), py::arg("iterations") = std::nullopt,
        py::arg("seed") = std::nullopt, py::arg("threads") = 1);
  m.def("evaluate",
        [](const std::string& config_json, const std::string& checkpoint, std::size_t episodes,
           std::size_t inner_steps, std::optional<std::uint64_t> seed, std::size_t threads) {
          RunConfig cfg = parse_config(config_json);
          EvalOptions opt;
          opt.episodes = episodes;
          opt.inner_steps = inner_steps;
          opt.seed = seed;
          opt.threads = threads;
          return report_dict(run_eval(cfg, checkpoint, opt));
        },
        py::arg("config_json"), py::arg("checkpoint"), py::arg("episodes") = 1000,
        py::arg("inner_steps") = 10, py::arg("seed") = std::nullopt, py::arg("threads") = 1);
  m.def("ensemble",
        [](const std::string& config_json, const std::string& dir, std::size_t episodes,
           std::size_t inner_steps, std::size_t threads) {
          RunConfig cfg = parse_config(config_json);
          EnsembleOptions opt;
          opt.eval_episodes = episodes;
          opt.inner_steps = inner_steps;
          opt.threads = threads;
          EnsembleReport rep = run_ensemble(cfg, dir, opt);
          py::dict d;
          d["selected"] = rep.selection.selected.size();
          d["candidates"] = rep.selection.candidates.size();
          d["best_single_val"] = rep.best_single_val_score;
          d["ensemble_val"] = rep.ensemble_val_score;
          d["trace"] = rep.trace_text;
          d["eval"] = report_dict(rep.ensemble_eval);
          return d;
        },
        py::arg("config_json"), py::arg("dir"), py::arg("episodes") = 1000,
        py::arg("inner_steps") = 10, py::arg("threads") = 1);

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<ArchMismatchError>(m, "ArchMismatchError");
  py::register_exception<TrainingError>(m, "TrainingError");
}
