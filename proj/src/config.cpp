#include "dcn/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace dcn {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& prefix,
                  const std::set<std::string>& known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + prefix + it.key() + "'");
  }
}

template <class T>
void read(const json& obj, const std::string& prefix, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + prefix + key + "': " + e.what());
  }
}

}  // namespace

ModelSpec RunConfig::model_spec() const {
  ModelSpec spec;
  spec.layer_sizes = layer_sizes;
  spec.dcn_layers = maml ? std::vector<std::size_t>{} : dcn_layers;
  spec.embed_layers = embed_layers;
  spec.latent = LatentSpec{latent_d, latent_groups};
  spec.trunk_heads = trunk_heads;
  spec.trunk_m = trunk_m;
  spec.head_heads = head_heads;
  spec.head_m = head_m;
  spec.decoders = decoders;
  spec.state_vars = state_vars;
  spec.routing_iters = routing_iters;
  spec.shrink_lambda = shrink_lambda;
  spec.latent_init_sigma = latent_init_sigma;
  spec.normalize_blocks = normalize_blocks;
  spec.decoder_kind = decoder_kind == "identity" ? DecoderKind::kIdentity : DecoderKind::kGlt;
  spec.loss = experiment == ExperimentKind::kSinusoid ? LossKind::kMse : LossKind::kCrossEntropy;
  spec.loss_reduction = loss_reduction == "sum" ? Reduction::kSum : Reduction::kMean;
  spec.is_dcn = !maml;
  return spec;
}

LrSchedule RunConfig::schedule() const {
  LrSchedule s;
  s.base = beta;
  s.decay_factor = decay_factor;
  s.decay_interval = schedule_kind == "constant" ? 0 : decay_interval;
  s.cyclic_period = cyclic_period;
  s.cyclic_start = schedule_kind == "step_cyclic" ? cyclic_start : 0;
  return s;
}

GlyphSpec RunConfig::glyph_spec() const {
  GlyphSpec g;
  g.class_count = glyph_class_count;
  g.image_size = glyph_image_size;
  g.jitter_sigma = glyph_jitter_sigma;
  g.jitter_translate = glyph_jitter_translate;
  return g;
}

InnerConfig RunConfig::inner_config() const {
  InnerConfig c;
  c.steps = inner_steps;
  c.alpha = inner_alpha;
  c.learnable_rates = learnable_rates;
  c.clip_norm = clip_norm;
  c.first_order = first_order;
  return c;
}

std::string RunConfig::to_json() const {
  json j;
  j["experiment"] = experiment == ExperimentKind::kSinusoid ? "sinusoid" : "glyph";
  j["seed"] = seed;
  json& m = j["model"];
  m["layers"] = layer_sizes;
  m["dcn_layers"] = dcn_layers;
  m["embed_layers"] = embed_layers;
  m["maml"] = maml;
  m["latent"] = {{"d", latent_d}, {"groups", latent_groups}};
  m["trunk"] = {{"heads", trunk_heads}, {"m", trunk_m}};
  m["head"] = {{"heads", head_heads}, {"m", head_m}};
  m["decoders"] = decoders;
  m["state_vars"] = state_vars;
  m["routing_iters"] = routing_iters;
  m["softshrink_lambda"] = shrink_lambda;
  m["latent_init_sigma"] = latent_init_sigma;
  m["normalize_blocks"] = normalize_blocks;
  m["decoder_kind"] = decoder_kind;
  json& d = j["data"];
  d["way"] = way;
  d["shot"] = shot;
  d["query"] = query;
  d["class_count"] = glyph_class_count;
  d["image_size"] = glyph_image_size;
  d["jitter_sigma"] = glyph_jitter_sigma;
  d["jitter_translate"] = glyph_jitter_translate;
  json& i = j["inner"];
  i["steps"] = inner_steps;
  i["alpha"] = inner_alpha;
  i["clip_norm"] = clip_norm;
  i["first_order"] = first_order;
  i["learnable_rates"] = learnable_rates;
  i["loss_reduction"] = loss_reduction;
  json& o = j["outer"];
  o["beta"] = beta;
  o["batch"] = batch;
  o["iterations"] = iterations;
  json& s = j["schedule"];
  s["kind"] = schedule_kind;
  s["decay_interval"] = decay_interval;
  s["decay_factor"] = decay_factor;
  s["cyclic_period"] = cyclic_period;
  s["cyclic_start"] = cyclic_start;
  json& e = j["ensemble"];
  e["checkpoint_interval"] = checkpoint_interval;
  e["pool_cap"] = pool_cap;
  e["val_episodes"] = val_episodes;
  json& ev = j["eval"];
  ev["episodes"] = eval_episodes;
  ev["inner_steps"] = eval_inner_steps;
  return j.dump();
}

std::string RunConfig::fingerprint() const {
  json j;
  j["experiment"] = experiment == ExperimentKind::kSinusoid ? "sinusoid" : "glyph";
  j["layers"] = layer_sizes;
  j["dcn_layers"] = maml ? std::vector<std::size_t>{} : dcn_layers;
  j["embed_layers"] = embed_layers;
  j["maml"] = maml;
  j["latent"] = {{"d", latent_d}, {"groups", latent_groups}};
  j["trunk"] = {{"heads", trunk_heads}, {"m", trunk_m}};
  j["head"] = {{"heads", head_heads}, {"m", head_m}};
  j["decoders"] = decoders;
  j["state_vars"] = state_vars;
  j["decoder_kind"] = decoder_kind;
  return j.dump();
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");

  RunConfig c;
  require_keys(j, "", {"experiment", "seed", "model", "data", "inner", "outer", "schedule",
                       "ensemble", "eval"});

  std::string kind = "sinusoid";
  read(j, "", "experiment", kind);
  if (kind == "sinusoid")
    c.experiment = ExperimentKind::kSinusoid;
  else if (kind == "glyph")
    c.experiment = ExperimentKind::kGlyph;
  else
    throw ConfigError("config: experiment must be 'sinusoid' or 'glyph', got '" + kind + "'");
  read(j, "", "seed", c.seed);

  if (j.contains("model")) {
    const json& m = j.at("model");
    require_keys(m, "model.", {"layers", "dcn_layers", "embed_layers", "maml", "latent", "trunk",
                               "head", "decoders", "state_vars", "routing_iters",
                               "softshrink_lambda", "latent_init_sigma", "normalize_blocks",
                               "decoder_kind"});
    read(m, "model.", "layers", c.layer_sizes);
    read(m, "model.", "dcn_layers", c.dcn_layers);
    read(m, "model.", "embed_layers", c.embed_layers);
    read(m, "model.", "maml", c.maml);
    if (m.contains("latent")) {
      require_keys(m.at("latent"), "model.latent.", {"d", "groups"});
      read(m.at("latent"), "model.latent.", "d", c.latent_d);
      read(m.at("latent"), "model.latent.", "groups", c.latent_groups);
    }
    if (m.contains("trunk")) {
      require_keys(m.at("trunk"), "model.trunk.", {"heads", "m"});
      read(m.at("trunk"), "model.trunk.", "heads", c.trunk_heads);
      read(m.at("trunk"), "model.trunk.", "m", c.trunk_m);
    }
    if (m.contains("head")) {
      require_keys(m.at("head"), "model.head.", {"heads", "m"});
      read(m.at("head"), "model.head.", "heads", c.head_heads);
      read(m.at("head"), "model.head.", "m", c.head_m);
    }
    read(m, "model.", "decoders", c.decoders);
    read(m, "model.", "state_vars", c.state_vars);
    read(m, "model.", "routing_iters", c.routing_iters);
    read(m, "model.", "softshrink_lambda", c.shrink_lambda);
    read(m, "model.", "latent_init_sigma", c.latent_init_sigma);
    read(m, "model.", "normalize_blocks", c.normalize_blocks);
    read(m, "model.", "decoder_kind", c.decoder_kind);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    require_keys(d, "data.", {"way", "shot", "query", "class_count", "image_size", "jitter_sigma",
                              "jitter_translate"});
    read(d, "data.", "way", c.way);
    read(d, "data.", "shot", c.shot);
    read(d, "data.", "query", c.query);
    read(d, "data.", "class_count", c.glyph_class_count);
    read(d, "data.", "image_size", c.glyph_image_size);
    read(d, "data.", "jitter_sigma", c.glyph_jitter_sigma);
    read(d, "data.", "jitter_translate", c.glyph_jitter_translate);
  }

  if (j.contains("inner")) {
    const json& i = j.at("inner");
    require_keys(i, "inner.",
                 {"steps", "alpha", "clip_norm", "first_order", "learnable_rates",
                  "loss_reduction"});
    read(i, "inner.", "steps", c.inner_steps);
    read(i, "inner.", "alpha", c.inner_alpha);
    read(i, "inner.", "clip_norm", c.clip_norm);
    read(i, "inner.", "first_order", c.first_order);
    read(i, "inner.", "learnable_rates", c.learnable_rates);
    read(i, "inner.", "loss_reduction", c.loss_reduction);
  }

  if (j.contains("outer")) {
    const json& o = j.at("outer");
    require_keys(o, "outer.", {"beta", "batch", "iterations"});
    read(o, "outer.", "beta", c.beta);
    read(o, "outer.", "batch", c.batch);
    read(o, "outer.", "iterations", c.iterations);
  }

  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    require_keys(s, "schedule.",
                 {"kind", "decay_interval", "decay_factor", "cyclic_period", "cyclic_start"});
    read(s, "schedule.", "kind", c.schedule_kind);
    read(s, "schedule.", "decay_interval", c.decay_interval);
    read(s, "schedule.", "decay_factor", c.decay_factor);
    read(s, "schedule.", "cyclic_period", c.cyclic_period);
    read(s, "schedule.", "cyclic_start", c.cyclic_start);
  }

  if (j.contains("ensemble")) {
    const json& e = j.at("ensemble");
    require_keys(e, "ensemble.", {"checkpoint_interval", "pool_cap", "val_episodes"});
    read(e, "ensemble.", "checkpoint_interval", c.checkpoint_interval);
    read(e, "ensemble.", "pool_cap", c.pool_cap);
    read(e, "ensemble.", "val_episodes", c.val_episodes);
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    require_keys(e, "eval.", {"episodes", "inner_steps"});
    read(e, "eval.", "episodes", c.eval_episodes);
    read(e, "eval.", "inner_steps", c.eval_inner_steps);
  }

  // semantic validation, each error naming its field
  if (c.layer_sizes.size() < 2) throw ConfigError("config: model.layers needs >= 2 entries");
  for (std::size_t s : c.layer_sizes)
    if (s == 0) throw ConfigError("config: model.layers entries must be positive");
  if (!c.maml) {
    if (c.dcn_layers.empty()) throw ConfigError("config: model.dcn_layers must not be empty");
    for (std::size_t l : c.dcn_layers) {
      if (l + 1 >= c.layer_sizes.size())
        throw ConfigError("config: model.dcn_layers index out of range");
      if (l < c.embed_layers)
        throw ConfigError("config: model.dcn_layers overlaps model.embed_layers");
    }
    if (c.decoders != (std::size_t(1) << c.state_vars))
      throw ConfigError("config: model.decoders must equal 2^model.state_vars");
    if (c.latent_d == 0 || c.latent_groups == 0)
      throw ConfigError("config: model.latent dimensions must be positive");
    if (c.decoder_kind != "glt" && c.decoder_kind != "identity")
      throw ConfigError("config: model.decoder_kind must be 'glt' or 'identity'");
    if (c.decoder_kind == "glt") {
      if (c.trunk_heads == 0 || c.trunk_m == 0 || c.head_heads == 0 || c.head_m == 0)
        throw ConfigError("config: model.trunk/model.head dimensions must be positive");
      if (c.head_heads * c.head_m * c.latent_groups < 2)
        throw ConfigError("config: model.head output must have at least 2 values to resize");
    }
    if (c.shrink_lambda < 0.0)
      throw ConfigError("config: model.softshrink_lambda must be >= 0");
    if (c.latent_init_sigma <= 0.0)
      throw ConfigError("config: model.latent_init_sigma must be positive");
    // all DCN layers must share an input width (one choice net serves them)
    std::size_t ch = c.layer_sizes[c.dcn_layers[0]];
    for (std::size_t l : c.dcn_layers)
      if (c.layer_sizes[l] != ch)
        throw ConfigError("config: model.dcn_layers must share their input width");
  }
  if (c.embed_layers >= c.layer_sizes.size())
    throw ConfigError("config: model.embed_layers out of range");
  if (c.experiment == ExperimentKind::kGlyph) {
    if (c.way < 2) throw ConfigError("config: data.way must be >= 2 for glyph runs");
    if (c.way > c.glyph_class_count)
      throw ConfigError("config: data.way exceeds data.class_count");
    if (c.layer_sizes.back() != c.way)
      throw ConfigError("config: model.layers output width must equal data.way");
    std::size_t dim = c.glyph_image_size * c.glyph_image_size;
    if (c.layer_sizes.front() != dim)
      throw ConfigError("config: model.layers input width must equal image_size^2");
  }
  if (c.shot < 1 || c.query < 1) throw ConfigError("config: data.shot/query must be >= 1");
  if (c.batch < 1) throw ConfigError("config: outer.batch must be >= 1");
  if (c.beta <= 0.0) throw ConfigError("config: outer.beta must be positive");
  if (c.inner_alpha < 0.0) throw ConfigError("config: inner.alpha must be >= 0");
  if (c.clip_norm < 0.0) throw ConfigError("config: inner.clip_norm must be >= 0");
  if (c.loss_reduction != "mean" && c.loss_reduction != "sum")
    throw ConfigError("config: inner.loss_reduction must be 'mean' or 'sum'");
  if (c.schedule_kind != "constant" && c.schedule_kind != "step" &&
      c.schedule_kind != "step_cyclic")
    throw ConfigError("config: schedule.kind must be constant, step, or step_cyclic");
  if (c.schedule_kind != "constant" && c.decay_interval == 0)
    throw ConfigError("config: schedule.decay_interval must be positive");
  if (c.schedule_kind == "step_cyclic") {
    if (c.cyclic_period == 0) throw ConfigError("config: schedule.cyclic_period must be positive");
    if (c.cyclic_start == 0)
      throw ConfigError("config: schedule.cyclic_start must be >= 1 for step_cyclic");
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dcn
