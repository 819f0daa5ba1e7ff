#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcn/ensemble.hpp"
#include "dcn/meta.hpp"

namespace dcn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { kSinusoid, kGlyph };

/// One experiment run, parsed from a JSON config file. Unknown keys are
/// rejected with the offending dotted path; semantic violations name the
/// field.
struct RunConfig {
  ExperimentKind experiment = ExperimentKind::kSinusoid;
  std::uint64_t seed = 1;

  // model
  std::vector<std::size_t> layer_sizes;
  std::vector<std::size_t> dcn_layers;
  std::size_t embed_layers = 0;
  bool maml = false;
  std::size_t latent_d = 2, latent_groups = 16;
  std::size_t trunk_heads = 2, trunk_m = 2;
  std::size_t head_heads = 2, head_m = 50;
  std::size_t decoders = 4;
  std::size_t state_vars = 2;
  std::size_t routing_iters = 3;
  double shrink_lambda = 0.01;
  double latent_init_sigma = 0.1;
  bool normalize_blocks = true;
  std::string decoder_kind = "glt";

  // data
  std::size_t way = 5, shot = 5, query = 5;
  std::size_t glyph_class_count = 64, glyph_image_size = 14;
  double glyph_jitter_sigma = 0.05, glyph_jitter_translate = 0.5;

  // inner
  std::size_t inner_steps = 2;
  double inner_alpha = 0.01;
  double clip_norm = 0.0;
  bool first_order = false;
  bool learnable_rates = false;
  std::string loss_reduction = "mean";  // mean | sum

  // outer
  double beta = 1e-3;
  std::size_t batch = 25;
  std::size_t iterations = 60000;

  // schedule
  std::string schedule_kind = "constant";  // constant | step | step_cyclic
  std::size_t decay_interval = 10000;
  double decay_factor = 0.5;
  std::size_t cyclic_period = 2000;
  std::size_t cyclic_start = 0;

  // ensemble
  std::size_t checkpoint_interval = 500;
  std::size_t pool_cap = 10;
  std::size_t val_episodes = 200;

  // eval defaults
  std::size_t eval_episodes = 1000;
  std::size_t eval_inner_steps = 10;

  ModelSpec model_spec() const;
  LrSchedule schedule() const;
  GlyphSpec glyph_spec() const;
  InnerConfig inner_config() const;

  /// canonical JSON echo (sorted keys); stored in checkpoints
  std::string to_json() const;
  /// the architecture-determining subset, for checkpoint compatibility checks
  std::string fingerprint() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

}  // namespace dcn
