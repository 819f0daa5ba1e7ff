#pragma once

#include <cstdint>
#include <string>

#include "dcn/autodiff.hpp"
#include "dcn/rng.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

/// One few-shot task: K training (shot) and H testing (query) examples.
/// Regression tasks have way == 1 and scalar targets; classification tasks
/// carry one-hot labels over `way` classes, K train + H test rows per class.
struct Episode {
  Tensor train_x;  // [K or K*way, features]
  Tensor train_y;
  Tensor test_x;   // [H or H*way, features]
  Tensor test_y;
  std::size_t way = 1;
  std::size_t shot = 0;
  std::size_t query = 0;
  std::int64_t task_id = 0;
};

struct SinusoidSpec {
  double amplitude = 1.0;  // in [0.1, 5.0]
  double phase = 0.0;      // in [0, pi]
};

struct GlyphSpec {
  std::size_t class_count = 64;
  std::size_t image_size = 14;
  double jitter_sigma = 0.05;      // pixel noise
  double jitter_translate = 0.5;   // sub-pixel shift amplitude
};

/// y = A sin(x + phi), A ~ U[0.1, 5], phi ~ U[0, pi], x ~ U[-5, 5]
Episode sample_sinusoid_episode(Rng& rng, std::size_t shot, std::size_t query);

/// N distinct procedural glyph classes, K train + H test renders per class
/// with independent jitter. Classes are (stroke seed, rotation) pairs.
Episode sample_glyph_episode(Rng& rng, const GlyphSpec& spec, std::size_t way, std::size_t shot,
                             std::size_t query);

/// deterministic render of one glyph class instance (test hook / inspection)
Tensor render_glyph(const GlyphSpec& spec, std::size_t class_id, Rng& jitter_rng);

enum class Reduction { kMean, kSum };

Var mse_loss(const Var& pred, const Var& target, Reduction r = Reduction::kMean);
/// -sum_k y_k log softmax(logits)_k per example, log-sum-exp stabilized
Var cross_entropy_loss(const Var& logits, const Var& onehot, Reduction r = Reduction::kMean);

/// fraction of rows where argmax(pred) == argmax(onehot)
double accuracy(const Tensor& pred, const Tensor& onehot);

std::string episode_to_json(const Episode& ep);
Episode episode_from_json(const std::string& text);

}  // namespace dcn
