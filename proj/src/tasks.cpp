#include "dcn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <vector>

namespace dcn {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Episode sample_sinusoid_episode(Rng& rng, std::size_t shot, std::size_t query) {
  if (shot < 1 || query < 1) throw TensorError("sinusoid episode: shot and query must be >= 1");
  SinusoidSpec spec{rng.uniform(0.1, 5.0), rng.uniform(0.0, kPi)};
  Episode ep;
  ep.way = 1;
  ep.shot = shot;
  ep.query = query;
  ep.train_x = Tensor({shot, 1});
  ep.train_y = Tensor({shot, 1});
  ep.test_x = Tensor({query, 1});
  ep.test_y = Tensor({query, 1});
  for (std::size_t i = 0; i < shot; ++i) {
    double x = rng.uniform(-5.0, 5.0);
    ep.train_x[i] = x;
    ep.train_y[i] = spec.amplitude * std::sin(x + spec.phase);
  }
  for (std::size_t i = 0; i < query; ++i) {
    double x = rng.uniform(-5.0, 5.0);
    ep.test_x[i] = x;
    ep.test_y[i] = spec.amplitude * std::sin(x + spec.phase);
  }
  return ep;
}

namespace {

struct Stroke {
  std::vector<std::pair<double, double>> points;  // polyline in [0,1]^2
};

// Base glyph for a stroke seed: a 3-5 segment polyline. All vertices except
// the first snap to a shared 4x4 lattice so different classes reuse strokes
// (confusable, like characters sharing radicals); the free first vertex keeps
// distinct seeds distinct.
Stroke glyph_stroke(std::uint64_t stroke_seed) {
  Rng rng(0x517cc1b727220a95ULL ^ (stroke_seed * 0x2545f4914f6cdd1dULL + 0x9e3779b9ULL));
  std::size_t segments = 3 + rng.below(3);
  auto lattice = [&rng] {
    return std::pair<double, double>{0.125 + 0.25 * double(rng.below(4)),
                                     0.125 + 0.25 * double(rng.below(4))};
  };
  Stroke s;
  s.points.reserve(segments + 1);
  s.points.emplace_back(rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85));
  for (std::size_t i = 1; i <= segments; ++i) {
    auto p = lattice();
    while (p == s.points.back()) p = lattice();
    s.points.push_back(p);
  }
  return s;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  double vx = bx - ax, vy = by - ay;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Tensor render_glyph(const GlyphSpec& spec, std::size_t class_id, Rng& jitter_rng) {
  std::size_t n = spec.image_size;
  std::uint64_t stroke_seed = class_id / 4;
  int rotation = static_cast<int>(class_id % 4);  // quarter turns
  Stroke stroke = glyph_stroke(stroke_seed);

  double ox = jitter_rng.uniform(-spec.jitter_translate, spec.jitter_translate) / double(n);
  double oy = jitter_rng.uniform(-spec.jitter_translate, spec.jitter_translate) / double(n);

  auto rotate = [rotation](double x, double y) {
    double cx = x - 0.5, cy = y - 0.5;
    for (int r = 0; r < rotation; ++r) {
      double t = cx;
      cx = -cy;
      cy = t;
    }
    return std::pair<double, double>{cx + 0.5, cy + 0.5};
  };

  std::vector<std::pair<double, double>> pts;
  pts.reserve(stroke.points.size());
  for (auto [x, y] : stroke.points) {
    auto [rx, ry] = rotate(x, y);
    pts.emplace_back(rx + ox, ry + oy);
  }

  const double width = 1.2 / double(n);  // anti-aliased stroke width
  Tensor img({n * n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double py = (double(r) + 0.5) / double(n);
      double px = (double(c) + 0.5) / double(n);
      double best = 1e9;
      for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
        best = std::min(best, segment_distance(px, py, pts[s].first, pts[s].second,
                                               pts[s + 1].first, pts[s + 1].second));
      }
      double v = std::max(0.0, 1.0 - best / width);
      v += spec.jitter_sigma * jitter_rng.normal();
      img[r * n + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

Episode sample_glyph_episode(Rng& rng, const GlyphSpec& spec, std::size_t way, std::size_t shot,
                             std::size_t query) {
  if (way < 2) throw TensorError("glyph episode: way must be >= 2");
  if (way > spec.class_count) throw TensorError("glyph episode: way exceeds class pool");
  // sample classes without replacement
  std::vector<std::size_t> chosen;
  chosen.reserve(way);
  while (chosen.size() < way) {
    std::size_t c = rng.below(spec.class_count);
    if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
  }

  std::size_t dim = spec.image_size * spec.image_size;
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query = query;
  ep.train_x = Tensor({way * shot, dim});
  ep.train_y = Tensor({way * shot, way});
  ep.test_x = Tensor({way * query, dim});
  ep.test_y = Tensor({way * query, way});

  for (std::size_t k = 0; k < way; ++k) {
    for (std::size_t i = 0; i < shot; ++i) {
      Tensor img = render_glyph(spec, chosen[k], rng);
      std::size_t row = k * shot + i;
      std::copy(img.data().begin(), img.data().end(), ep.train_x.data().begin() + row * dim);
      ep.train_y[row * way + k] = 1.0;
    }
    for (std::size_t i = 0; i < query; ++i) {
      Tensor img = render_glyph(spec, chosen[k], rng);
      std::size_t row = k * query + i;
      std::copy(img.data().begin(), img.data().end(), ep.test_x.data().begin() + row * dim);
      ep.test_y[row * way + k] = 1.0;
    }
  }
  return ep;
}

Var mse_loss(const Var& pred, const Var& target, Reduction r) {
  if (pred.shape() != target.shape())
    throw TensorError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                      shape_str(target.shape()));
  Var d = sub(pred, target);
  Var se = sum_all(mul(d, d));
  return r == Reduction::kMean ? scale(se, 1.0 / double(pred.numel())) : se;
}

Var cross_entropy_loss(const Var& logits, const Var& onehot, Reduction r) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || logits.shape() != onehot.shape())
    throw TensorError("cross_entropy_loss: need matching [n, way] shapes");
  std::size_t n = lv.rows();
  // per-example: lse(logits) - sum_k y_k logit_k
  Var lse = logsumexp_rows(logits);                             // [n,1]
  Var picked = sum_to_shape(mul(onehot, logits), {n, 1});       // [n,1]
  Var per_example = sub(lse, picked);
  Var total = sum_all(per_example);
  return r == Reduction::kMean ? scale(total, 1.0 / double(n)) : total;
}

double accuracy(const Tensor& pred, const Tensor& onehot) {
  std::size_t n = pred.rows(), m = pred.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pa = 0, ta = 0;
    for (std::size_t j = 1; j < m; ++j) {
      if (pred[i * m + j] > pred[i * m + pa]) pa = j;
      if (onehot[i * m + j] > onehot[i * m + ta]) ta = j;
    }
    if (pa == ta) ++hits;
  }
  return n ? double(hits) / double(n) : 0.0;
}

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.data()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                j.at("data").get<std::vector<double>>());
}

}  // namespace

std::string episode_to_json(const Episode& ep) {
  nlohmann::json j{{"way", ep.way},           {"shot", ep.shot},
                   {"query", ep.query},       {"task_id", ep.task_id},
                   {"train_x", tensor_to_json(ep.train_x)}, {"train_y", tensor_to_json(ep.train_y)},
                   {"test_x", tensor_to_json(ep.test_x)},   {"test_y", tensor_to_json(ep.test_y)}};
  return j.dump();
}

Episode episode_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Episode ep;
  ep.way = j.at("way").get<std::size_t>();
  ep.shot = j.at("shot").get<std::size_t>();
  ep.query = j.at("query").get<std::size_t>();
  ep.task_id = j.at("task_id").get<std::int64_t>();
  ep.train_x = tensor_from_json(j.at("train_x"));
  ep.train_y = tensor_from_json(j.at("train_y"));
  ep.test_x = tensor_from_json(j.at("test_x"));
  ep.test_y = tensor_from_json(j.at("test_y"));
  return ep;
}

}  // namespace dcn
