#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dcn/tasks.hpp"
#include "fd_check.hpp"

using namespace dcn;

TEST_CASE("sinusoid episodes respect amplitude bounds and shapes") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    Episode ep = sample_sinusoid_episode(rng, 5, 5);
    CHECK(ep.train_x.shape() == std::vector<std::size_t>{5, 1});
    CHECK(ep.test_x.shape() == std::vector<std::size_t>{5, 1});
    double a_max = 0.0;
    for (double y : ep.train_y.data()) a_max = std::max(a_max, std::abs(y));
    for (double y : ep.test_y.data()) a_max = std::max(a_max, std::abs(y));
    CHECK(a_max <= 5.0);  // |y| <= A <= 5
    for (double x : ep.train_x.data()) {
      CHECK(x >= -5.0);
      CHECK(x <= 5.0);
    }
  }
}

TEST_CASE("same seed reproduces the sinusoid episode bitwise") {
  Rng a(123), b(123);
  Episode e1 = sample_sinusoid_episode(a, 10, 15);
  Episode e2 = sample_sinusoid_episode(b, 10, 15);
  CHECK(e1.train_x == e2.train_x);
  CHECK(e1.train_y == e2.train_y);
  CHECK(e1.test_x == e2.test_x);
  CHECK(e1.test_y == e2.test_y);
}

TEST_CASE("glyph episode shape contract") {
  Rng rng(11);
  GlyphSpec spec;
  Episode ep = sample_glyph_episode(rng, spec, 5, 1, 1);
  CHECK(ep.train_x.shape() == std::vector<std::size_t>{5, 196});
  CHECK(ep.test_x.shape() == std::vector<std::size_t>{5, 196});
  CHECK(ep.train_y.shape() == std::vector<std::size_t>{5, 5});
  // one-hot rows
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += ep.train_y[i * 5 + j];
    CHECK(s == 1.0);
  }
  for (double v : ep.train_x.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("glyph episode is reproducible and way is validated") {
  GlyphSpec spec;
  Rng a(99), b(99);
  Episode e1 = sample_glyph_episode(a, spec, 5, 2, 3);
  Episode e2 = sample_glyph_episode(b, spec, 5, 2, 3);
  CHECK(e1.train_x == e2.train_x);
  CHECK(e1.test_y == e2.test_y);
  Rng c(1);
  CHECK_THROWS_AS(sample_glyph_episode(c, spec, spec.class_count + 1, 1, 1), TensorError);
}

TEST_CASE("distinct stroke seeds produce distinct base glyphs") {
  GlyphSpec spec;
  spec.jitter_sigma = 0.0;
  spec.jitter_translate = 0.0;
  Rng r1(0), r2(0);
  Tensor g0 = render_glyph(spec, 0, r1);   // stroke seed 0
  Tensor g4 = render_glyph(spec, 4, r2);   // stroke seed 1
  CHECK(!(g0 == g4));
}

TEST_CASE("mse_loss values") {
  Var p = leaf(Tensor({2, 1}, {0.0, 0.0}));
  Var t = constant(Tensor({2, 1}, {1.0, 1.0}));
  CHECK(mse_loss(p, t).value()[0] == doctest::Approx(1.0));
  CHECK(mse_loss(p, t, Reduction::kSum).value()[0] == doctest::Approx(2.0));
  CHECK(mse_loss(t, t).value()[0] == 0.0);

  // 5-point case against a hand-summed oracle
  Rng rng(3);
  Tensor pv({5, 1}), tv({5, 1});
  for (auto& v : pv.data()) v = rng.uniform(-2, 2);
  for (auto& v : tv.data()) v = rng.uniform(-2, 2);
  double want = 0.0;
  for (std::size_t i = 0; i < 5; ++i) want += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  want /= 5.0;
  CHECK(mse_loss(leaf(pv), constant(tv)).value()[0] == doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_AS(mse_loss(p, constant(Tensor({3, 1}))), TensorError);
}

TEST_CASE("cross entropy values") {
  // uniform logits over 5 classes -> log 5
  Var logits = leaf(Tensor({2, 5}));
  Tensor y({2, 5});
  y[0] = 1.0;
  y[1 * 5 + 3] = 1.0;
  CHECK(cross_entropy_loss(logits, constant(y)).value()[0] ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // +20 logit on the true class saturates to ~0 loss
  Tensor big({1, 5});
  big[2] = 20.0;
  Tensor yb({1, 5});
  yb[2] = 1.0;
  CHECK(cross_entropy_loss(leaf(big), constant(yb)).value()[0] < 1e-7);

  // random 3x4 case against a direct softmax oracle
  Rng rng(31);
  Tensor lv({3, 4}), yv({3, 4});
  for (auto& v : lv.data()) v = rng.uniform(-2, 2);
  for (std::size_t i = 0; i < 3; ++i) yv[i * 4 + rng.below(4)] = 1.0;
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < 4; ++j) denom += std::exp(lv[i * 4 + j]);
    for (std::size_t j = 0; j < 4; ++j)
      want -= yv[i * 4 + j] * std::log(std::exp(lv[i * 4 + j]) / denom);
  }
  want /= 3.0;
  CHECK(cross_entropy_loss(leaf(lv), constant(yv)).value()[0] ==
        doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(41);
  Tensor lv({3, 4});
  for (auto& v : lv.data()) v = rng.uniform(-1, 1);
  Tensor yv({3, 4});
  for (std::size_t i = 0; i < 3; ++i) yv[i * 4 + rng.below(4)] = 1.0;
  Var logits = leaf(lv);
  Var onehot = constant(yv);
  auto obj = [&] { return cross_entropy_loss(logits, onehot).value()[0]; };
  auto g = grad(cross_entropy_loss(logits, onehot), {logits});
  CHECK(fd::max_rel_err(g[0].value(), fd::fd_grad(obj, logits)) < 1e-5);

  Var pred = leaf(Tensor({4, 1}, {0.3, -0.2, 0.9, 0.1}));
  Var tgt = constant(Tensor({4, 1}, {0.0, 0.5, 1.0, -1.0}));
  auto obj2 = [&] { return mse_loss(pred, tgt).value()[0]; };
  auto g2 = grad(mse_loss(pred, tgt), {pred});
  CHECK(fd::max_rel_err(g2[0].value(), fd::fd_grad(obj2, pred)) < 1e-6);
}

TEST_CASE("episode JSON round trip") {
  Rng rng(55);
  Episode ep = sample_sinusoid_episode(rng, 3, 4);
  ep.task_id = 77;
  Episode back = episode_from_json(episode_to_json(ep));
  CHECK(back.train_x == ep.train_x);
  CHECK(back.test_y == ep.test_y);
  CHECK(back.task_id == 77);
  CHECK(back.way == 1);
  CHECK(back.shot == 3);
  CHECK(back.query == 4);
}
