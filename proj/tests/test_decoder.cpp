#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dcn/decoder.hpp"
#include "fd_check.hpp"

using namespace dcn;

TEST_CASE("glt identity with a single unit head") {
  GLTLayer layer;
  layer.weights.push_back(leaf(Tensor({2, 2}, {1, 0, 0, 1})));
  Var z = leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Var h = glt_forward(z, layer);
  CHECK(h.value() == z.value());
}

TEST_CASE("glt group independence: zeroing column j only zeros output column j") {
  Rng rng(21);
  GLTLayer layer = make_glt(rng, 3, 4, 5);
  Tensor zv({5, 4});
  for (auto& v : zv.data()) v = rng.uniform(-1, 1);

  Var full = glt_forward(leaf(zv), layer);
  Tensor zeroed = zv;
  const std::size_t col = 2;
  for (std::size_t r = 0; r < 5; ++r) zeroed[r * 4 + col] = 0.0;
  Var part = glt_forward(leaf(zeroed), layer);

  for (std::size_t r = 0; r < full.value().rows(); ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      if (c == col)
        CHECK(part.value().at2(r, c) == 0.0);
      else
        CHECK(part.value().at2(r, c) == full.value().at2(r, c));  // exact
    }
  }
}

TEST_CASE("two-head glt matches the hand-computed matrix product") {
  GLTLayer layer;
  layer.weights.push_back(leaf(Tensor({1, 2}, {1, 1})));
  layer.weights.push_back(leaf(Tensor({1, 2}, {1, -1})));
  Var z = leaf(Tensor({2, 2}, {1, 3, 2, 4}));  // columns (1,2) and (3,4)
  Var h = glt_forward(z, layer);
  CHECK(h.value().shape() == std::vector<std::size_t>{2, 2});
  CHECK(h.value().data() == std::vector<double>{3, 7, -1, -1});
}

TEST_CASE("glt with N_g=N_h=1 equals a dense multiply") {
  Rng rng(33);
  GLTLayer layer = make_glt(rng, 1, 6, 4);
  Tensor zv({4, 1});
  for (auto& v : zv.data()) v = rng.uniform(-1, 1);
  Var h = glt_forward(leaf(zv), layer);
  // dense reference
  const Tensor& w = layer.weights[0].value();
  for (std::size_t i = 0; i < 6; ++i) {
    double want = 0.0;
    for (std::size_t k = 0; k < 4; ++k) want += w[i * 4 + k] * zv[k];
    CHECK(std::abs(h.value()[i] - want) < 1e-12);
  }
}

TEST_CASE("decoder_forward shape and zero contracts") {
  Rng rng(5);
  LatentSpec latent{2, 3};
  DecoderBank bank = make_decoder_bank(rng, latent, 2, 2, 2, 4, 3, 0.01);
  Var z = leaf(Tensor({2, 3}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.2}));
  auto outs = decoder_forward(z, bank);
  CHECK(outs.size() == 3);
  std::size_t len = outs[0].numel();
  CHECK(len == bank.out_dim(latent));
  for (const auto& o : outs) CHECK(o.numel() == len);

  // all-zero weights -> all-zero outputs
  for (auto& w : bank.trunk.weights) w.set_value(Tensor(w.shape()));
  for (auto& head : bank.heads)
    for (auto& w : head.weights) w.set_value(Tensor(w.shape()));
  auto zeros = decoder_forward(z, bank);
  for (const auto& o : zeros)
    for (double v : o.value().data()) CHECK(v == 0.0);
}

TEST_CASE("decoder_forward tiny case matches a step-by-step oracle") {
  // d=2, N_g=1, trunk m=2/N_h=1, heads m=2/N_h=1, S=2
  LatentSpec latent{2, 1};
  DecoderBank bank;
  bank.kind = DecoderKind::kGlt;
  bank.shrink_lambda = 0.01;
  bank.trunk.weights.push_back(leaf(Tensor({2, 2}, {0.5, -1.0, 1.0, 0.25})));
  GLTLayer h1, h2;
  h1.weights.push_back(leaf(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0})));
  h2.weights.push_back(leaf(Tensor({2, 2}, {0.0, 2.0, -1.0, 0.0})));
  bank.heads = {h1, h2};

  Var z = leaf(Tensor({2, 1}, {0.4, -0.6}));
  auto outs = decoder_forward(z, bank);

  // hand evaluation: t = W z = (0.5*0.4 - 1*(-0.6), 1*0.4 + 0.25*(-0.6)) = (0.8, 0.25)
  // elu keeps positives: (0.8, 0.25)
  // head1: identity -> (0.8, 0.25); softshrink(0.01) -> (0.79, 0.24)
  // head2: (2*0.25, -0.8) = (0.5, -0.8) -> (0.49, -0.79)
  CHECK(outs[0].value()[0] == doctest::Approx(0.79).epsilon(1e-12));
  CHECK(outs[0].value()[1] == doctest::Approx(0.24).epsilon(1e-12));
  CHECK(outs[1].value()[0] == doctest::Approx(0.49).epsilon(1e-12));
  CHECK(outs[1].value()[1] == doctest::Approx(-0.79).epsilon(1e-12));
}

TEST_CASE("decode selects, averages, and validates") {
  Var h0 = constant(Tensor({2}, {1.0, 0.0}));
  Var h1 = constant(Tensor({2}, {0.0, 1.0}));

  auto c_onehot = std::vector<Var>{constant(1.0), constant(0.0)};
  CHECK(decode({h0, h1}, c_onehot).value() == h0.value());

  auto c_mix = std::vector<Var>{constant(0.25), constant(0.75)};
  Var mixed = decode({h0, h1}, c_mix);
  CHECK(mixed.value()[0] == doctest::Approx(0.25));
  CHECK(mixed.value()[1] == doctest::Approx(0.75));

  // identical heads: any valid weights return that head
  Var same = decode({h0, h0}, c_mix);
  CHECK(same.value()[0] == doctest::Approx(1.0));
  CHECK(same.value()[1] == doctest::Approx(0.0));

  CHECK_THROWS_AS(decode({h0, h1}, {constant(0.9), constant(0.3)}), TensorError);
  CHECK_THROWS_AS(decode({h0, h1}, {constant(1.0)}), TensorError);
}

TEST_CASE("param_normalize closed forms") {
  ParamNorm pn = make_param_norm();

  Var constant_block = leaf(Tensor::full({6}, 3.7));
  Var out = param_normalize(constant_block, pn);
  for (double v : out.value().data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  Var pm = leaf(Tensor({2}, {-1.0, 1.0}));
  Var out2 = param_normalize(pm, pn);
  CHECK(out2.value()[0] == doctest::Approx(-0.99999500).epsilon(1e-8));
  CHECK(out2.value()[1] == doctest::Approx(0.99999500).epsilon(1e-8));

  pn.gamma_scale.set_value(Tensor::scalar(2.0));
  pn.beta_shift.set_value(Tensor::scalar(3.0));
  Var out3 = param_normalize(pm, pn);
  CHECK(out3.value()[0] == doctest::Approx(1.00001).epsilon(1e-7));
  CHECK(out3.value()[1] == doctest::Approx(4.99999).epsilon(1e-7));
}

TEST_CASE("param_normalize standardizes to zero mean unit variance") {
  Rng rng(9);
  Tensor block({200});
  for (auto& v : block.data()) v = rng.uniform(-3, 5);
  ParamNorm pn = make_param_norm();
  Tensor out = param_normalize(leaf(block), pn).value();
  double mean = 0.0;
  for (double v : out.data()) mean += v;
  mean /= out.numel();
  double var = 0.0;
  for (double v : out.data()) var += (v - mean) * (v - mean);
  var /= out.numel();
  CHECK(std::abs(mean) < 1e-9);
  CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("resize_params identity, growth, and monotonicity") {
  ParamBlockSpec same{{2, 2}};
  Var src = leaf(Tensor({4}, {1, 2, 3, 4}));
  CHECK(resize_params(src, same).value().data() == std::vector<double>{1, 2, 3, 4});

  ParamBlockSpec grow{{5}};
  Var small = leaf(Tensor({3}, {0, 3, 6}));
  CHECK(resize_params(small, grow).value().data() == std::vector<double>{0, 1.5, 3, 4.5, 6});

  Rng rng(44);
  Tensor mono({7});
  double acc = 0.0;
  for (auto& v : mono.data()) v = (acc += rng.uniform(0.0, 1.0));
  Tensor out = resize_params(leaf(mono), ParamBlockSpec{{13}}).value();
  CHECK(out[0] == mono[0]);   // endpoints exact
  CHECK(out[12] == mono[6]);
  for (std::size_t i = 1; i < 13; ++i) CHECK(out[i] >= out[i - 1]);

  CHECK_THROWS_AS(resize_params(leaf(Tensor({1}, {2.0})), ParamBlockSpec{{4}}), TensorError);
}

TEST_CASE("param_counts enumerations and closed forms") {
  // plain 1-40-40-35-1 net with biases
  CountsInput maml;
  maml.layer_sizes = {1, 40, 40, 35, 1};
  CHECK(param_counts(maml).maml_total_params == 3191);

  // fc-decoder closed form: (8 + 100*4) * 20 = 8160
  CountsInput fc;
  fc.layer_sizes = {1, 2};
  fc.latent = LatentSpec{8, 1};
  fc.trunk_heads = 1;
  fc.trunk_m = 20;
  fc.head_heads = 1;
  fc.head_m = 100;
  fc.decoders = 4;
  CHECK(param_counts(fc).fc_decoder_params == 8160);

  // glt enumeration equals sum over layers of N_h * m * d
  CountsInput g;
  g.layer_sizes = {1, 8, 8, 1};
  g.dcn_layers = {1};
  g.latent = LatentSpec{2, 4};
  g.trunk_heads = 2;
  g.trunk_m = 3;
  g.head_heads = 2;
  g.head_m = 4;
  g.decoders = 4;
  g.state_vars = 2;
  g.choice_channels = 8;
  ComplexityReport r = param_counts(g);
  CHECK(r.glt_actual_params == 2 * 3 * 2 + 4 * (2 * 4 * (2 * 3)));
  CHECK(r.choice_params == 16);
  CHECK(r.norm_params == 2);
  CHECK(r.dcn_total_params ==
        r.direct_params + r.latent_params + r.glt_actual_params + r.choice_params + r.norm_params);
  // generated block (8x8) excluded from direct, biases kept
  CHECK(r.direct_params == r.maml_total_params - 64);
}

TEST_CASE("decoded parameters differentiate through to the latent code") {
  Rng rng(61);
  LatentSpec latent{2, 4};
  DecoderBank bank = make_decoder_bank(rng, latent, 2, 2, 2, 3, 2, 0.01);
  ParamNorm pn = make_param_norm();
  Var z = leaf(Tensor({2, 4}, {0.3, -0.2, 0.5, 0.9, -0.7, 0.2, 0.4, -0.1}));

  auto build = [&] {
    auto heads = decoder_forward(z, bank);
    Var mixed = decode(heads, {constant(0.3), constant(0.7)});
    Var normed = param_normalize(mixed, pn);
    Var theta = resize_params(normed, ParamBlockSpec{{5, 5}});
    return sum_all(mul(theta, theta));
  };
  auto obj = [&] { return build().value()[0]; };
  auto g = grad(build(), {z});
  CHECK(fd::max_rel_err(g[0].value(), fd::fd_grad(obj, z)) < 1e-5);
}
