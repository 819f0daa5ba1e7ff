#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dcn/autodiff.hpp"
#include "dcn/rng.hpp"
#include "fd_check.hpp"

using namespace dcn;

static Tensor rand_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

TEST_CASE("square derivative at 3") {
  Var x = leaf(Tensor::scalar(3.0));
  Var f = mul(x, x);
  auto g = grad(f, {x});
  CHECK(g[0].value()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("cube second derivative at 2") {
  Var x = leaf(Tensor::scalar(2.0));
  Var f = mul(mul(x, x), x);
  auto g1 = grad(f, {x}, /*create_graph=*/true);
  CHECK(g1[0].value()[0] == doctest::Approx(12.0).epsilon(1e-12));
  auto g2 = grad(g1[0], {x});
  CHECK(g2[0].value()[0] == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("sum(softshrink(W*z)) matches finite differences") {
  Rng rng(91);
  Var w = leaf(rand_tensor(rng, {3, 4}));
  Var z = leaf(rand_tensor(rng, {4, 2}));
  // keep products away from the +-lambda kinks so the FD oracle is valid
  auto far_from_kink = [&] {
    Tensor prod = matmul(constant(w.value()), constant(z.value())).value();
    for (double v : prod.data())
      if (std::abs(std::abs(v) - 0.01) < 1e-3) return false;
    return true;
  };
  while (!far_from_kink()) {
    w.set_value(rand_tensor(rng, {3, 4}));
    z.set_value(rand_tensor(rng, {4, 2}));
  }
  auto objective = [&] { return sum_all(softshrink(matmul(w, z), 0.01)).value()[0]; };
  auto g = grad(sum_all(softshrink(matmul(w, z), 0.01)), {w, z});
  CHECK(fd::max_rel_err(g[0].value(), fd::fd_grad(objective, w)) < 1e-6);
  CHECK(fd::max_rel_err(g[1].value(), fd::fd_grad(objective, z)) < 1e-6);
}

TEST_CASE("composed expression gradients match finite differences") {
  Rng rng(17);
  Var a = leaf(rand_tensor(rng, {3, 4}));
  Var b = leaf(rand_tensor(rng, {4, 5}));
  Var c = leaf(rand_tensor(rng, {3, 5}));
  Var v = leaf(rand_tensor(rng, {6}, 0.5, 1.5));

  auto build = [&] {
    Var m = matmul(a, b);                       // [3,5]
    Var t = add(mul(m, c), vexp(scale(c, 0.3)));
    Var s = softmax_rows(t);
    Var cat = concat_rows({s, c});              // [6,5]
    Var sl = slice_rows(cat, 1, 3);
    Var iv = interp_linear(vsqrt(v), 11);
    Var lse = logsumexp_rows(sl);
    return add(add(mean_all(lse), sum_all(vsin(iv))),
               sum_all(vlog(add_const(mul(v, v), 1.0))));
  };

  auto objective = [&] { return build().value()[0]; };
  auto g = grad(build(), {a, b, c, v});
  CHECK(fd::max_rel_err(g[0].value(), fd::fd_grad(objective, a)) < 1e-5);
  CHECK(fd::max_rel_err(g[1].value(), fd::fd_grad(objective, b)) < 1e-5);
  CHECK(fd::max_rel_err(g[2].value(), fd::fd_grad(objective, c)) < 1e-5);
  CHECK(fd::max_rel_err(g[3].value(), fd::fd_grad(objective, v)) < 1e-5);
}

TEST_CASE("second-order gradient matches finite differences of the first") {
  Rng rng(23);
  Var x = leaf(rand_tensor(rng, {4}));
  Var w = leaf(rand_tensor(rng, {4}));

  auto first_component = [&](std::size_t i) {
    Var f = sum_all(vexp(mul(x, w)));
    auto g = grad(f, {x}, true);
    return g[0].value()[i];
  };

  Var f = sum_all(vexp(mul(x, w)));
  auto g1 = grad(f, {x}, true);
  for (std::size_t i = 0; i < 4; ++i) {
    Var gi = slice_rows(g1[0], i, 1);
    auto g2 = grad(gi, {x, w});
    Tensor fd_x = fd::fd_grad([&] { return first_component(i); }, x);
    Tensor fd_w = fd::fd_grad([&] { return first_component(i); }, w);
    CHECK(fd::max_rel_err(g2[0].value(), fd_x) < 1e-4);
    CHECK(fd::max_rel_err(g2[1].value(), fd_w) < 1e-4);
  }
}

TEST_CASE("unreachable leaf gets a zero gradient") {
  Var x = leaf(Tensor::scalar(2.0));
  Var y = leaf(Tensor::full({3}, 1.0));
  Var f = mul(x, x);
  auto g = grad(f, {y});
  CHECK(g[0].shape() == std::vector<std::size_t>{3});
  for (double v : g[0].value().data()) CHECK(v == 0.0);
}

TEST_CASE("elu values and subgradient convention") {
  Var x = leaf(Tensor({5}, {0.0, 1.0, -1.0, 2.5, -0.3}));
  Var y = elu(x);
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[1] == 1.0);
  CHECK(y.value()[2] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-12));
  auto g = grad(sum_all(y), {x});
  CHECK(g[0].value()[0] == 1.0);  // elu'(0) = 1
  CHECK(g[0].value()[1] == 1.0);
  CHECK(g[0].value()[2] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("softshrink values and gradient pattern") {
  Var x = leaf(Tensor({5}, {0.5, 0.005, -0.5, 0.01, -0.01}));
  Var y = softshrink(x, 0.01);
  CHECK(y.value()[0] == doctest::Approx(0.49).epsilon(1e-15));
  CHECK(y.value()[1] == 0.0);
  CHECK(y.value()[2] == doctest::Approx(-0.49).epsilon(1e-15));
  CHECK(y.value()[3] == 0.0);  // boundary maps into the dead zone
  auto g = grad(sum_all(y), {x});
  CHECK(g[0].value()[0] == 1.0);
  CHECK(g[0].value()[1] == 0.0);
  CHECK(g[0].value()[2] == 1.0);
  CHECK(g[0].value()[3] == 0.0);  // subgradient 0 exactly at |x| = lambda
  CHECK(g[0].value()[4] == 0.0);
  CHECK_THROWS_AS(softshrink(x, -0.1), TensorError);
}

TEST_CASE("non-scalar objective is rejected") {
  Var x = leaf(Tensor::full({3}, 1.0));
  CHECK_THROWS_AS(grad(mul(x, x), {x}), AutodiffError);
}

TEST_CASE("NaN during backward is surfaced") {
  Var x = leaf(Tensor::scalar(0.0));
  Var f = vlog(x);  // -inf value; gradient 1/0 -> inf
  CHECK_THROWS_AS(grad(f, {x}), AutodiffError);
}

TEST_CASE("relu takes the zero branch at the origin") {
  Var x = leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
  auto g = grad(sum_all(relu(x)), {x});
  CHECK(g[0].value()[0] == 0.0);
  CHECK(g[0].value()[1] == 0.0);  // max(0, x) ties to the first argument
  CHECK(g[0].value()[2] == 1.0);
}

TEST_CASE("broadcast add reduces gradients to parent shapes") {
  Rng rng(5);
  Var m = leaf(rand_tensor(rng, {3, 4}));
  Var row = leaf(rand_tensor(rng, {1, 4}));
  auto objective = [&] { return sum_all(mul(add(m, row), add(m, row))).value()[0]; };
  auto g = grad(sum_all(mul(add(m, row), add(m, row))), {m, row});
  CHECK(g[1].shape() == std::vector<std::size_t>{1, 4});
  CHECK(fd::max_rel_err(g[0].value(), fd::fd_grad(objective, m)) < 1e-5);
  CHECK(fd::max_rel_err(g[1].value(), fd::fd_grad(objective, row)) < 1e-5);
}

TEST_CASE("interp endpoints and identity") {
  Var x = leaf(Tensor({2}, {0.0, 1.0}));
  CHECK(interp_linear(x, 3).value().data() == std::vector<double>{0.0, 0.5, 1.0});
  Var y = leaf(Tensor({3}, {0.0, 3.0, 6.0}));
  CHECK(interp_linear(y, 5).value().data() == std::vector<double>{0.0, 1.5, 3.0, 4.5, 6.0});
  CHECK(interp_linear(y, 3).value().data() == y.value().data());
}

TEST_CASE("grad through detach stops") {
  Var x = leaf(Tensor::scalar(3.0));
  Var d = mul(x, x).detach();
  Var f = mul(d, x);
  auto g = grad(f, {x});
  CHECK(g[0].value()[0] == doctest::Approx(9.0));  // d treated as constant
}
