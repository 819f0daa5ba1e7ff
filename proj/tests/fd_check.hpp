#pragma once

// Central finite-difference oracle used across the test suites. Lives in test
// code only; independent of the reverse-mode path it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "dcn/autodiff.hpp"
#include "dcn/tensor.hpp"

namespace fd {

inline double rel_err(double got, double want) {
  double denom = std::max({1e-6, std::abs(got), std::abs(want)});
  return std::abs(got - want) / denom;
}

/// d objective / d leaf[i] by central differences. `build` must rebuild the
/// scalar objective from the leaves' current values on every call.
inline dcn::Tensor fd_grad(const std::function<double()>& objective, const dcn::Var& leaf,
                           double step = 1e-5) {
  dcn::Tensor g(leaf.shape());
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    dcn::Tensor v = leaf.value();
    double orig = v[i];
    v[i] = orig + step;
    leaf.set_value(v);
    double up = objective();
    v[i] = orig - step;
    leaf.set_value(v);
    double down = objective();
    v[i] = orig;
    leaf.set_value(v);
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// max relative error between an analytic gradient tensor and the FD one
inline double max_rel_err(const dcn::Tensor& got, const dcn::Tensor& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, rel_err(got[i], want[i]));
  return worst;
}

}  // namespace fd
