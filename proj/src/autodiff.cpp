#include "dcn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace dcn {

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw TensorError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                    " and " + shape_str(b.shape()));
}

// numpy-style broadcast of two shapes, trailing axes aligned
std::vector<std::size_t> broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t rank = std::max(sa.size(), sb.size());
  std::vector<std::size_t> out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - sa.size() ? 1 : sa[i - (rank - sa.size())];
    std::size_t db = i < rank - sb.size() ? 1 : sb[i - (rank - sb.size())];
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// strides of `shape` embedded in `out` (0 where broadcast)
std::vector<std::size_t> embedded_strides(const std::vector<std::size_t>& shape,
                                          const std::vector<std::size_t>& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    std::size_t oi = i + (out.size() - shape.size());
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= shape[i];
  }
  return strides;
}

template <class F>
Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (a.numel() == 1) {
    Tensor out(a.rank() <= b.rank() ? b.shape() : broadcast_shape(op, a, b));
    double av = a[0];
    for (std::size_t i = 0; i < b.numel(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  if (b.numel() == 1) {
    Tensor out(b.rank() <= a.rank() ? a.shape() : broadcast_shape(op, a, b));
    double bv = b[0];
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  auto shape = broadcast_shape(op, a, b);
  Tensor out(shape);
  if (shape.size() == 2) {
    std::size_t n = shape[0], m = shape[1];
    auto kind = [n, m](const Tensor& t) {
      // 0: full matrix, 1: column vector, 2: row vector, 3: other
      if (t.rank() == 2 && t.shape()[0] == n && t.shape()[1] == m) return 0;
      if (t.rank() == 2 && t.shape()[0] == n && t.shape()[1] == 1) return 1;
      if ((t.rank() == 2 && t.shape()[0] == 1 && t.shape()[1] == m) ||
          (t.rank() == 1 && t.shape()[0] == m))
        return 2;
      return 3;
    };
    int ka = kind(a), kb = kind(b);
    if (ka != 3 && kb != 3) {
      for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.data().data() + i * m;
        const double* arow = a.data().data() + (ka == 0 ? i * m : ka == 1 ? i : 0);
        const double* brow = b.data().data() + (kb == 0 ? i * m : kb == 1 ? i : 0);
        for (std::size_t j = 0; j < m; ++j) {
          double av = ka == 1 ? *arow : arow[j];
          double bv = kb == 1 ? *brow : brow[j];
          orow[j] = f(av, bv);
        }
      }
      return out;
    }
  }
  auto sta = embedded_strides(a.shape(), shape);
  auto stb = embedded_strides(b.shape(), shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < out.numel(); ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      ia += idx[d] * sta[d];
      ib += idx[d] * stb[d];
    }
    out[flat] = f(a[ia], b[ib]);
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

template <class F>
Tensor ew_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

Tensor reduce_to_shape(const char* op, const Tensor& x, const std::vector<std::size_t>& target) {
  if (x.shape() == target) return x;
  if (target.size() > x.rank())
    throw TensorError(std::string(op) + ": cannot reduce " + shape_str(x.shape()) + " to " +
                      shape_str(target));
  for (std::size_t i = 0; i < target.size(); ++i) {
    std::size_t xi = i + (x.rank() - target.size());
    if (target[i] != 1 && target[i] != x.shape()[xi])
      throw TensorError(std::string(op) + ": cannot reduce " + shape_str(x.shape()) + " to " +
                        shape_str(target));
  }
  Tensor out(target);
  if (shape_numel(target) == 1) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    out[0] = s;
    return out;
  }
  if (x.rank() == 2) {
    std::size_t n = x.shape()[0], m = x.shape()[1];
    if (target.size() == 2 && target[0] == n && target[1] == 1) {  // row sums
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        const double* row = x.data().data() + i * m;
        for (std::size_t j = 0; j < m; ++j) s += row[j];
        out[i] = s;
      }
      return out;
    }
    bool row_target = (target.size() == 2 && target[0] == 1 && target[1] == m) ||
                      (target.size() == 1 && target[0] == m);
    if (row_target) {  // column sums
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * m;
        for (std::size_t j = 0; j < m; ++j) out[j] += row[j];
      }
      return out;
    }
  }
  auto strides = embedded_strides(target, x.shape());
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t io = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) io += idx[d] * strides[d];
    out[io] += x[flat];
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (++idx[d] < x.shape()[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor expand_to_shape(const char* op, const Tensor& x, const std::vector<std::size_t>& target) {
  if (x.shape() == target) return x;
  Tensor out(target);
  if (target.size() < x.rank()) throw TensorError(std::string(op) + ": cannot broadcast down");
  for (std::size_t i = 0; i < x.rank(); ++i) {
    std::size_t oi = i + (target.size() - x.rank());
    if (x.shape()[i] != 1 && x.shape()[i] != target[oi])
      throw TensorError(std::string(op) + ": cannot broadcast " + shape_str(x.shape()) + " to " +
                        shape_str(target));
  }
  if (x.numel() == 1) {
    double v = x[0];
    for (double& o : out.data()) o = v;
    return out;
  }
  if (target.size() == 2) {
    std::size_t n = target[0], m = target[1];
    if (x.rank() == 2 && x.shape()[0] == n && x.shape()[1] == 1) {  // column vector
      for (std::size_t i = 0; i < n; ++i) {
        double v = x[i];
        double* row = out.data().data() + i * m;
        for (std::size_t j = 0; j < m; ++j) row[j] = v;
      }
      return out;
    }
    if ((x.rank() == 2 && x.shape()[0] == 1 && x.shape()[1] == m) ||
        (x.rank() == 1 && x.shape()[0] == m)) {  // row vector
      for (std::size_t i = 0; i < n; ++i)
        std::copy(x.data().begin(), x.data().end(), out.data().begin() + i * m);
      return out;
    }
  }
  auto strides = embedded_strides(x.shape(), target);
  std::vector<std::size_t> idx(target.size(), 0);
  for (std::size_t flat = 0; flat < out.numel(); ++flat) {
    std::size_t ix = 0;
    for (std::size_t d = 0; d < target.size(); ++d) ix += idx[d] * strides[d];
    out[flat] = x[ix];
    for (std::size_t d = target.size(); d-- > 0;) {
      if (++idx[d] < target[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor interp_forward(const Tensor& x, std::size_t out_len) {
  std::size_t n = x.numel();
  if (out_len == n) {
    Tensor out({out_len});
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i];
    return out;
  }
  if (n < 2) throw TensorError("interp_linear: source length must be >= 2 to resize");
  Tensor out({out_len});
  if (out_len == 1) {
    out[0] = x[0];
    return out;
  }
  double step = static_cast<double>(n - 1) / static_cast<double>(out_len - 1);
  for (std::size_t i = 0; i < out_len; ++i) {
    double p = step * static_cast<double>(i);
    std::size_t lo = static_cast<std::size_t>(p);
    if (lo >= n - 1) lo = n - 2;
    double w = p - static_cast<double>(lo);
    out[i] = (1.0 - w) * x[lo] + w * x[lo + 1];
  }
  return out;
}

// transpose of interp_forward's linear map: scatter instead of gather
Tensor interp_adjoint_forward(const Tensor& g, std::size_t out_len) {
  std::size_t m = g.numel();  // incoming length (the interp output side)
  Tensor out({out_len});
  if (out_len == m) {
    for (std::size_t i = 0; i < m; ++i) out[i] = g[i];
    return out;
  }
  if (out_len < 2) throw TensorError("interp_linear_adjoint: target length must be >= 2");
  if (m == 1) {
    out[0] = g[0];
    return out;
  }
  double step = static_cast<double>(out_len - 1) / static_cast<double>(m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    double p = step * static_cast<double>(i);
    std::size_t lo = static_cast<std::size_t>(p);
    if (lo >= out_len - 1) lo = out_len - 2;
    double w = p - static_cast<double>(lo);
    out[lo] += (1.0 - w) * g[i];
    out[lo + 1] += w * g[i];
  }
  return out;
}

}  // namespace

Var make_node(const char* op, Tensor value, std::vector<Var> parents, VjpFn vjp) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->value = std::move(value);
  n->parents = std::move(parents);
  bool rg = false;
  for (const auto& p : n->parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) n->vjp = std::move(vjp);
  return Var(std::move(n));
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Var constant(Tensor value) { return leaf(std::move(value), false); }
Var constant(double scalar_value) { return leaf(Tensor::scalar(scalar_value), false); }

Var Var::detach() const { return constant(node_->value); }

void Var::set_value(Tensor v) const {
  if (!is_leaf()) throw AutodiffError("set_value: only leaves are assignable");
  if (!v.same_shape(node_->value))
    throw TensorError("set_value: shape " + shape_str(v.shape()) + " != " +
                      shape_str(node_->value.shape()));
  node_->value = std::move(v);
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tensor v = ew_binary("add", a.value(), b.value(), [](double x, double y) { return x + y; });
  return make_node("add", std::move(v), {a, b},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     return std::vector<Var>{need[0] ? sum_to_shape(g, ps[0].shape()) : Var{},
                                             need[1] ? sum_to_shape(g, ps[1].shape()) : Var{}};
                   });
}

Var sub(const Var& a, const Var& b) {
  Tensor v = ew_binary("sub", a.value(), b.value(), [](double x, double y) { return x - y; });
  return make_node("sub", std::move(v), {a, b},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     return std::vector<Var>{
                         need[0] ? sum_to_shape(g, ps[0].shape()) : Var{},
                         need[1] ? sum_to_shape(neg(g), ps[1].shape()) : Var{}};
                   });
}

Var mul(const Var& a, const Var& b) {
  Tensor v = ew_binary("mul", a.value(), b.value(), [](double x, double y) { return x * y; });
  return make_node("mul", std::move(v), {a, b},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     return std::vector<Var>{
                         need[0] ? sum_to_shape(mul(g, ps[1]), ps[0].shape()) : Var{},
                         need[1] ? sum_to_shape(mul(g, ps[0]), ps[1].shape()) : Var{}};
                   });
}

Var vdiv(const Var& a, const Var& b) {
  Tensor v = ew_binary("div", a.value(), b.value(), [](double x, double y) { return x / y; });
  return make_node("div", std::move(v), {a, b},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     // d/da = g/b ; d/db = -g (a/b) / b
                     return std::vector<Var>{
                         need[0] ? sum_to_shape(vdiv(g, ps[1]), ps[0].shape()) : Var{},
                         need[1] ? sum_to_shape(neg(vdiv(mul(g, self), ps[1])), ps[1].shape())
                                 : Var{}};
                   });
}

Var neg(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return -a; });
  return make_node("neg", std::move(v), {x},
                   [](const Var&, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{neg(g)};
                   });
}

Var scale(const Var& x, double c) {
  Tensor v = ew_unary(x.value(), [c](double a) { return a * c; });
  return make_node("scale", std::move(v), {x},
                   [c](const Var&, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{scale(g, c)};
                   });
}

Var add_const(const Var& x, double c) {
  Tensor v = ew_unary(x.value(), [c](double a) { return a + c; });
  return make_node("add_const", std::move(v), {x},
                   [](const Var&, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{g};
                   });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) shape_fail("matmul", A, B);
  std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data().data() + p * m;
      double* crow = C.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return make_node("matmul", std::move(C), {a, b},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     return std::vector<Var>{
                         need[0] ? matmul(g, transpose(ps[1])) : Var{},
                         need[1] ? matmul(transpose(ps[0]), g) : Var{}};
                   });
}

Var transpose(const Var& x) {
  const Tensor& X = x.value();
  if (X.rank() != 2) throw TensorError("transpose: need rank-2, got " + shape_str(X.shape()));
  std::size_t n = X.rows(), m = X.cols();
  Tensor T({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) T[j * n + i] = X[i * m + j];
  return make_node("transpose", std::move(T), {x},
                   [](const Var&, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{transpose(g)};
                   });
}

Var vexp(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return std::exp(a); });
  return make_node("exp", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{mul(g, self)};
                   });
}

Var vlog(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return std::log(a); });
  return make_node("log", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{vdiv(g, self.raw()->parents[0])};
                   });
}

Var vsqrt(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return std::sqrt(a); });
  return make_node("sqrt", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{scale(vdiv(g, self), 0.5)};
                   });
}

Var vsin(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return std::sin(a); });
  return make_node("sin", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{mul(g, vcos(self.raw()->parents[0]))};
                   });
}

Var vcos(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return std::cos(a); });
  return make_node("cos", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{neg(mul(g, vsin(self.raw()->parents[0])))};
                   });
}

Var relu(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return a > 0.0 ? a : 0.0; });
  return make_node("relu", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{mul(g, mask_gt(self.raw()->parents[0], 0.0))};
                   });
}

Var elu(const Var& x) {
  Tensor v = ew_unary(x.value(), [](double a) { return a >= 0.0 ? a : std::exp(a) - 1.0; });
  return make_node("elu", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     const Var& p = self.raw()->parents[0];
                     // elu'(x) = 1 for x >= 0 (incl. the 0 kink), exp(x) below. The exp
                     // argument is masked to zero on the non-negative side so large
                     // positive activations cannot overflow it.
                     Var m = mask_ge(p, 0.0);
                     Var neg_side = sub(constant(1.0), m);
                     Var factor = add(m, mul(neg_side, vexp(mul(neg_side, p))));
                     return std::vector<Var>{mul(g, factor)};
                   });
}

Var softshrink(const Var& x, double lambda) {
  if (lambda < 0.0) throw TensorError("softshrink: lambda must be >= 0");
  Tensor v = ew_unary(x.value(), [lambda](double a) {
    if (a > lambda) return a - lambda;
    if (a < -lambda) return a + lambda;
    return 0.0;
  });
  return make_node("softshrink", std::move(v), {x},
                   [lambda](const Var& self, const Var& g, const std::vector<char>&) {
                     const Var& p = self.raw()->parents[0];
                     // subgradient 0 at |x| == lambda (strict comparisons)
                     return std::vector<Var>{
                         mul(g, add(mask_gt(p, lambda), mask_lt(p, -lambda)))};
                   });
}

Var mask_gt(const Var& x, double c) {
  return constant(ew_unary(x.value(), [c](double a) { return a > c ? 1.0 : 0.0; }));
}
Var mask_lt(const Var& x, double c) {
  return constant(ew_unary(x.value(), [c](double a) { return a < c ? 1.0 : 0.0; }));
}
Var mask_ge(const Var& x, double c) {
  return constant(ew_unary(x.value(), [c](double a) { return a >= c ? 1.0 : 0.0; }));
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double a : x.value().data()) s += a;
  return make_node("sum_all", Tensor::scalar(s), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{broadcast_to(g, self.raw()->parents[0].shape())};
                   });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Var sum_to_shape(const Var& x, std::vector<std::size_t> target) {
  if (x.shape() == target) return x;
  Tensor v = reduce_to_shape("sum_to_shape", x.value(), target);
  return make_node("sum_to_shape", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{broadcast_to(g, self.raw()->parents[0].shape())};
                   });
}

Var broadcast_to(const Var& x, std::vector<std::size_t> target) {
  if (x.shape() == target) return x;
  Tensor v = expand_to_shape("broadcast_to", x.value(), target);
  return make_node("broadcast_to", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{sum_to_shape(g, self.raw()->parents[0].shape())};
                   });
}

Var logsumexp_rows(const Var& x) {
  const Tensor& X = x.value();
  if (X.rank() != 2) throw TensorError("logsumexp_rows: need rank-2, got " + shape_str(X.shape()));
  std::size_t n = X.rows(), m = X.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = X[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, X[i * m + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(X[i * m + j] - mx);
    out[i] = mx + std::log(s);
  }
  return make_node("logsumexp_rows", std::move(out), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     const Var& p = self.raw()->parents[0];
                     // softmax rows, reusing the forward value for stability
                     Var sm = vexp(sub(p, broadcast_to(self, p.shape())));
                     return std::vector<Var>{mul(broadcast_to(g, p.shape()), sm)};
                   });
}

Var softmax_rows(const Var& x) {
  return vexp(sub(x, broadcast_to(logsumexp_rows(x), x.shape())));
}

Var reshape(const Var& x, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != x.numel())
    throw TensorError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                      " changes element count");
  Tensor v(std::move(shape), x.value().data());
  return make_node("reshape", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{reshape(g, self.raw()->parents[0].shape())};
                   });
}

// rank-1 inputs count as single rows; output is always rank-2
Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw TensorError("concat_rows: empty input");
  std::size_t cols = xs[0].value().cols();
  std::size_t rows = 0;
  for (const auto& x : xs) {
    if (x.value().rank() > 2 || x.value().cols() != cols)
      throw TensorError("concat_rows: column mismatch");
    rows += x.value().rows();
  }
  Tensor v({rows, cols});
  std::size_t r = 0;
  for (const auto& x : xs) {
    const auto& d = x.value().data();
    std::copy(d.begin(), d.end(), v.data().begin() + r * cols);
    r += x.value().rows();
  }
  return make_node("concat_rows", std::move(v), {xs},
                   [](const Var& self, const Var& g, const std::vector<char>& need) {
                     const auto& ps = self.raw()->parents;
                     std::vector<Var> out;
                     out.reserve(ps.size());
                     std::size_t r = 0;
                     for (std::size_t i = 0; i < ps.size(); ++i) {
                       std::size_t pr = ps[i].value().rows();
                       if (need[i]) {
                         Var piece = slice_rows(g, r, pr);
                         out.push_back(ps[i].value().rank() == 1 ? reshape(piece, ps[i].shape())
                                                                 : piece);
                       } else {
                         out.push_back(Var{});
                       }
                       r += pr;
                     }
                     return out;
                   });
}

// rank-1 tensors slice along their single axis, rank-2 along rows
Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& X = x.value();
  bool vec = X.rank() == 1;
  std::size_t rows = vec ? X.numel() : X.rows();
  std::size_t cols = vec ? 1 : X.cols();
  if (count == 0 || begin + count > rows) throw TensorError("slice_rows: out of range");
  Tensor v(vec ? std::vector<std::size_t>{count} : std::vector<std::size_t>{count, cols});
  std::copy(X.data().begin() + begin * cols, X.data().begin() + (begin + count) * cols,
            v.data().begin());
  return make_node(
      "slice_rows", std::move(v), {x},
      [begin, count](const Var& self, const Var& g, const std::vector<char>&) {
        const Var& p = self.raw()->parents[0];
        bool pvec = p.value().rank() == 1;
        std::size_t prow = pvec ? p.numel() : p.value().rows();
        std::size_t pcol = pvec ? 1 : p.value().cols();
        // zero-pad around the slice, keeping g on the graph
        std::vector<Var> pieces;
        if (begin > 0) pieces.push_back(constant(Tensor({begin, pcol})));
        pieces.push_back(reshape(g, {count, pcol}));
        if (begin + count < prow)
          pieces.push_back(constant(Tensor({prow - begin - count, pcol})));
        Var padded = pieces.size() == 1 ? pieces[0] : concat_rows(pieces);
        return std::vector<Var>{reshape(padded, p.shape())};
      });
}

Var interp_linear(const Var& x, std::size_t out_len) {
  if (x.value().rank() != 1)
    throw TensorError("interp_linear: need rank-1, got " + shape_str(x.shape()));
  Tensor v = interp_forward(x.value(), out_len);
  return make_node("interp_linear", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{
                         interp_linear_adjoint(g, self.raw()->parents[0].numel())};
                   });
}

Var interp_linear_adjoint(const Var& x, std::size_t out_len) {
  if (x.value().rank() != 1)
    throw TensorError("interp_linear_adjoint: need rank-1, got " + shape_str(x.shape()));
  Tensor v = interp_adjoint_forward(x.value(), out_len);
  return make_node("interp_linear_adjoint", std::move(v), {x},
                   [](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{interp_linear(g, self.raw()->parents[0].numel())};
                   });
}

Var gather(const Var& x, IndexMap idx, std::vector<std::size_t> out_shape) {
  if (!idx || idx->size() != shape_numel(out_shape))
    throw TensorError("gather: index map does not match output shape");
  Tensor v(out_shape);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::ptrdiff_t src = (*idx)[i];
    if (src < 0) continue;
    if (std::size_t(src) >= x.numel()) throw TensorError("gather: index out of range");
    v[i] = x.value()[std::size_t(src)];
  }
  return make_node("gather", std::move(v), {x},
                   [idx](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{
                         scatter_add(g, idx, self.raw()->parents[0].shape())};
                   });
}

Var scatter_add(const Var& x, IndexMap idx, std::vector<std::size_t> out_shape) {
  if (!idx || idx->size() != x.numel())
    throw TensorError("scatter_add: index map does not match input shape");
  Tensor v(out_shape);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::ptrdiff_t dst = (*idx)[i];
    if (dst < 0) continue;
    if (std::size_t(dst) >= v.numel()) throw TensorError("scatter_add: index out of range");
    v[std::size_t(dst)] += x.value()[i];
  }
  return make_node("scatter_add", std::move(v), {x},
                   [idx](const Var& self, const Var& g, const std::vector<char>&) {
                     return std::vector<Var>{gather(g, idx, self.raw()->parents[0].shape())};
                   });
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

std::vector<Var> grad(const GradientRequest& req) {
  if (!req.objective.defined() || req.objective.numel() != 1)
    throw AutodiffError("grad: objective must be a defined scalar");

  // iterative post-order DFS over the requires-grad subgraph; parents land
  // before their consumers in `topo`
  std::vector<Var> topo;
  std::unordered_set<const Node*> seen;
  if (req.objective.requires_grad()) {
    struct Frame {
      Var v;
      std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({req.objective});
    seen.insert(req.objective.raw());
    while (!stack.empty()) {
      Frame& f = stack.back();
      const auto& parents = f.v.raw()->parents;
      bool descended = false;
      while (f.next < parents.size()) {
        const Var& p = parents[f.next++];
        if (p.requires_grad() && !seen.count(p.raw())) {
          seen.insert(p.raw());
          stack.push_back({p});
          descended = true;
          break;
        }
      }
      if (!descended && f.next >= parents.size()) {
        topo.push_back(f.v);
        stack.pop_back();
      }
    }
  }

  // restrict the reverse pass to nodes that can actually reach a requested
  // leaf; gradients toward everything else are never built
  std::unordered_map<const Node*, char> needed;
  needed.reserve(topo.size());
  for (const auto& w : req.wrt)
    if (w.defined()) needed[w.raw()] = 1;
  for (const auto& v : topo) {
    auto it = needed.find(v.raw());
    bool flag = it != needed.end() && it->second;
    if (!flag) {
      for (const auto& p : v.raw()->parents) {
        auto pit = needed.find(p.raw());
        if (pit != needed.end() && pit->second) {
          flag = true;
          break;
        }
      }
      if (flag) needed[v.raw()] = 1;
    }
  }

  std::unordered_map<const Node*, Var> gm;
  {
    auto it = needed.find(req.objective.raw());
    if (req.objective.requires_grad() && it != needed.end() && it->second)
      gm.emplace(req.objective.raw(), constant(Tensor::full({1}, 1.0)));
  }

  std::vector<char> mask;
  for (std::size_t i = topo.size(); i-- > 0;) {
    const Var& v = topo[i];
    auto it = gm.find(v.raw());
    if (it == gm.end()) continue;
    Var g = it->second;
    if (!g.value().all_finite())
      throw AutodiffError(std::string("grad: non-finite gradient at op '") + v.op() + "'");
    if (!v.raw()->vjp) continue;
    const auto& parents = v.raw()->parents;
    mask.assign(parents.size(), 0);
    bool any = false;
    for (std::size_t p = 0; p < parents.size(); ++p) {
      if (!parents[p].requires_grad()) continue;
      auto pit = needed.find(parents[p].raw());
      if (pit != needed.end() && pit->second) {
        mask[p] = 1;
        any = true;
      }
    }
    if (!any) continue;
    std::vector<Var> contrib = v.raw()->vjp(v, g, mask);
    if (contrib.size() != parents.size())
      throw AutodiffError(std::string("grad: vjp arity mismatch at op '") + v.op() + "'");
    for (std::size_t p = 0; p < parents.size(); ++p) {
      if (!mask[p] || !contrib[p].defined()) continue;
      auto pit = gm.find(parents[p].raw());
      if (pit == gm.end())
        gm.emplace(parents[p].raw(), contrib[p]);
      else
        pit->second = add(pit->second, contrib[p]);
    }
  }

  std::vector<Var> out;
  out.reserve(req.wrt.size());
  for (const auto& w : req.wrt) {
    auto it = gm.find(w.raw());
    Var g = it != gm.end() ? it->second : constant(Tensor::zeros(w.shape()));
    if (!g.value().all_finite()) throw AutodiffError("grad: non-finite gradient result");
    out.push_back(req.create_graph ? g : g.detach());
  }
  return out;
}

std::vector<Var> grad(const Var& objective, const std::vector<Var>& wrt, bool create_graph) {
  return grad(GradientRequest{objective, wrt, create_graph});
}

}  // namespace dcn
