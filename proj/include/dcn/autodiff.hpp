#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Var;

/// Builds the gradient contribution for each parent, *as graph expressions*,
/// given this node and the incoming gradient. needed[i] is false when parent
/// i cannot reach any requested leaf; the builder returns an undefined Var
/// there and skips the work.
using VjpFn = std::function<std::vector<Var>(const Var& self, const Var& grad_out,
                                             const std::vector<char>& needed)>;

struct Node {
  Tensor value;
  std::vector<Var> parents;
  VjpFn vjp;
  bool requires_grad = false;
  const char* op = "leaf";
};

/// Value-semantic handle to a node of the computation graph. Operations are
/// eager: every op computes its value at construction time. Backward passes
/// are themselves built from these ops, which is what makes gradients of
/// gradients (second-order meta-gradients) come out of the same machinery.
class Var {
 public:
  Var() = default;

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && node_->parents.empty() && !node_->vjp; }
  const char* op() const { return node_ ? node_->op : "undefined"; }

  /// same value, cut loose from the graph
  Var detach() const;

  /// leaves only: overwrite the stored value (optimizer steps, finite differences)
  void set_value(Tensor v) const;

  Node* raw() const { return node_.get(); }
  bool same_node(const Var& o) const { return node_.get() == o.node_.get(); }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;

  friend Var make_node(const char* op, Tensor value, std::vector<Var> parents, VjpFn vjp);
  friend Var leaf(Tensor value, bool requires_grad);
};

Var make_node(const char* op, Tensor value, std::vector<Var> parents, VjpFn vjp);
Var leaf(Tensor value, bool requires_grad = true);
Var constant(Tensor value);
Var constant(double scalar_value);

// ---- arithmetic; shapes broadcast numpy-style (trailing axes aligned) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var vdiv(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_const(const Var& x, double c);

// ---- linear algebra (rank-2 operands) ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);

// ---- elementwise nonlinearities ----
Var vexp(const Var& x);
Var vlog(const Var& x);
Var vsqrt(const Var& x);
Var vsin(const Var& x);
Var vcos(const Var& x);
Var relu(const Var& x);
Var elu(const Var& x);                      // alpha = 1, elu'(0) = 1
Var softshrink(const Var& x, double lambda);  // dead zone [-lambda, lambda]

// {0,1}-valued comparisons against a constant; gradient is zero by definition
Var mask_gt(const Var& x, double c);
Var mask_lt(const Var& x, double c);
Var mask_ge(const Var& x, double c);

// ---- reductions / shape ops ----
Var sum_all(const Var& x);   // -> shape [1]
Var mean_all(const Var& x);  // -> shape [1]
Var sum_to_shape(const Var& x, std::vector<std::size_t> target);
Var broadcast_to(const Var& x, std::vector<std::size_t> target);
Var logsumexp_rows(const Var& x);  // [n,m] -> [n,1], max-shifted
Var softmax_rows(const Var& x);    // composed from logsumexp_rows
Var reshape(const Var& x, std::vector<std::size_t> shape);
Var concat_rows(const std::vector<Var>& xs);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);

// 1-D piecewise-linear resample with endpoint alignment, and its adjoint
Var interp_linear(const Var& x, std::size_t out_len);
Var interp_linear_adjoint(const Var& x, std::size_t out_len);

// flat-index gather and its adjoint; -1 entries read as zero / are dropped
using IndexMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;
Var gather(const Var& x, IndexMap idx, std::vector<std::size_t> out_shape);
Var scatter_add(const Var& x, IndexMap idx, std::vector<std::size_t> out_shape);

struct GradientRequest {
  Var objective;          // scalar (shape [1])
  std::vector<Var> wrt;   // any graph nodes, usually leaves
  bool create_graph = false;  // keep results differentiable
};

/// Reverse-mode gradients of a scalar objective. One result per wrt entry,
/// shaped like it; zero tensor for entries the objective cannot reach.
std::vector<Var> grad(const GradientRequest& req);
std::vector<Var> grad(const Var& objective, const std::vector<Var>& wrt,
                      bool create_graph = false);

}  // namespace dcn
