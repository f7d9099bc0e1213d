#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every op allocates a fresh result node. When gradient recording is enabled
// and any input requires a gradient, the node keeps its parents plus a closure
// that pushes the node's gradient back into them. Parameters are leaf nodes
// whose gradients accumulate across backward() calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace wssod::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<double> value);
  static Var parameter(Shape shape, std::vector<double> value);
  static Var scalar(double v);
  static Var zeros(Shape shape);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }

  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  double item() const;
  double at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad();
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Runs reverse accumulation from a scalar root (seed gradient `seed`).
void backward(const Var& root, double seed = 1.0);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise arithmetic; shapes must match exactly.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var clamp_min(const Var& a, double lo);
Var mul_const(const Var& a, std::span<const double> c);
Var add_const(const Var& a, std::span<const double> c);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// Unary maps.
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var stop_gradient(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// [n, d] -> [n, 1].
Var row_sum(const Var& a);
/// Euclidean norm of each row, [n, d] -> [n, 1]; the subgradient at a zero row is 0.
Var row_norm(const Var& a);

// 2-D structure.
Var matmul(const Var& a, const Var& b);
/// a · bᵀ for a [m, k], b [n, k].
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Adds a length-d vector to every row of an [n, d] matrix.
Var add_row(const Var& a, const Var& row);
/// Per-column affine map y[:, j] = a[:, j] * scale[j] + shift[j] with constant coefficients.
Var affine_cols(const Var& a, std::span<const double> scale, std::span<const double> shift);
Var slice_cols(const Var& a, int start, int count);
Var slice_rows(const Var& a, int start, int count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& a, std::span<const int> rows);

// Neural-network primitives.
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
/// x [Ci, H, W], w [Co, Ci, k, k], b [Co] (may be undefined) -> [Co, Ho, Wo].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// Sigmoid focal loss per element; targets in [0, 1].
Var sigmoid_focal(const Var& logits, std::span<const double> targets, double alpha, double gamma);
/// Binary cross-entropy with logits per element.
Var bce_with_logits(const Var& logits, std::span<const double> targets);

}  // namespace wssod::ad
