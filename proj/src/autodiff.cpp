#include "wssod/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace wssod::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Products are evaluated on and into Eigen-owned (aligned) storage. Eigen peels the
// unaligned head of a vectorized loop at runtime and sums those entries in another order,
// so mapping std::vector memory directly makes the last bits depend on heap addresses.
MatR owned(const double* p, int rows, int cols) { return CMapR(p, rows, cols); }

thread_local bool g_grad_enabled = true;

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void require_2d(const Var& a, const char* op) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D input, got " + shape_str(a.shape()));
}

bool wants_grad(std::initializer_list<const Var*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Var* v : inputs) {
    if (v->defined() && v->requires_grad()) return true;
  }
  return false;
}

Var make_result(Shape shape, std::vector<double> value, std::initializer_list<const Var*> inputs,
                std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (wants_grad(inputs)) {
    // Constant inputs are kept alive too: backward closures read their values.
    node->requires_grad = true;
    for (const Var* v : inputs) {
      if (v->defined()) node->parents.push_back(v->shared());
    }
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

Var make_result_multi(Shape shape, std::vector<double> value, const std::vector<Var>& inputs,
                      std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (g_grad_enabled) {
    for (const Var& v : inputs) any = any || v.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    for (const Var& v : inputs) {
      if (v.defined()) node->parents.push_back(v.shared());
    }
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

// Elementwise unary helper: f gives the value, df(x, y) the local derivative.
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Node* an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, df](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(an->value[i], self.value[i]);
  });
}

double softplus_scalar(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Var Var::constant(Shape shape, std::vector<double> value) {
  if (numel(shape) != value.size()) throw std::invalid_argument("constant: size does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Shape shape, std::vector<double> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node_->requires_grad = true;
  v.node_->grad.assign(v.node_->value.size(), 0.0);
  return v;
}

Var Var::scalar(double v) { return constant({1}, {v}); }

Var Var::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

double Var::item() const {
  if (size() != 1) throw std::logic_error("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

void Var::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void backward(const Var& root, double seed) {
  if (!root.defined() || root.size() != 1) throw std::logic_error("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes start from zero; leaves keep their accumulated gradient.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    for (Node* p : {an, bn}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bn->value[i];
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var minimum(const Var& a, const Var& b) {
  require_same(a, b, "minimum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool pick_a = an->value[i] <= bn->value[i];
      Node* p = pick_a ? an : bn;
      if (p->requires_grad) p->ensure_grad()[i] += self.grad[i];
    }
  });
}

Var maximum(const Var& a, const Var& b) {
  require_same(a, b, "maximum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], b.value()[i]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool pick_a = an->value[i] >= bn->value[i];
      Node* p = pick_a ? an : bn;
      if (p->requires_grad) p->ensure_grad()[i] += self.grad[i];
    }
  });
}

Var clamp_min(const Var& a, double lo) {
  return unary(a, [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

Var mul_const(const Var& a, std::span<const double> c) {
  if (c.size() != a.size()) throw std::invalid_argument("mul_const: size mismatch");
  std::vector<double> coef(c.begin(), c.end());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * coef[i];
  Node* an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, coef = std::move(coef)](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * coef[i];
  });
}

Var add_const(const Var& a, std::span<const double> c) {
  if (c.size() != a.size()) throw std::invalid_argument("add_const: size mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c[i];
  Node* an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Unary

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var stop_gradient(const Var& a) { return Var::constant(a.shape(), a.value()); }

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  Node* an = a.node();
  return make_result({1}, {s}, {&a}, [an](Node& self) {
    auto& g = an->ensure_grad();
    const double d = self.grad[0];
    for (double& x : g) x += d;
  });
}

Var mean(const Var& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var row_sum(const Var& a) {
  require_2d(a, "row_sum");
  const int n = a.rows();
  const int d = a.cols();
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[i] += a.value()[i * d + j];
  }
  Node* an = a.node();
  return make_result({n, 1}, std::move(out), {&a}, [an, n, d](Node& self) {
    auto& g = an->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) g[i * d + j] += self.grad[i];
    }
  });
}

Var row_norm(const Var& a) {
  require_2d(a, "row_norm");
  const int n = a.rows();
  const int d = a.cols();
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += a.value()[i * d + j] * a.value()[i * d + j];
    out[i] = std::sqrt(s);
  }
  Node* an = a.node();
  return make_result({n, 1}, std::move(out), {&a}, [an, n, d](Node& self) {
    auto& g = an->ensure_grad();
    for (int i = 0; i < n; ++i) {
      if (self.value[i] == 0.0) continue;
      const double k = self.grad[i] / self.value[i];
      for (int j = 0; j < d; ++j) g[i * d + j] += k * an->value[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// 2-D structure

Var matmul(const Var& a, const Var& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int m = a.rows();
  const int k = a.cols();
  const int n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapR(out.data(), m, n) = MatR(owned(a.value().data(), m, k) * owned(b.value().data(), k, n));
  Node* an = a.node();
  Node* bn = b.node();
  return make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node& self) {
    const MatR go = owned(self.grad.data(), m, n);
    if (an->requires_grad) {
      MapR(an->ensure_grad().data(), m, k) += MatR(go * owned(bn->value.data(), k, n).transpose());
    }
    if (bn->requires_grad) {
      MapR(bn->ensure_grad().data(), k, n) += MatR(owned(an->value.data(), m, k).transpose() * go);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  const int m = a.rows();
  const int k = a.cols();
  const int n = b.rows();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapR(out.data(), m, n) = MatR(owned(a.value().data(), m, k) * owned(b.value().data(), n, k).transpose());
  Node* an = a.node();
  Node* bn = b.node();
  return make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node& self) {
    const MatR go = owned(self.grad.data(), m, n);
    if (an->requires_grad) {
      MapR(an->ensure_grad().data(), m, k) += MatR(go * owned(bn->value.data(), n, k));
    }
    if (bn->requires_grad) {
      MapR(bn->ensure_grad().data(), n, k) += MatR(go.transpose() * owned(an->value.data(), m, k));
    }
  });
}

Var transpose(const Var& a) {
  require_2d(a, "transpose");
  const int m = a.rows();
  const int n = a.cols();
  std::vector<double> out(a.size());
  MapR(out.data(), n, m) = CMapR(a.value().data(), m, n).transpose();
  Node* an = a.node();
  return make_result({n, m}, std::move(out), {&a}, [an, m, n](Node& self) {
    MapR(an->ensure_grad().data(), m, n) += CMapR(self.grad.data(), n, m).transpose();
  });
}

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) throw std::invalid_argument("reshape: element count mismatch");
  Node* an = a.node();
  return make_result(std::move(shape), a.value(), {&a}, [an](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var add_row(const Var& a, const Var& row) {
  require_2d(a, "add_row");
  const int n = a.rows();
  const int d = a.cols();
  if (row.size() != static_cast<std::size_t>(d)) throw std::invalid_argument("add_row: row length mismatch");
  std::vector<double> out(a.value());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[i * d + j] += row.value()[j];
  }
  Node* an = a.node();
  Node* rn = row.node();
  return make_result(a.shape(), std::move(out), {&a, &row}, [an, rn, n, d](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (rn->requires_grad) {
      auto& g = rn->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
      }
    }
  });
}

Var affine_cols(const Var& a, std::span<const double> scale_, std::span<const double> shift) {
  require_2d(a, "affine_cols");
  const int n = a.rows();
  const int d = a.cols();
  if (scale_.size() != static_cast<std::size_t>(d) || shift.size() != static_cast<std::size_t>(d)) {
    throw std::invalid_argument("affine_cols: coefficient length mismatch");
  }
  std::vector<double> sc(scale_.begin(), scale_.end());
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[i * d + j] = a.value()[i * d + j] * sc[j] + shift[j];
  }
  Node* an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, n, d, sc = std::move(sc)](Node& self) {
    auto& g = an->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] * sc[j];
    }
  });
}

Var slice_cols(const Var& a, int start, int count) {
  require_2d(a, "slice_cols");
  const int n = a.rows();
  const int d = a.cols();
  if (start < 0 || count < 0 || start + count > d) throw std::out_of_range("slice_cols: range outside tensor");
  std::vector<double> out(static_cast<std::size_t>(n) * count);
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().begin() + i * d + start, count, out.begin() + i * count);
  }
  Node* an = a.node();
  return make_result({n, count}, std::move(out), {&a}, [an, n, d, start, count](Node& self) {
    auto& g = an->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < count; ++j) g[i * d + start + j] += self.grad[i * count + j];
    }
  });
}

Var slice_rows(const Var& a, int start, int count) {
  require_2d(a, "slice_rows");
  const int n = a.rows();
  const int d = a.cols();
  if (start < 0 || count < 0 || start + count > n) throw std::out_of_range("slice_rows: range outside tensor");
  std::vector<double> out(a.value().begin() + static_cast<std::size_t>(start) * d,
                          a.value().begin() + static_cast<std::size_t>(start + count) * d);
  Node* an = a.node();
  return make_result({count, d}, std::move(out), {&a}, [an, d, start](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[static_cast<std::size_t>(start) * d + i] += self.grad[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int n = parts[0].rows();
  int d = 0;
  for (const Var& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
    d += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(n) * d);
  std::vector<Node*> nodes;
  std::vector<int> offsets;
  int off = 0;
  for (const Var& p : parts) {
    const int c = p.cols();
    for (int i = 0; i < n; ++i) std::copy_n(p.value().begin() + i * c, c, out.begin() + i * d + off);
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += c;
  }
  return make_result_multi({n, d}, std::move(out), parts, [nodes, offsets, n, d](Node& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      Node* p = nodes[k];
      if (!p->requires_grad) continue;
      const int c = p->shape[1];
      auto& g = p->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[i * d + offsets[k] + j];
      }
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int d = parts[0].cols();
  int n = 0;
  for (const Var& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d) throw std::invalid_argument("concat_rows: column count mismatch");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) * d);
  std::vector<Node*> nodes;
  for (const Var& p : parts) {
    out.insert(out.end(), p.value().begin(), p.value().end());
    nodes.push_back(p.node());
  }
  return make_result_multi({n, d}, std::move(out), parts, [nodes](Node& self) {
    std::size_t off = 0;
    for (Node* p : nodes) {
      const std::size_t sz = p->value.size();
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < sz; ++i) g[i] += self.grad[off + i];
      }
      off += sz;
    }
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  require_2d(a, "gather_rows");
  const int n = a.rows();
  const int d = a.cols();
  std::vector<int> idx(rows.begin(), rows.end());
  const int m = static_cast<int>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(m) * d);
  for (int i = 0; i < m; ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(a.value().begin() + static_cast<std::size_t>(idx[i]) * d, d, out.begin() + static_cast<std::size_t>(i) * d);
  }
  Node* an = a.node();
  return make_result({m, d}, std::move(out), {&a}, [an, idx = std::move(idx), d](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Neural-network primitives

Var softmax_rows(const Var& a) {
  require_2d(a, "softmax_rows");
  const int n = a.rows();
  const int d = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i) {
    const double* x = a.value().data() + static_cast<std::size_t>(i) * d;
    double* y = out.data() + static_cast<std::size_t>(i) * d;
    const double mx = *std::max_element(x, x + d);
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (int j = 0; j < d; ++j) y[j] /= s;
  }
  Node* an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, n, d](Node& self) {
    auto& g = an->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * d;
      const double* gy = self.grad.data() + static_cast<std::size_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(i) * d + j] += y[j] * (gy[j] - dot);
    }
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  require_2d(a, "layer_norm_rows");
  const int n = a.rows();
  const int d = a.cols();
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d)) {
    throw std::invalid_argument("layer_norm_rows: affine parameter length mismatch");
  }
  std::vector<double> out(a.size());
  std::vector<double> xhat(a.size());
  std::vector<double> inv_std(n);
  for (int i = 0; i < n; ++i) {
    const double* x = a.value().data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * d + j;
      xhat[k] = (x[j] - mu) * inv_std[i];
      out[k] = xhat[k] * gamma.value()[j] + beta.value()[j];
    }
  }
  Node* an = a.node();
  Node* gn = gamma.node();
  Node* bn = beta.node();
  return make_result(a.shape(), std::move(out), {&a, &gamma, &beta},
                     [an, gn, bn, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       if (gn->requires_grad || bn->requires_grad) {
                         for (int i = 0; i < n; ++i) {
                           for (int j = 0; j < d; ++j) {
                             const std::size_t k = static_cast<std::size_t>(i) * d + j;
                             if (gn->requires_grad) gn->ensure_grad()[j] += self.grad[k] * xhat[k];
                             if (bn->requires_grad) bn->ensure_grad()[j] += self.grad[k];
                           }
                         }
                       }
                       if (!an->requires_grad) return;
                       auto& g = an->ensure_grad();
                       std::vector<double> dxhat(d);
                       for (int i = 0; i < n; ++i) {
                         double m1 = 0.0;
                         double m2 = 0.0;
                         for (int j = 0; j < d; ++j) {
                           const std::size_t k = static_cast<std::size_t>(i) * d + j;
                           dxhat[j] = self.grad[k] * gn->value[j];
                           m1 += dxhat[j];
                           m2 += dxhat[j] * xhat[k];
                         }
                         m1 /= d;
                         m2 /= d;
                         for (int j = 0; j < d; ++j) {
                           const std::size_t k = static_cast<std::size_t>(i) * d + j;
                           g[k] += inv_std[i] * (dxhat[j] - m1 - xhat[k] * m2);
                         }
                       }
                     });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) throw std::invalid_argument("conv2d: expected x [C,H,W] and w [Co,Ci,k,k]");
  const int ci = x.dim(0);
  const int h = x.dim(1);
  const int wd = x.dim(2);
  const int co = w.dim(0);
  const int k = w.dim(2);
  if (w.dim(1) != ci || w.dim(3) != k) throw std::invalid_argument("conv2d: weight shape mismatch");
  if (b.defined() && b.size() != static_cast<std::size_t>(co)) throw std::invalid_argument("conv2d: bias length mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");
  const int kk = ci * k * k;
  const int hw = ho * wo;

  // im2col: cols[(c*k + ky)*k + kx, oy*wo + ox]
  MatR cols = MatR::Zero(kk, hw);
  const double* xv = x.value().data();
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = xv + (static_cast<std::size_t>(c) * h + iy) * wd;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < wd) row[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }

  std::vector<double> out(static_cast<std::size_t>(co) * hw);
  MapR om(out.data(), co, hw);
  om = MatR(owned(w.value().data(), co, kk) * cols);
  if (b.defined()) {
    for (int o = 0; o < co; ++o) om.row(o).array() += b.value()[o];
  }

  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = b.defined() ? b.node() : nullptr;
  const Var bias_or_x = b.defined() ? b : x;
  return make_result(
      {co, ho, wo}, std::move(out), {&x, &w, &bias_or_x},
      [xn, wn, bn, cols = std::move(cols), ci, h, wd, co, k, ho, wo, kk, hw, stride, pad](Node& self) {
        const MatR go = owned(self.grad.data(), co, hw);
        if (wn->requires_grad) {
          MapR(wn->ensure_grad().data(), co, kk) += MatR(go * cols.transpose());
        }
        if (bn && bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (int o = 0; o < co; ++o) g[o] += go.row(o).sum();
        }
        if (xn->requires_grad) {
          MatR dcols = owned(wn->value.data(), co, kk).transpose() * go;
          auto& g = xn->ensure_grad();
          for (int c = 0; c < ci; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const double* row = dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  double* dst = g.data() + (static_cast<std::size_t>(c) * h + iy) * wd;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < wd) dst[ix] += row[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

Var sigmoid_focal(const Var& logits, std::span<const double> targets, double alpha, double gamma) {
  if (targets.size() != logits.size()) throw std::invalid_argument("sigmoid_focal: target size mismatch");
  std::vector<double> t(targets.begin(), targets.end());
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = logits.value()[i];
    const double p = sigmoid_scalar(x);
    const double ce = softplus_scalar(x) - t[i] * x;
    const double pt = p * t[i] + (1.0 - p) * (1.0 - t[i]);
    const double at = alpha * t[i] + (1.0 - alpha) * (1.0 - t[i]);
    out[i] = at * std::pow(1.0 - pt, gamma) * ce;
  }
  Node* ln = logits.node();
  return make_result(logits.shape(), std::move(out), {&logits}, [ln, t = std::move(t), alpha, gamma](Node& self) {
    auto& g = ln->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = ln->value[i];
      const double p = sigmoid_scalar(x);
      const double ce = softplus_scalar(x) - t[i] * x;
      const double pt = p * t[i] + (1.0 - p) * (1.0 - t[i]);
      const double at = alpha * t[i] + (1.0 - alpha) * (1.0 - t[i]);
      const double q = 1.0 - pt;
      const double dpt = (2.0 * t[i] - 1.0) * p * (1.0 - p);
      const double dmod = q > 0.0 ? -gamma * std::pow(q, gamma - 1.0) * dpt : 0.0;
      g[i] += self.grad[i] * at * (dmod * ce + std::pow(q, gamma) * (p - t[i]));
    }
  });
}

Var bce_with_logits(const Var& logits, std::span<const double> targets) {
  if (targets.size() != logits.size()) throw std::invalid_argument("bce_with_logits: target size mismatch");
  std::vector<double> t(targets.begin(), targets.end());
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = softplus_scalar(logits.value()[i]) - t[i] * logits.value()[i];
  Node* ln = logits.node();
  return make_result(logits.shape(), std::move(out), {&logits}, [ln, t = std::move(t)](Node& self) {
    auto& g = ln->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (sigmoid_scalar(ln->value[i]) - t[i]);
  });
}

}  // namespace wssod::ad
