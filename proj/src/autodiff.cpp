#include "feddva/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace feddva::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_string(a) + " vs " +
                              shape_string(b));
}

void require_2d(const std::string& op, const Tensor& t) {
  if (t.shape().size() != 2) {
    throw std::invalid_argument(op + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

// Row broadcast applies when b is a single row matching a's last dimension.
bool is_row_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != 2) return false;
  const std::size_t n = a[1];
  if (b.size() == 1) return b[0] == n;
  if (b.size() == 2) return b[0] == 1 && b[1] == n;
  return false;
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(Binary kind, const std::string& name, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool row = !same && is_row_broadcast(a.shape(), b.shape());
  if (!same && !row) shape_error(name, a.shape(), b.shape());

  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = av.size();
  const std::size_t width = row ? bv.size() : n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i];
    const double y = bv[row ? i % width : i];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  return make_result(name, a.shape(), std::move(out), {a, b}, [kind, row, width](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      if (kind == Binary::kMul) {
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * nb.value[row ? i % width : i];
        na.accumulate(ga);
      } else {
        na.accumulate(g);
      }
    }
    if (nb.requires_grad) {
      std::vector<double> gb(nb.value.size(), 0.0);
      const double sign = kind == Binary::kSub ? -1.0 : 1.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t j = row ? i % width : i;
        gb[j] += kind == Binary::kMul ? g[i] * na.value[i] : sign * g[i];
      }
      nb.accumulate(gb);
    }
  });
}

template <typename F, typename D>
Tensor unary(const std::string& name, const Tensor& a, F f, D dfdx) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [dfdx](Node& self) {
    Node& in = *self.inputs[0];
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = self.grad[i] * dfdx(in.value[i], self.value[i]);
    }
    in.accumulate(g);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      if (s == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[m,k] += G[m,n] * B[k,n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      if (s == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * grow[j];
    }
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void Node::ensure_grad() {
  if (!grad_ready) {
    grad.assign(value.size(), 0.0);
    grad_ready = true;
  }
}

void Node::accumulate(std::span<const double> g) {
  ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void Node::accumulate_at(std::size_t i, double g) {
  ensure_grad();
  grad[i] += g;
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_string(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->id = next_id();
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  Tensor t = constant(std::move(shape), std::vector<double>(n, 0.0));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

std::size_t Tensor::rows() const {
  return node_->shape.size() == 2 ? node_->shape[0] : 1;
}

std::size_t Tensor::cols() const { return node_->shape.back(); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor " + shape_string(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw std::logic_error("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->grad_ready = false;
}

Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  node->is_leaf = false;
  node->id = next_id();
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::string op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSquare: return "square";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcatLast: return "concat-last-axis";
    case OpKind::kAddRow: return "broadcast-add-row";
  }
  return "unknown";
}

Tensor forward_op(OpKind kind, std::span<const Tensor> in) {
  const bool binary_kind = kind == OpKind::kMatmul || kind == OpKind::kAdd ||
                           kind == OpKind::kSub || kind == OpKind::kMul ||
                           kind == OpKind::kConcatLast || kind == OpKind::kAddRow;
  const std::size_t arity = binary_kind ? 2 : 1;
  if (in.size() != arity) {
    throw std::invalid_argument(op_name(kind) + ": expected " + std::to_string(arity) +
                                " inputs, got " + std::to_string(in.size()));
  }
  switch (kind) {
    case OpKind::kMatmul: return matmul(in[0], in[1]);
    case OpKind::kAdd: return add(in[0], in[1]);
    case OpKind::kSub: return sub(in[0], in[1]);
    case OpKind::kMul: return mul(in[0], in[1]);
    case OpKind::kRelu: return relu(in[0]);
    case OpKind::kTanh: return tanh(in[0]);
    case OpKind::kSigmoid: return sigmoid(in[0]);
    case OpKind::kExp: return exp(in[0]);
    case OpKind::kLog: return log(in[0]);
    case OpKind::kSquare: return square(in[0]);
    case OpKind::kSum: return sum(in[0]);
    case OpKind::kMean: return mean(in[0]);
    case OpKind::kConcatLast: return concat_last(in[0], in[1]);
    case OpKind::kAddRow: return add_row(in[0], in[1]);
  }
  throw std::invalid_argument("forward_op: unknown op");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      na.ensure_grad();
      gemm_nt(self.grad.data(), nb.value.data(), na.grad.data(), m, n, k);
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      gemm_tn(na.value.data(), self.grad.data(), nb.grad.data(), m, k, n);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::kAdd, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::kSub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::kMul, "mul-elementwise", a, b); }

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (!is_row_broadcast(a.shape(), row.shape())) shape_error("broadcast-add-row", a.shape(), row.shape());
  return binary(Binary::kAdd, "broadcast-add-row", a, row);
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  const auto v = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(v[i]) + " at index " +
                              std::to_string(i) + " of " + shape_string(a.shape()));
    }
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result("sum", {1}, {s}, {a}, [](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    const double g = self.grad[0];
    for (auto& x : in.grad) x += g;
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result("mean", {1}, {s / n}, {a}, [n](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    const double g = self.grad[0] / n;
    for (auto& x : in.grad) x += g;
  });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0]) {
    shape_error("concat-last-axis", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0];
  const std::size_t na = a.shape()[1];
  const std::size_t nb = b.shape()[1];
  std::vector<double> out(m * (na + nb));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.begin() + i * na, na, out.begin() + i * (na + nb));
    std::copy_n(bv.begin() + i * nb, nb, out.begin() + i * (na + nb) + na);
  }
  return make_result("concat-last-axis", {m, na + nb}, std::move(out), {a, b},
                     [m, na, nb](Node& self) {
                       Node& ia = *self.inputs[0];
                       Node& ib = *self.inputs[1];
                       const std::size_t w = na + nb;
                       if (ia.requires_grad) {
                         ia.ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < na; ++j) ia.grad[i * na + j] += self.grad[i * w + j];
                       }
                       if (ib.requires_grad) {
                         ib.ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < nb; ++j)
                             ib.grad[i * nb + j] += self.grad[i * w + na + j];
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add-scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor slice_last(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d("slice-last-axis", a);
  const std::size_t m = a.shape()[0];
  const std::size_t n = a.shape()[1];
  if (begin >= end || end > n) {
    throw std::invalid_argument("slice-last-axis: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") out of " + shape_string(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.begin() + i * n + begin, w, out.begin() + i * w);
  return make_result("slice-last-axis", {m, w}, std::move(out), {a}, [m, n, w, begin](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) in.grad[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor sum_rows(const Tensor& a) {
  require_2d("sum-rows", a);
  const std::size_t m = a.shape()[0];
  const std::size_t n = a.shape()[1];
  std::vector<double> out(m, 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += av[i * n + j];
  return make_result("sum-rows", {m}, std::move(out), {a}, [m, n](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) in.grad[i * n + j] += self.grad[i];
  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("maximum", a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  return make_result("maximum", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool first = na.value[i] >= nb.value[i];
      Node& target = first ? na : nb;
      if (target.requires_grad) target.accumulate_at(i, self.grad[i]);
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (logits.size() != targets.size()) {
    shape_error("bce-with-logits", logits.shape(), {targets.size()});
  }
  const double batch = static_cast<double>(logits.rows());
  const auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double l = lv[i];
    total += std::max(l, 0.0) - l * targets[i] + std::log1p(std::exp(-std::abs(l)));
  }
  std::vector<double> t(targets.begin(), targets.end());
  return make_result("bce-with-logits", {1}, {total / batch}, {logits},
                     [t = std::move(t), batch](Node& self) {
                       Node& in = *self.inputs[0];
                       in.ensure_grad();
                       const double g = self.grad[0] / batch;
                       for (std::size_t i = 0; i < t.size(); ++i) {
                         in.grad[i] += g * (stable_sigmoid(in.value[i]) - t[i]);
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_2d("softmax-cross-entropy", logits);
  const std::size_t m = logits.shape()[0];
  const std::size_t c = logits.shape()[1];
  if (labels.size() != m) shape_error("softmax-cross-entropy", logits.shape(), {labels.size()});
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range("softmax-cross-entropy: label " + std::to_string(labels[i]) +
                              " at row " + std::to_string(i) + " outside [0," + std::to_string(c) +
                              ")");
    }
  }
  const auto lv = logits.data();
  std::vector<double> probs(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    total += lse - row[labels[i]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result("softmax-cross-entropy", {1}, {total / static_cast<double>(m)}, {logits},
                     [probs = std::move(probs), lab = std::move(lab), m, c](Node& self) {
                       Node& in = *self.inputs[0];
                       in.ensure_grad();
                       const double g = self.grad[0] / static_cast<double>(m);
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double target = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
                           in.grad[i * c + j] += g * (probs[i * c + j] - target);
                         }
                       }
                     });
}

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::unordered_set<Node*> done;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !done.count(child)) stack.emplace_back(child, 0);
      continue;
    }
    if (done.insert(node).second) g.nodes_.push_back(node);
    stack.pop_back();
  }
  return g;
}

bool Graph::is_topological() const {
  std::unordered_map<const Node*, std::size_t> pos;
  for (std::size_t i = 0; i < nodes_.size(); ++i) pos[nodes_[i]] = i;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& in : nodes_[i]->inputs) {
      if (!in->requires_grad) continue;
      auto it = pos.find(in.get());
      if (it == pos.end() || it->second >= i) return false;
    }
  }
  return true;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  const Graph graph = Graph::trace(loss);
  if (graph.nodes().empty()) return;
  for (Node* n : graph.nodes()) {
    if (!n->is_leaf) {
      n->grad.assign(n->value.size(), 0.0);
      n->grad_ready = true;
    } else {
      // Leaves on an unselected max() branch still get a (zero) gradient.
      n->ensure_grad();
    }
  }
  loss.node()->accumulate_at(0, 1.0);
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

void sgd_step(std::span<Tensor> params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) {
      throw std::logic_error("sgd_step: parameter " + shape_string(p.shape()) +
                             " has no gradient");
    }
  }
  for (auto& p : params) {
    auto v = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    p.zero_grad();
  }
}

}  // namespace feddva::ad
