#pragma once

// Tape-style reverse-mode automatic differentiation over dense row-major
// tensors of doubles. Every op records its inputs and a backward closure;
// backward() replays the recorded graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace feddva::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool grad_ready = false;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  // Adds `g` into grad, allocating (zeroed) on first use.
  void accumulate(std::span<const double> g);
  void accumulate_at(std::size_t i, double g);
  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  // Only meaningful on leaves; toggling freezes/unfreezes a parameter.
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad_ready; }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a non-leaf node. Inputs that do not require grad are not retained,
// and when none do, the result is a constant and `backward` is dropped.
Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);

// The op kinds enumerated for the dispatcher. Fused loss ops are exposed as
// dedicated functions below.
enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kRelu,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kSquare,
  kSum,
  kMean,
  kConcatLast,
  kAddRow,
};

std::string op_name(OpKind kind);
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs);

Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise; `b` may also be a single row ([n] or [1,n]) broadcast over a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat_last(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Columns [begin, end) of a 2-D tensor.
Tensor slice_last(const Tensor& a, std::size_t begin, std::size_t end);
// Row sums of a 2-D tensor, shape [rows].
Tensor sum_rows(const Tensor& a);
// Elementwise max; ties route the gradient to `a`.
Tensor maximum(const Tensor& a, const Tensor& b);

// Sum over features, mean over rows, of the Bernoulli negative log-likelihood
// of `targets` under sigmoid(logits). Targets are treated as constants.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
// Mean over rows of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Topologically ordered view of the nodes reachable from a root through
// grad-requiring edges.
class Graph {
 public:
  static Graph trace(const Tensor& root);
  const std::vector<Node*>& nodes() const { return nodes_; }
  // Every node's inputs appear before it.
  bool is_topological() const;

 private:
  std::vector<Node*> nodes_;
};

void backward(const Tensor& loss);

void sgd_step(std::span<Tensor> params, double lr);

}  // namespace feddva::ad
