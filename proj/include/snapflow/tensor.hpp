#pragma once

// Dense 2-D tensors with define-by-run reverse-mode differentiation.
//
// Every Tensor is a handle onto a node holding a row-major value matrix.
// Operations on tensors that require gradients record themselves on an
// implicit tape (nodes are stamped with a monotone sequence number); calling
// backward() on a scalar replays the adjoint rules in reverse stamp order and
// then releases the recorded graph so the next step starts fresh.

#include "snapflow/types.hpp"

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace snapflow {

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, Index r1, Index c1, Index r2, Index c2);
};

struct Node {
  Matrix value;
  Matrix grad;  // empty until an adjoint reaches this node
  bool requires_grad = false;
  std::uint64_t stamp = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> adjoint;  // pushes this->grad into parents

  Matrix& grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor();

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  const Matrix& value() const { return node_->value; }
  // Direct write access for optimizers and checkpoint loading. Never call on
  // a tensor that is part of a recorded graph.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad();

  double item() const;

  // Same value, no gradient history.
  Tensor detach() const { return constant(node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

// The recorded operations reachable from a root, in forward execution order.
class Tape {
 public:
  explicit Tape(const Tensor& root);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node*>& nodes() const { return nodes_; }
  // Replays adjoints in reverse order, then unlinks interior nodes.
  void replay();

 private:
  std::vector<Node*> nodes_;
  std::vector<std::shared_ptr<Node>> keep_alive_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& loss);

// --- elementwise and linear algebra -------------------------------------

// Elementwise ops accept equal shapes, or one operand with a single row that
// is broadcast over the other's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Multiplies row i of `a` by column entry w(i); w is B x 1 and constant.
Tensor scale_rows(const Tensor& a, const Vector& w);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor square(const Tensor& a);
// Gradient passes only where lo < a < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

// --- reductions ----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sum(const Tensor& a);  // B x n -> B x 1

// --- structure -----------------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor row_slice(const Tensor& a, Index begin, Index count);
Tensor col_slice(const Tensor& a, Index begin, Index count);
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);

// Pairwise squared Euclidean distances, (n1 x d, n2 x d) -> n1 x n2.
Tensor sq_dist(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

}  // namespace snapflow
