#include "snapflow/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace snapflow {

namespace {

std::atomic<std::uint64_t> g_stamp{0};

std::string shape_message(const std::string& op, Index r1, Index c1, Index r2, Index c2) {
  std::ostringstream os;
  os << op << ": incompatible shapes [" << r1 << "x" << c1 << "] and [" << r2 << "x" << c2 << "]";
  return os.str();
}

std::shared_ptr<Node> leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->stamp = g_stamp.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Tensor record(Matrix value, const char* op, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> adjoint) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->stamp = g_stamp.fetch_add(1, std::memory_order_relaxed);
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const auto& p) { return p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->adjoint = std::move(adjoint);
  }
  return Tensor(std::move(n));
}

enum class Broadcast { None, Left, Right };

Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::None;
  if (a.cols() == b.cols()) {
    if (b.rows() == 1) return Broadcast::Right;
    if (a.rows() == 1) return Broadcast::Left;
  }
  throw ShapeError(op, a.rows(), a.cols(), b.rows(), b.cols());
}

// Adds `g` into a parent's grad, collapsing rows when the parent was broadcast.
void accumulate(Node& parent, const Matrix& g) {
  if (!parent.requires_grad) return;
  Matrix& buf = parent.grad_buffer();
  if (buf.rows() == g.rows()) {
    buf += g;
  } else {
    buf += g.colwise().sum();
  }
}

}  // namespace

ShapeError::ShapeError(const std::string& op, Index r1, Index c1, Index r2, Index c2)
    : std::invalid_argument(shape_message(op, r1, c1, r2, c2)) {}

Matrix& Node::grad_buffer() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  return grad;
}

Tensor::Tensor() : node_(leaf(Matrix(0, 0), false)) {}

Tensor Tensor::constant(Matrix value) { return Tensor(leaf(std::move(value), false)); }
Tensor Tensor::parameter(Matrix value) { return Tensor(leaf(std::move(value), true)); }
Tensor Tensor::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

void Tensor::zero_grad() {
  node_->grad.resize(0, 0);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item", rows(), cols(), 1, 1);
  return node_->value(0, 0);
}

Tape::Tape(const Tensor& root) {
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root.node()};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    nodes_.push_back(n.get());
    for (const auto& p : n->parents) stack.push_back(p);
    keep_alive_.push_back(std::move(n));
  }
  std::sort(nodes_.begin(), nodes_.end(),
            [](const Node* a, const Node* b) { return a->stamp < b->stamp; });
}

void Tape::replay() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = *it;
    if (n->adjoint && n->grad.size() > 0) n->adjoint(*n);
  }
  for (Node* n : nodes_) {
    if (!n->adjoint) continue;
    n->adjoint = nullptr;
    n->parents.clear();
    n->grad.resize(0, 0);
    n->requires_grad = false;
  }
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward (loss must be scalar)", loss.rows(), loss.cols(), 1, 1);
  if (!loss.requires_grad()) return;
  Tape tape(loss);
  loss.node()->grad_buffer().setConstant(1.0);
  tape.replay();
}

// --- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto mode = broadcast_mode("add", a, b);
  Matrix out;
  switch (mode) {
    case Broadcast::None: out = a.value() + b.value(); break;
    case Broadcast::Right: out = a.value().rowwise() + b.value().row(0); break;
    case Broadcast::Left: out = b.value().rowwise() + a.value().row(0); break;
  }
  auto pa = a.node(), pb = b.node();
  return record(std::move(out), "add", {pa, pb}, [pa, pb](Node& self) {
    accumulate(*pa, self.grad);
    accumulate(*pb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto mode = broadcast_mode("sub", a, b);
  Matrix out;
  switch (mode) {
    case Broadcast::None: out = a.value() - b.value(); break;
    case Broadcast::Right: out = a.value().rowwise() - b.value().row(0); break;
    case Broadcast::Left: out = (-b.value()).rowwise() + a.value().row(0); break;
  }
  auto pa = a.node(), pb = b.node();
  return record(std::move(out), "sub", {pa, pb}, [pa, pb](Node& self) {
    accumulate(*pa, self.grad);
    accumulate(*pb, -self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto mode = broadcast_mode("mul", a, b);
  Matrix out;
  switch (mode) {
    case Broadcast::None: out = a.value().cwiseProduct(b.value()); break;
    case Broadcast::Right: out = a.value().array().rowwise() * b.value().row(0).array(); break;
    case Broadcast::Left: out = b.value().array().rowwise() * a.value().row(0).array(); break;
  }
  auto pa = a.node(), pb = b.node();
  return record(std::move(out), "mul", {pa, pb}, [pa, pb](Node& self) {
    const Matrix& g = self.grad;
    auto expand = [&](const Matrix& m) -> Matrix {
      if (m.rows() == g.rows()) return m;
      return m.replicate(g.rows(), 1);
    };
    if (pa->requires_grad) accumulate(*pa, g.cwiseProduct(expand(pb->value)));
    if (pb->requires_grad) accumulate(*pb, g.cwiseProduct(expand(pa->value)));
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix out = a.value() * b.value();
  auto pa = a.node(), pb = b.node();
  return record(std::move(out), "matmul", {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
  });
}

Tensor scale(const Tensor& a, double s) {
  auto pa = a.node();
  return record(a.value() * s, "scale", {pa}, [pa, s](Node& self) { accumulate(*pa, self.grad * s); });
}

Tensor add_scalar(const Tensor& a, double s) {
  auto pa = a.node();
  Matrix out = a.value().array() + s;
  return record(std::move(out), "add_scalar", {pa}, [pa](Node& self) { accumulate(*pa, self.grad); });
}

Tensor scale_rows(const Tensor& a, const Vector& w) {
  if (w.size() != a.rows()) throw ShapeError("scale_rows", a.rows(), a.cols(), w.size(), 1);
  Matrix out = w.asDiagonal() * a.value();
  auto pa = a.node();
  return record(std::move(out), "scale_rows", {pa}, [pa, w](Node& self) {
    accumulate(*pa, w.asDiagonal() * self.grad);
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp();
  auto pa = a.node();
  return record(out, "exp", {pa}, [pa, out](Node& self) { accumulate(*pa, self.grad.cwiseProduct(out)); });
}

Tensor log(const Tensor& a) {
  Matrix out = a.value().array().log();
  auto pa = a.node();
  return record(std::move(out), "log", {pa}, [pa](Node& self) {
    accumulate(*pa, self.grad.cwiseQuotient(pa->value));
  });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh();
  auto pa = a.node();
  return record(out, "tanh", {pa}, [pa, out](Node& self) {
    Matrix d = 1.0 - out.array().square();
    accumulate(*pa, self.grad.cwiseProduct(d));
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Matrix out = a.value().unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
  auto pa = a.node();
  return record(std::move(out), "leaky_relu", {pa}, [pa, slope](Node& self) {
    Matrix d = pa->value.unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
    accumulate(*pa, self.grad.cwiseProduct(d));
  });
}

Tensor square(const Tensor& a) {
  Matrix out = a.value().array().square();
  auto pa = a.node();
  return record(std::move(out), "square", {pa}, [pa](Node& self) {
    accumulate(*pa, 2.0 * self.grad.cwiseProduct(pa->value));
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  auto pa = a.node();
  return record(std::move(out), "clamp", {pa}, [pa, lo, hi](Node& self) {
    Matrix mask = pa->value.unaryExpr([lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    accumulate(*pa, self.grad.cwiseProduct(mask));
  });
}

// --- reductions ----------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto pa = a.node();
  return record(Matrix::Constant(1, 1, a.value().sum()), "sum", {pa}, [pa](Node& self) {
    pa->grad_buffer().array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean (empty operand)", a.rows(), a.cols(), 1, 1);
  const double inv = 1.0 / static_cast<double>(a.size());
  auto pa = a.node();
  return record(Matrix::Constant(1, 1, a.value().sum() * inv), "mean", {pa}, [pa, inv](Node& self) {
    pa->grad_buffer().array() += self.grad(0, 0) * inv;
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  auto pa = a.node();
  return record(std::move(out), "row_sum", {pa}, [pa](Node& self) {
    pa->grad_buffer().colwise() += self.grad.col(0);
  });
}

// --- structure -----------------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  auto pa = a.node(), pb = b.node();
  const Index ca = a.cols(), cb = b.cols();
  return record(std::move(out), "concat_cols", {pa, pb}, [pa, pb, ca, cb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad.leftCols(ca);
    if (pb->requires_grad) pb->grad_buffer() += self.grad.rightCols(cb);
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  auto pa = a.node(), pb = b.node();
  const Index ra = a.rows(), rb = b.rows();
  return record(std::move(out), "concat_rows", {pa, pb}, [pa, pb, ra, rb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad.topRows(ra);
    if (pb->requires_grad) pb->grad_buffer() += self.grad.bottomRows(rb);
  });
}

Tensor row_slice(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw ShapeError("row_slice", a.rows(), a.cols(), begin, count);
  auto pa = a.node();
  return record(a.value().middleRows(begin, count), "row_slice", {pa}, [pa, begin, count](Node& self) {
    pa->grad_buffer().middleRows(begin, count) += self.grad;
  });
}

Tensor col_slice(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols())
    throw ShapeError("col_slice", a.rows(), a.cols(), begin, count);
  auto pa = a.node();
  return record(a.value().middleCols(begin, count), "col_slice", {pa}, [pa, begin, count](Node& self) {
    pa->grad_buffer().middleCols(begin, count) += self.grad;
  });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= a.rows())
      throw ShapeError("gather_rows (index out of range)", a.rows(), a.cols(), rows[r], 1);
    out.row(static_cast<Index>(r)) = a.value().row(rows[r]);
  }
  auto pa = a.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return record(std::move(out), "gather_rows", {pa}, [pa, idx = std::move(idx)](Node& self) {
    Matrix& g = pa->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += self.grad.row(static_cast<Index>(r));
  });
}

Tensor sq_dist(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("sq_dist", a.rows(), a.cols(), b.rows(), b.cols());
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  Matrix out = (-2.0 * x * y.transpose()).eval();
  out.colwise() += x.rowwise().squaredNorm();
  out.rowwise() += y.rowwise().squaredNorm().transpose();
  out = out.cwiseMax(0.0);
  auto pa = a.node(), pb = b.node();
  return record(std::move(out), "sq_dist", {pa, pb}, [pa, pb](Node& self) {
    const Matrix& g = self.grad;
    const Matrix& x = pa->value;
    const Matrix& y = pb->value;
    if (pa->requires_grad) {
      Matrix gx = 2.0 * (g.rowwise().sum().asDiagonal() * x - g * y);
      pa->grad_buffer() += gx;
    }
    if (pb->requires_grad) {
      Matrix gy = 2.0 * (g.colwise().sum().transpose().asDiagonal() * y - g.transpose() * x);
      pb->grad_buffer() += gy;
    }
  });
}

}  // namespace snapflow
