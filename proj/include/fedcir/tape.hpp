#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fedcir/common.hpp"

namespace fedcir {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using VectorXi = Eigen::VectorXi;

inline std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

// Reverse-mode tape over dense fp64 matrices. Columns are samples, so one
// node covers a whole mini-batch. Values are computed eagerly at node
// creation; backward() replays the recorded closures in reverse.
//
// The multiply counter tracks scalar multiplies/divides/transcendentals of
// both passes; it feeds the per-round cost metric.
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Var constant(Matrix value) { return push(std::move(value), false); }
  Var param(Matrix value) { return push(std::move(value), true); }

  const Matrix& value(Var v) const { return node(v).value; }
  const Matrix& grad(Var v) const {
    const Node& n = node(v);
    if (!n.needs_grad) throw StateError("tape: grad requested for a constant");
    return n.grad;
  }

  std::uint64_t mul_count() const { return muls_; }

  // ---- primitive operations ------------------------------------------

  Var matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.rows())
      throw DimensionError("matmul: " + shape_str(A) + " * " + shape_str(B));
    muls_ += static_cast<std::uint64_t>(A.rows()) * A.cols() * B.cols();
    Var out = push(A * B, needs(a) || needs(b));
    if (node(out).needs_grad)
      record(out, [this, a, b, out] {
        const Matrix& g = node(out).grad;
        if (needs(a)) {
          node(a).grad.noalias() += g * value(b).transpose();
          muls_ += static_cast<std::uint64_t>(g.rows()) * g.cols() * value(b).rows();
        }
        if (needs(b)) {
          node(b).grad.noalias() += value(a).transpose() * g;
          muls_ += static_cast<std::uint64_t>(value(a).cols()) * value(a).rows() * g.cols();
        }
      });
    return out;
  }

  Var add(Var a, Var b) {
    check_same_shape("add", a, b);
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    if (node(out).needs_grad)
      record(out, [this, a, b, out] {
        const Matrix& g = node(out).grad;
        if (needs(a)) node(a).grad += g;
        if (needs(b)) node(b).grad += g;
      });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same_shape("sub", a, b);
    Var out = push(value(a) - value(b), needs(a) || needs(b));
    if (node(out).needs_grad)
      record(out, [this, a, b, out] {
        const Matrix& g = node(out).grad;
        if (needs(a)) node(a).grad += g;
        if (needs(b)) node(b).grad -= g;
      });
    return out;
  }

  // Hadamard product
  Var cmul(Var a, Var b) {
    check_same_shape("cmul", a, b);
    muls_ += size(a);
    Var out = push(value(a).cwiseProduct(value(b)), needs(a) || needs(b));
    if (node(out).needs_grad)
      record(out, [this, a, b, out] {
        const Matrix& g = node(out).grad;
        if (needs(a)) {
          node(a).grad += g.cwiseProduct(value(b));
          muls_ += size(a);
        }
        if (needs(b)) {
          node(b).grad += g.cwiseProduct(value(a));
          muls_ += size(b);
        }
      });
    return out;
  }

  // broadcast a column vector over all columns of a
  Var add_col(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (B.cols() != 1 || B.rows() != A.rows())
      throw DimensionError("add_col: " + shape_str(A) + " + " + shape_str(B));
    Var out = push(A.colwise() + B.col(0), needs(a) || needs(b));
    if (node(out).needs_grad)
      record(out, [this, a, b, out] {
        const Matrix& g = node(out).grad;
        if (needs(a)) node(a).grad += g;
        if (needs(b)) node(b).grad += g.rowwise().sum();
      });
    return out;
  }

  // subgradient at 0 is 0
  Var relu(Var a) {
    Var out = push(value(a).cwiseMax(0.0), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        const Matrix& g = node(out).grad;
        node(a).grad += g.cwiseProduct(
            (value(a).array() > 0.0).cast<double>().matrix());
        muls_ += size(a);
      });
    return out;
  }

  Var exp(Var a) {
    muls_ += size(a);
    Var out = push(value(a).array().exp().matrix(), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        node(a).grad += node(out).grad.cwiseProduct(value(out));
        muls_ += size(a);
      });
    return out;
  }

  Var log(Var a) {
    if ((value(a).array() <= 0.0).any())
      throw NumericError("log: nonpositive argument");
    muls_ += size(a);
    Var out = push(value(a).array().log().matrix(), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        node(a).grad += node(out).grad.cwiseQuotient(value(a));
        muls_ += size(a);
      });
    return out;
  }

  Var square(Var a) {
    muls_ += size(a);
    Var out = push(value(a).array().square().matrix(), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        node(a).grad += 2.0 * node(out).grad.cwiseProduct(value(a));
        muls_ += 2 * size(a);
      });
    return out;
  }

  // gradient passes only strictly inside (lo, hi)
  Var clamp(Var a, double lo, double hi) {
    Var out = push(value(a).cwiseMax(lo).cwiseMin(hi), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out, lo, hi] {
        const auto inside =
            (value(a).array() > lo && value(a).array() < hi).cast<double>();
        node(a).grad += node(out).grad.cwiseProduct(inside.matrix());
        muls_ += size(a);
      });
    return out;
  }

  Var clamp_min(Var a, double lo) {
    Var out = push(value(a).cwiseMax(lo), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out, lo] {
        const auto inside = (value(a).array() > lo).cast<double>();
        node(a).grad += node(out).grad.cwiseProduct(inside.matrix());
        muls_ += size(a);
      });
    return out;
  }

  Var scale(Var a, double c) {
    muls_ += size(a);
    Var out = push(value(a) * c, needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out, c] {
        node(a).grad += c * node(out).grad;
        muls_ += size(a);
      });
    return out;
  }

  Var add_scalar(Var a, double c) {
    Var out = push((value(a).array() + c).matrix(), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] { node(a).grad += node(out).grad; });
    return out;
  }

  // column-wise softmax with max subtraction
  Var softmax_cols(Var a) {
    const Matrix& A = value(a);
    if (A.rows() == 0 || A.cols() == 0)
      throw DimensionError("softmax_cols: empty input " + shape_str(A));
    Matrix p(A.rows(), A.cols());
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      const Vector shifted = A.col(j).array() - A.col(j).maxCoeff();
      const Vector e = shifted.array().exp();
      p.col(j) = e / e.sum();
    }
    muls_ += 2 * size(a);
    Var out = push(std::move(p), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        const Matrix& g = node(out).grad;
        const Matrix& p = value(out);
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
          const double dot = p.col(j).dot(g.col(j));
          node(a).grad.col(j) +=
              p.col(j).cwiseProduct(g.col(j).array().matrix()) - dot * p.col(j);
        }
        muls_ += 3 * size(a);
      });
    return out;
  }

  // out(0, j) = a(rows[j], j)
  Var pick_cols(Var a, const VectorXi& rows) {
    const Matrix& A = value(a);
    if (rows.size() != A.cols())
      throw DimensionError("pick_cols: " + std::to_string(rows.size()) +
                           " indices for " + shape_str(A));
    Matrix out_val(1, A.cols());
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      const int r = rows[j];
      if (r < 0 || r >= A.rows())
        throw IndexError("pick_cols: row " + std::to_string(r) +
                         " out of range for " + shape_str(A));
      out_val(0, j) = A(r, j);
    }
    Var out = push(std::move(out_val), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out, rows] {
        const Matrix& g = node(out).grad;
        for (Eigen::Index j = 0; j < g.cols(); ++j)
          node(a).grad(rows[j], j) += g(0, j);
      });
    return out;
  }

  Var sum_all(Var a) {
    Matrix s(1, 1);
    s(0, 0) = value(a).sum();
    Var out = push(std::move(s), needs(a));
    if (node(out).needs_grad)
      record(out, [this, a, out] {
        node(a).grad.array() += node(out).grad(0, 0);
      });
    return out;
  }

  // ---- backward pass ---------------------------------------------------

  void backward(Var loss) {
    const Node& ln = node(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw DimensionError("backward: loss must be 1x1, got " +
                           shape_str(ln.value));
    if (!ln.needs_grad)
      throw StateError("backward: loss does not depend on any parameter");
    for (Node& n : nodes_)
      if (n.needs_grad) n.grad.setZero(n.value.rows(), n.value.cols());
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i)
      if (nodes_[i].backward) nodes_[i].backward();
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var push(Matrix value, bool needs_grad) {
    if (!value.allFinite())
      throw NumericError("tape: non-finite value produced at node " +
                         std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void record(Var out, std::function<void()> fn) {
    nodes_[out.id].backward = std::move(fn);
  }

  Node& node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw IndexError("tape: invalid var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw IndexError("tape: invalid var");
    return nodes_[v.id];
  }

  bool needs(Var v) const { return node(v).needs_grad; }
  std::uint64_t size(Var v) const {
    return static_cast<std::uint64_t>(value(v).size());
  }

  void check_same_shape(const char* op, Var a, Var b) const {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw DimensionError(std::string(op) + ": " + shape_str(A) + " vs " +
                           shape_str(B));
  }

  std::vector<Node> nodes_;
  std::uint64_t muls_ = 0;
};

using Var = Tape::Var;

// y = W x + b as a tape subgraph; works on whole batches (columns).
inline Var affine_graph(Tape& t, Var W, Var b, Var x) {
  return t.add_col(t.matmul(W, x), b);
}

}  // namespace fedcir
