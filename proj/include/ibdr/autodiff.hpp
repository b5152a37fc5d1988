#pragma once

// Tape-based reverse-mode differentiation over dense 64-bit matrices.
//
// A Tape owns every node; a Tensor is a (tape, index) handle. Nodes are
// appended in evaluation order, so reverse append order is a valid
// topological order for the backward sweep. Every value is stored as a 2-D
// Eigen matrix: vectors are n x 1 and scalars are 1 x 1.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace ibdr::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Gradient from the most recent backward(); zeros if the node was not reached.
  Matrix grad() const;
  bool requires_grad() const;

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  double item() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the node's output gradient and pushes contributions to inputs
  /// through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Tensor leaf(Matrix value, bool requires_grad = true);
  Tensor constant(Matrix value) { return leaf(std::move(value), false); }

  /// Appends an operation node. `backward` is dropped when no input needs a
  /// gradient, which makes the result a constant.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward);
  Tensor record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar root. Clears gradients from any previous sweep.
  void backward(const Tensor& root);

  /// grad[id] += delta. No-op for nodes that do not require gradients.
  void accumulate(std::size_t id, const Matrix& delta);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  Matrix grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until reached by backward
    bool requires_grad = false;
    bool is_leaf = true;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// ---- operations ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Elementwise product.
Tensor hadamard(const Tensor& a, const Tensor& b);
/// a[b x n] + row[1 x n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// Sum of same-shaped tensors.
Tensor add_n(std::span<const Tensor> terms);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

/// Reads a contiguous block of a flat vector as a row-major rows x cols matrix.
Tensor slice_reshape(const Tensor& flat, Index offset, Index rows, Index cols);

/// Row `row` of `m` with column `drop` removed, returned as a column vector.
Tensor row_without(const Tensor& m, Index row, Index drop);
/// Concatenates column vectors (or matrices with equal row counts) side by side.
Tensor hcat(std::span<const Tensor> parts);

/// ||a - b||^2 for equal-shaped a, b.
Tensor squared_distance(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& logits);

struct SoftmaxCrossEntropy {
  Tensor loss;   // scalar, batch mean of -log p[i, y_i]
  Tensor probs;  // b x C, differentiable
};
SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Scales each column to unit L2 norm. Throws DegenerateInputError when a
/// column norm falls below `floor`.
Tensor unit_normalize_columns(const Tensor& m, double floor = 1e-12);

/// mᵀm.
Tensor gram(const Tensor& m);
Tensor add_diagonal(const Tensor& m, double eps);

/// Determinant by LU with partial pivoting. The backward pass uses det·G⁻ᵀ
/// from the same factorization, or the cofactor matrix when G is singular
/// or nearly so.
Tensor determinant(const Tensor& g);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- dense helpers shared with the backward passes -----------------------

/// Cofactor matrix C with C(i,j) = (-1)^(i+j) det(minor(i,j)). Equals
/// det(G)·G⁻ᵀ for nonsingular G and stays finite when G is singular.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> cofactor_matrix(
    const Eigen::MatrixBase<Derived>& g) {
  using Scalar = typename Derived::Scalar;
  using Dense = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Index n = g.rows();
  Dense cof(n, n);
  if (n == 1) {
    cof(0, 0) = Scalar(1);
    return cof;
  }
  Dense minor(n - 1, n - 1);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      for (Index r = 0, mr = 0; r < n; ++r) {
        if (r == i) continue;
        for (Index c = 0, mc = 0; c < n; ++c) {
          if (c == j) continue;
          minor(mr, mc++) = g(r, c);
        }
        ++mr;
      }
      const Scalar sign = ((i + j) % 2 == 0) ? Scalar(1) : Scalar(-1);
      cof(i, j) = sign * minor.partialPivLu().determinant();
    }
  }
  return cof;
}

}  // namespace ibdr::ad
