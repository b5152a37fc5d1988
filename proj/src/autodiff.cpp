#include "ibdr/autodiff.hpp"

#include "ibdr/errors.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace ibdr::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

Tape& tape_of(const Tensor& t) {
  if (!t.valid()) throw ContractError("operation on an empty tensor handle");
  return *t.tape();
}

Tape& common_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() != b.tape()) throw ContractError("operands belong to different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
  }
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

}  // namespace

// ---- Tensor / Tape --------------------------------------------------------

const Matrix& Tensor::value() const { return tape_of(*this).value(id_); }
Matrix Tensor::grad() const { return tape_of(*this).grad(id_); }
bool Tensor::requires_grad() const { return tape_of(*this).requires_grad(id_); }

double Tensor::item() const {
  if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(value()));
  return value()(0, 0);
}

Tensor Tape::leaf(Matrix value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, true, nullptr});
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractError("input recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs, false, needs ? std::move(backward) : nullptr});
  return Tensor(this, nodes_.size() - 1);
}

Matrix Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Tape::backward(const Tensor& root) {
  if (root.tape() != this) throw ContractError("backward root belongs to a different tape");
  if (!root.is_scalar()) {
    throw ContractError("backward requires a scalar root, got " + shape_str(root.value()));
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = scalar(1.0);
  for (std::size_t k = root.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (n.grad.size() == 0 || !n.backward) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = common_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.value()) + " · " +
                         shape_str(b.value()));
  }
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g * tp.value(ib).transpose());
    tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Tensor transpose(const Tensor& a) {
  const auto ia = a.id();
  return tape_of(a).record(a.value().transpose(), {a}, [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.transpose());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Tensor scale(const Tensor& a, double s) {
  const auto ia = a.id();
  return tape_of(a).record(s * a.value(), {a}, [ia, s](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, s * g);
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("hadamard", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  Tape& t = common_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + shape_str(row.value()) + " does not broadcast over " +
                         shape_str(a.value()));
  }
  const auto ia = a.id(), ir = row.id();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), {a, row}, [ia, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ir, g.colwise().sum());
  });
}

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw ContractError("add_n: no terms");
  Tape& t = tape_of(terms.front());
  Matrix out = terms.front().value();
  for (std::size_t k = 1; k < terms.size(); ++k) {
    require_same_shape("add_n", terms.front(), terms[k]);
    out += terms[k].value();
  }
  std::vector<std::size_t> ids;
  ids.reserve(terms.size());
  for (const auto& x : terms) ids.push_back(x.id());
  return t.record(std::move(out), terms, [ids = std::move(ids)](Tape& tp, const Matrix& g) {
    for (auto id : ids) tp.accumulate(id, g);
  });
}

Tensor sum(const Tensor& a) {
  const auto ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return tape_of(a).record(scalar(a.value().sum()), {a}, [ia, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---- elementwise ----------------------------------------------------------

Tensor relu(const Tensor& a) {
  const auto ia = a.id();
  return tape_of(a).record(a.value().cwiseMax(0.0), {a}, [ia](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    tp.accumulate(ia, (x.array() > 0.0).select(g, 0.0));
  });
}

Tensor tanh(const Tensor& a) {
  const auto ia = a.id();
  Matrix y = a.value().array().tanh().matrix();
  Tape& t = tape_of(a);
  const std::size_t self = t.size();
  return t.record(std::move(y), {a}, [ia, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    tp.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Tensor clamp_min(const Tensor& a, double floor) {
  const auto ia = a.id();
  return tape_of(a).record(a.value().cwiseMax(floor), {a}, [ia, floor](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    tp.accumulate(ia, (x.array() >= floor).select(g, 0.0));
  });
}

// ---- indexing -------------------------------------------------------------

Tensor slice_reshape(const Tensor& flat, Index offset, Index rows, Index cols) {
  if (flat.cols() != 1) throw DimensionError("slice_reshape: expects a column vector, got " + shape_str(flat.value()));
  if (offset < 0 || rows < 0 || cols < 0 || offset + rows * cols > flat.rows()) {
    throw IndexError("slice_reshape: block [" + std::to_string(offset) + ", " +
                     std::to_string(offset + rows * cols) + ") exceeds length " + std::to_string(flat.rows()));
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Matrix out = Eigen::Map<const RowMajor>(flat.value().data() + offset, rows, cols);
  const auto id = flat.id();
  const Index n = flat.rows();
  return tape_of(flat).record(std::move(out), {flat}, [id, n, offset, rows, cols](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(n, 1);
    Eigen::Map<RowMajor>(d.data() + offset, rows, cols) = g;
    tp.accumulate(id, d);
  });
}

Tensor row_without(const Tensor& m, Index row, Index drop) {
  const Index c = m.cols();
  if (row < 0 || row >= m.rows()) throw IndexError("row_without: row " + std::to_string(row) + " out of range");
  if (drop < 0 || drop >= c) throw IndexError("row_without: column " + std::to_string(drop) + " out of range");
  Matrix out(c - 1, 1);
  for (Index j = 0, k = 0; j < c; ++j) {
    if (j != drop) out(k++, 0) = m.value()(row, j);
  }
  const auto id = m.id();
  const Index r = m.rows();
  return tape_of(m).record(std::move(out), {m}, [id, r, c, row, drop](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(r, c);
    for (Index j = 0, k = 0; j < c; ++j) {
      if (j != drop) d(row, j) = g(k++, 0);
    }
    tp.accumulate(id, d);
  });
}

Tensor hcat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("hcat: no parts");
  Tape& t = tape_of(parts.front());
  const Index r = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("hcat: row counts disagree " + shape_str(parts.front().value()) + " vs " + shape_str(p.value()));
    total += p.cols();
  }
  Matrix out(r, total);
  std::vector<std::pair<std::size_t, Index>> spans;  // (id, column offset)
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.record(std::move(out), parts, [spans = std::move(spans)](Tape& tp, const Matrix& g) {
    for (const auto& [id, o] : spans) tp.accumulate(id, g.middleCols(o, tp.value(id).cols()));
  });
}

// ---- reductions -----------------------------------------------------------

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("squared_distance", a, b);
  const auto ia = a.id(), ib = b.id();
  const Matrix diff = a.value() - b.value();
  return t.record(scalar(diff.squaredNorm()), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    const Matrix d = 2.0 * g(0, 0) * (tp.value(ia) - tp.value(ib));
    tp.accumulate(ia, d);
    tp.accumulate(ib, -d);
  });
}

// ---- softmax / cross entropy ---------------------------------------------

namespace {

Matrix stable_softmax(const Matrix& logits) {
  Matrix p = logits;
  for (Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  if (logits.cols() < 2) throw DimensionError("softmax: need at least 2 classes, got " + shape_str(logits.value()));
  Tape& t = tape_of(logits);
  const std::size_t self = t.size();
  const auto il = logits.id();
  return t.record(stable_softmax(logits.value()), {logits}, [il, self](Tape& tp, const Matrix& g) {
    const Matrix& p = tp.value(self);
    // dL/dz = p ⊙ (g − rowsum(g ⊙ p))
    const Eigen::VectorXd inner = (g.array() * p.array()).rowwise().sum();
    Matrix d = g;
    d.colwise() -= inner;
    tp.accumulate(il, (d.array() * p.array()).matrix());
  });
}

SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Index b = logits.rows(), c = logits.cols();
  if (c < 2) throw DimensionError("softmax_cross_entropy: need at least 2 classes, got " + shape_str(logits.value()));
  if (static_cast<Index>(labels.size()) != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  if (b == 0) throw ContractError("softmax_cross_entropy: empty batch");
  for (Index i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  Tensor probs = softmax(logits);
  // Loss from log-sum-exp so extreme logits never take log of an underflowed 0.
  const Matrix& z = logits.value();
  double total = 0.0;
  for (Index i = 0; i < b; ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, labels[i]);
  }
  std::vector<int> y(labels.begin(), labels.end());
  const auto il = logits.id(), ip = probs.id();
  Tensor loss = tape_of(logits).record(
      scalar(total / static_cast<double>(b)), {logits, probs},
      [il, ip, y = std::move(y)](Tape& tp, const Matrix& g) {
        Matrix d = tp.value(ip);
        for (Index i = 0; i < d.rows(); ++i) d(i, y[i]) -= 1.0;
        tp.accumulate(il, (g(0, 0) / static_cast<double>(d.rows())) * d);
      });
  return {loss, probs};
}

// ---- divergence building blocks ------------------------------------------

Tensor unit_normalize_columns(const Tensor& m, double floor) {
  const Eigen::RowVectorXd norms = m.value().colwise().norm();
  for (Index j = 0; j < norms.size(); ++j) {
    if (!(norms[j] >= floor) || norms[j] == 0.0) {
      throw DegenerateInputError("unit_normalize_columns: column " + std::to_string(j) + " has norm " +
                                 std::to_string(norms[j]) + " below floor");
    }
  }
  Matrix y = m.value();
  for (Index j = 0; j < y.cols(); ++j) y.col(j) /= norms[j];
  Tape& t = tape_of(m);
  const std::size_t self = t.size();
  const auto im = m.id();
  return t.record(std::move(y), {m}, [im, self, norms](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    Matrix d(g.rows(), g.cols());
    for (Index j = 0; j < g.cols(); ++j) {
      d.col(j) = (g.col(j) - y.col(j) * y.col(j).dot(g.col(j))) / norms[j];
    }
    tp.accumulate(im, d);
  });
}

Tensor gram(const Tensor& m) {
  const auto im = m.id();
  return tape_of(m).record(m.value().transpose() * m.value(), {m}, [im](Tape& tp, const Matrix& g) {
    tp.accumulate(im, tp.value(im) * (g + g.transpose()));
  });
}

Tensor add_diagonal(const Tensor& m, double eps) {
  if (m.rows() != m.cols()) throw DimensionError("add_diagonal: non-square " + shape_str(m.value()));
  const auto im = m.id();
  Matrix out = m.value();
  out.diagonal().array() += eps;
  return tape_of(m).record(std::move(out), {m}, [im](Tape& tp, const Matrix& g) { tp.accumulate(im, g); });
}

Tensor determinant(const Tensor& g) {
  if (g.rows() != g.cols()) throw DimensionError("determinant: non-square " + shape_str(g.value()));
  if (g.rows() == 0) throw DimensionError("determinant: empty matrix");
  const Eigen::PartialPivLU<Matrix> lu(g.value());
  const double det = lu.determinant();
  const auto ig = g.id();
  return tape_of(g).record(scalar(det), {g}, [ig, lu, det](Tape& tp, const Matrix& go) {
    const Matrix& gm = tp.value(ig);
    Matrix cof;
    // rcond() estimates the reciprocal condition number; below the cutoff the
    // inverse is unreliable and the cofactor matrix is the finite limit.
    if (det != 0.0 && std::isfinite(det) && lu.rcond() > 1e-10) {
      cof = det * lu.inverse().transpose();
    } else {
      cof = cofactor_matrix(gm);
    }
    tp.accumulate(ig, go(0, 0) * cof);
  });
}

}  // namespace ibdr::ad
