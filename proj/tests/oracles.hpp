#pragma once

// Test-only reference computations. None of these touch the tape, so they
// check the library through an independent route.

#include "ibdr/models.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace ibdr::oracle {

/// Leibniz formula: Σ_σ sgn(σ) Π_i g(i, σ(i)).
inline double permutation_determinant(const Eigen::MatrixXd& g) {
  const int n = static_cast<int>(g.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double total = 0.0;
  do {
    int inversions = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (perm[i] > perm[j]) ++inversions;
    double prod = (inversions % 2 == 0) ? 1.0 : -1.0;
    for (int i = 0; i < n; ++i) prod *= g(i, perm[i]);
    total += prod;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return total;
}

/// Explicit double-loop Gram matrix.
inline Eigen::MatrixXd loop_gram(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd g(m.cols(), m.cols());
  for (Eigen::Index a = 0; a < m.cols(); ++a)
    for (Eigen::Index b = 0; b < m.cols(); ++b) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < m.rows(); ++r) s += m(r, a) * m(r, b);
      g(a, b) = s;
    }
  return g;
}

/// Mean cross entropy and its gradient for a plain MLP, by hand-written
/// backpropagation over the documented flat layout.
struct CeAndGrad {
  double loss;
  Eigen::VectorXd grad;
};

inline CeAndGrad mlp_ce_backprop(const Eigen::VectorXd& params, const ArchSpec& arch, const Eigen::MatrixXd& x,
                                 std::span<const int> y) {
  const auto sizes = arch.layer_sizes();
  const std::size_t L = sizes.size() - 1;
  std::vector<Eigen::MatrixXd> w(L);
  std::vector<Eigen::VectorXd> b(L);
  std::vector<Eigen::Index> w_off(L), b_off(L);
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < L; ++l) {
    w[l].resize(sizes[l + 1], sizes[l]);
    w_off[l] = off;
    for (Eigen::Index r = 0; r < sizes[l + 1]; ++r)
      for (Eigen::Index c = 0; c < sizes[l]; ++c) w[l](r, c) = params[off++];
    b_off[l] = off;
    b[l] = params.segment(off, sizes[l + 1]);
    off += sizes[l + 1];
  }
  // forward
  std::vector<Eigen::MatrixXd> acts{x}, pre;
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z = acts.back() * w[l].transpose();
    for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) += b[l].transpose();
    pre.push_back(z);
    if (l + 1 < L) {
      Eigen::MatrixXd h = z;
      for (Eigen::Index i = 0; i < h.size(); ++i)
        h(i) = arch.activation == Activation::kRelu ? std::max(0.0, z(i)) : std::tanh(z(i));
      acts.push_back(h);
    }
  }
  const Eigen::MatrixXd& logits = pre.back();
  const double n = static_cast<double>(y.size());
  Eigen::MatrixXd delta(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - m);
    for (Eigen::Index j = 0; j < logits.cols(); ++j) delta(i, j) = std::exp(logits(i, j) - m) / z;
    loss += -(logits(i, y[i]) - m - std::log(z));
    delta(i, y[i]) -= 1.0;
  }
  delta /= n;
  loss /= n;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  for (std::size_t l = L; l-- > 0;) {
    const Eigen::MatrixXd gw = delta.transpose() * acts[l];
    for (Eigen::Index r = 0; r < gw.rows(); ++r)
      for (Eigen::Index c = 0; c < gw.cols(); ++c) grad[w_off[l] + r * gw.cols() + c] = gw(r, c);
    grad.segment(b_off[l], gw.rows()) = delta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::MatrixXd back = delta * w[l];
      const Eigen::MatrixXd& z = pre[l - 1];
      for (Eigen::Index i = 0; i < back.size(); ++i) {
        back(i) *= arch.activation == Activation::kRelu ? (z(i) > 0.0 ? 1.0 : 0.0) : 1.0 - std::pow(std::tanh(z(i)), 2);
      }
      delta = back;
    }
  }
  return {loss, grad};
}

}  // namespace ibdr::oracle
