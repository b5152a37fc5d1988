#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace ibdr {

/// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h for each coordinate.
template <typename Fn>
Eigen::VectorXd finite_difference_gradient(Fn&& f, const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double xj = x[j];
    probe[j] = xj + h;
    const double up = f(static_cast<const Eigen::VectorXd&>(probe));
    probe[j] = xj - h;
    const double down = f(static_cast<const Eigen::VectorXd&>(probe));
    probe[j] = xj;
    grad[j] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// max_j |a_j - b_j| / max(|a_j|, |b_j|, floor).
template <typename DerivedA, typename DerivedB>
double max_relative_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                          double floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    const double num = std::abs(a(j) - b(j));
    const double den = std::max({std::abs(a(j)), std::abs(b(j)), floor});
    worst = std::max(worst, num / den);
  }
  return worst;
}

}  // namespace ibdr
