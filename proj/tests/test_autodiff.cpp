#include "ibdr/autodiff.hpp"
#include "ibdr/errors.hpp"
#include "ibdr/finite_difference.hpp"
#include "ibdr/rng.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace ibdr;
using ad::Matrix;
using ad::Tape;
using ad::Tensor;

namespace {

Matrix random_matrix(CounterRng& rng, Eigen::Index r, Eigen::Index c, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = lo + (hi - lo) * rng.uniform();
  return m;
}

Eigen::VectorXd flat(const Matrix& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); }
Matrix unflat(const Eigen::VectorXd& v, Eigen::Index r, Eigen::Index c) { return Eigen::Map<const Matrix>(v.data(), r, c); }

/// Builds scalar = fn(leaf) on a fresh tape and compares the tape gradient to
/// central differences. Returns the max relative error.
double grad_error(const Matrix& x0, const std::function<Tensor(Tape&, const Tensor&)>& fn) {
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor out = fn(tape, x);
  tape.backward(out);
  const Eigen::VectorXd analytic = flat(x.grad());
  auto f = [&](const Eigen::VectorXd& v) {
    Tape t;
    return fn(t, t.leaf(unflat(v, x0.rows(), x0.cols()), false)).item();
  };
  const Eigen::VectorXd numeric = finite_difference_gradient(f, flat(x0), 1e-5);
  return max_relative_error(analytic, numeric);
}

// Contracts a matrix-valued op to a scalar with fixed random weights so every
// output entry contributes to the gradient.
Tensor weighted_sum(Tape& t, const Tensor& m, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  Tensor w = t.constant(random_matrix(rng, m.rows(), m.cols()));
  return ad::sum(ad::hadamard(w, m));
}

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
  Tape t;
  Matrix m(2, 2);
  m << 1.5, -2, 3, 4;
  Tensor out = ad::matmul(t.constant(Matrix::Identity(2, 2)), t.constant(m));
  EXPECT_EQ(out.value(), m);
}

TEST(Matmul, SmallProduct) {
  Tape t;
  Matrix a(2, 2), b(2, 1), want(2, 1);
  a << 1, 2, 3, 4;
  b << 1, 1;
  want << 3, 7;
  EXPECT_EQ(ad::matmul(t.constant(a), t.constant(b)).value(), want);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ad::matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  CounterRng rng(1, 1);
  const Matrix a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 3);
  double err_a = grad_error(a, [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::matmul(x, t.constant(b)), 5); });
  double err_b = grad_error(b, [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::matmul(t.constant(a), x), 6); });
  EXPECT_LE(err_a, 1e-8);
  EXPECT_LE(err_b, 1e-8);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  Tape t;
  const int y[] = {2};
  auto r = ad::softmax_cross_entropy(t.constant(Matrix::Zero(1, 3)), y);
  EXPECT_NEAR(r.loss.item(), std::log(3.0), 1e-12);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.probs.value()(0, j), 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxCrossEntropy, ExtremeLogitsStayFinite) {
  Tape t;
  Matrix z(1, 2);
  z << 1000, 0;
  const int y[] = {0};
  auto r = ad::softmax_cross_entropy(t.constant(z), y);
  EXPECT_TRUE(std::isfinite(r.loss.item()));
  EXPECT_NEAR(r.loss.item(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Tape t;
  const int y[] = {3};
  EXPECT_THROW(ad::softmax_cross_entropy(t.constant(Matrix::Zero(1, 3)), y), IndexError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(2, 1);
  const Matrix z = random_matrix(rng, 4, 5);
  const int y[] = {0, 4, 2, 2};
  EXPECT_LE(grad_error(z, [&](Tape&, const Tensor& x) { return ad::softmax_cross_entropy(x, y).loss; }), 1e-6);
  // Probabilities are differentiable too.
  EXPECT_LE(grad_error(z, [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::softmax(x), 3); }), 1e-6);
}

TEST(SoftmaxCrossEntropy, RowsSumToOneForLargeLogits) {
  CounterRng rng(3, 1);
  Tape t;
  const Matrix z = random_matrix(rng, 50, 6, -1e3, 1e3);
  const Matrix p = ad::softmax(t.constant(z)).value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
}

TEST(UnitNormalize, ThreeFourFive) {
  Tape t;
  Matrix m(2, 1);
  m << 3, 4;
  const Matrix y = ad::unit_normalize_columns(t.constant(m)).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(y(1, 0), 0.8);
}

TEST(UnitNormalize, UnitColumnUnchanged) {
  Tape t;
  Matrix m(3, 1);
  m << 0, 1, 0;
  EXPECT_EQ(ad::unit_normalize_columns(t.constant(m)).value(), m);
}

TEST(UnitNormalize, ZeroColumnIsDegenerate) {
  Tape t;
  EXPECT_THROW(ad::unit_normalize_columns(t.constant(Matrix::Zero(3, 2))), DegenerateInputError);
}

TEST(UnitNormalize, GradientAndNorms) {
  CounterRng rng(4, 1);
  const Matrix m = random_matrix(rng, 4, 3);
  Tape t;
  const Matrix y = ad::unit_normalize_columns(t.constant(m)).value();
  for (Eigen::Index j = 0; j < y.cols(); ++j) EXPECT_NEAR(y.col(j).norm(), 1.0, 1e-12);
  EXPECT_LE(grad_error(m, [](Tape& tp, const Tensor& x) { return weighted_sum(tp, ad::unit_normalize_columns(x), 7); }),
            1e-6);
}

TEST(Gram, OrthonormalColumnsGiveIdentity) {
  Tape t;
  Matrix m = Matrix::Zero(3, 2);
  m(0, 0) = 1;
  m(1, 1) = 1;
  EXPECT_EQ(ad::gram(t.constant(m)).value(), Matrix::Identity(2, 2));
}

TEST(Gram, DuplicatedColumnIsSingular) {
  Tape t;
  Matrix m(2, 2);
  m << 0.6, 0.6, 0.8, 0.8;
  Tensor g = ad::gram(t.constant(m));
  EXPECT_NEAR(g.value()(0, 1), g.value()(0, 0), 1e-15);
  EXPECT_NEAR(ad::determinant(g).item(), 0.0, 1e-12);
}

TEST(Gram, MatchesDoubleLoopAndIsSymmetricPsd) {
  CounterRng rng(5, 1);
  const Matrix m = random_matrix(rng, 5, 3);
  Tape t;
  const Matrix g = ad::gram(t.constant(m)).value();
  EXPECT_LE((g - oracle::loop_gram(m)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((g - g.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::SelfAdjointEigenSolver<Matrix> es(g);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
  for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(g(j, j), m.col(j).squaredNorm(), 1e-12);
  EXPECT_LE(grad_error(m, [](Tape& tp, const Tensor& x) { return weighted_sum(tp, ad::gram(x), 8); }), 1e-6);
}

TEST(Determinant, Identity) {
  for (int k = 1; k <= 6; ++k) {
    Tape t;
    EXPECT_DOUBLE_EQ(ad::determinant(t.constant(Matrix::Identity(k, k))).item(), 1.0);
  }
}

TEST(Determinant, TwoByTwoHalf) {
  Tape t;
  Matrix g(2, 2);
  const double r = 1.0 / std::sqrt(2.0);
  g << 1, r, r, 1;
  EXPECT_NEAR(ad::determinant(t.constant(g)).item(), 0.5, 1e-15);
}

TEST(Determinant, NonSquareRejected) {
  Tape t;
  EXPECT_THROW(ad::determinant(t.constant(Matrix::Zero(2, 3))), DimensionError);
}

TEST(Determinant, MatchesPermutationExpansionAndFiniteDifferences) {
  CounterRng rng(6, 1);
  for (int k = 1; k <= 4; ++k) {
    const Matrix g = random_matrix(rng, k, k);
    Tape t;
    EXPECT_NEAR(ad::determinant(t.constant(g)).item(), oracle::permutation_determinant(g), 1e-10);
    EXPECT_LE(grad_error(g, [](Tape&, const Tensor& x) { return ad::determinant(x); }), 1e-6) << "K=" << k;
  }
}

TEST(Determinant, SingularGradientIsFiniteCofactor) {
  Matrix g(3, 3);
  g << 1, 2, 3, 2, 4, 6, 1, 0, 1;  // rank 2
  Tape t;
  Tensor x = t.leaf(g);
  Tensor d = ad::determinant(x);
  t.backward(d);
  EXPECT_NEAR(d.item(), 0.0, 1e-12);
  EXPECT_TRUE(x.grad().allFinite());
  EXPECT_LE((x.grad() - ad::cofactor_matrix(g)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(x.grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Determinant, CofactorEqualsDetTimesInverseTranspose) {
  CounterRng rng(7, 1);
  const Matrix g = random_matrix(rng, 4, 4);
  const Matrix want = g.determinant() * g.inverse().transpose();
  EXPECT_LE((ad::cofactor_matrix(g) - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  Tensor x = t.leaf(Matrix::Constant(5, 1, 0.3));
  t.backward(ad::sum(x));
  EXPECT_EQ(x.grad(), Matrix::Ones(5, 1));
}

TEST(Backward, UnreachedLeafHasZeroGrad) {
  Tape t;
  Tensor x = t.leaf(Matrix::Constant(2, 2, 1.0));
  Tensor unused = t.leaf(Matrix::Constant(3, 1, 1.0));
  t.backward(ad::sum(x));
  EXPECT_EQ(unused.grad(), Matrix::Zero(3, 1));
}

TEST(Backward, NonScalarRootRejected) {
  Tape t;
  Tensor x = t.leaf(Matrix::Ones(2, 1));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // f = sum(h ⊙ 1) + sum(h) with h = x·x reused, versus the expanded graph
  // computing x·x twice.
  CounterRng rng(8, 1);
  const Matrix x0 = random_matrix(rng, 3, 3);
  Tape shared;
  Tensor xs = shared.leaf(x0);
  Tensor h = ad::matmul(xs, xs);
  shared.backward(ad::add(ad::sum(h), ad::sum(ad::transpose(h))));
  Tape expanded;
  Tensor xe = expanded.leaf(x0);
  Tensor h1 = ad::matmul(xe, xe);
  Tensor h2 = ad::matmul(xe, xe);
  expanded.backward(ad::add(ad::sum(h1), ad::sum(ad::transpose(h2))));
  EXPECT_LE((xs.grad() - xe.grad()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(FiniteDifference, Quadratic) {
  Eigen::VectorXd x(1);
  x << 3.0;
  const auto g = finite_difference_gradient([](const Eigen::VectorXd& v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDifference, ConstantIsZero) {
  const auto g = finite_difference_gradient([](const Eigen::VectorXd&) { return 4.2; }, Eigen::VectorXd::Ones(4), 1e-5);
  EXPECT_EQ(g, Eigen::VectorXd::Zero(4));
}

TEST(FiniteDifference, DeterminantOfGramCrossCheck) {
  CounterRng rng(9, 1);
  const Matrix m = random_matrix(rng, 5, 3);
  EXPECT_LE(grad_error(m, [](Tape&, const Tensor& x) { return ad::determinant(ad::gram(x)); }), 1e-6);
}

// Property: every differentiable op, random inputs in [−2, 2], ≤ 1e-4.
TEST(Property, AllOpsAgreeWithFiniteDifferences) {
  CounterRng rng(10, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 4, 2);
    const Matrix sq = random_matrix(rng, 3, 3);
    const Matrix row = random_matrix(rng, 1, 4);
    const int y[] = {0, 3, 1};
    std::vector<std::function<Tensor(Tape&, const Tensor&)>> ops = {
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::matmul(x, t.constant(b)), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::add_row(x, t.constant(row)), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::tanh(x), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::relu(x), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::scale(x, -1.7), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::hadamard(x, x), trial); },
        [&](Tape&, const Tensor& x) { return ad::softmax_cross_entropy(x, y).loss; },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::softmax(x), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::unit_normalize_columns(x), trial); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::gram(x), trial); },
        [&](Tape& t, const Tensor& x) { return ad::squared_distance(x, t.constant(Matrix::Zero(3, 4))); },
        [&](Tape& t, const Tensor& x) { return weighted_sum(t, ad::row_without(x, 1, 2), trial); },
    };
    for (std::size_t k = 0; k < ops.size(); ++k) EXPECT_LE(grad_error(a, ops[k]), 1e-4) << "op " << k;
    EXPECT_LE(grad_error(sq, [](Tape&, const Tensor& x) { return ad::determinant(x); }), 1e-4);
  }
}

TEST(Property, HadamardBoundOnGramDeterminant) {
  CounterRng rng(11, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_matrix(rng, 6, 3);
    Tape t;
    const double det = ad::determinant(ad::gram(t.constant(m))).item();
    double bound = 1.0;
    for (Eigen::Index j = 0; j < 3; ++j) bound *= m.col(j).squaredNorm();
    EXPECT_GE(det, -1e-12);
    EXPECT_LE(det, bound * (1 + 1e-12));
  }
}
