#include "ibdr/errors.hpp"
#include "ibdr/finite_difference.hpp"
#include "ibdr/losses.hpp"
#include "ibdr/models.hpp"
#include "ibdr/rng.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace ibdr;

namespace {

ArchSpec mlp(Eigen::Index in, std::vector<Eigen::Index> hidden, Eigen::Index classes,
             Activation act = Activation::kRelu) {
  ArchSpec a;
  a.input_dim = in;
  a.hidden_dims = std::move(hidden);
  a.num_classes = classes;
  a.activation = act;
  return a;
}

ArchSpec lora(Eigen::Index in, std::vector<Eigen::Index> hidden, Eigen::Index classes, Eigen::Index rank) {
  ArchSpec a = mlp(in, std::move(hidden), classes);
  a.kind = ArchKind::kLora;
  a.rank = rank;
  return a;
}

Eigen::MatrixXd random_inputs(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols) {
  CounterRng rng(seed, 42);
  Eigen::MatrixXd x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = 4.0 * rng.uniform() - 2.0;
  return x;
}

bool bitwise_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

double ce_of(const Eigen::VectorXd& params, const ArchSpec& arch, const Eigen::MatrixXd& x, std::span<const int> y,
             const Eigen::VectorXd* frozen = nullptr) {
  ad::Tape t;
  return ce_loss(forward(t, t.leaf(params, false), arch, x, frozen), y).item();
}

}  // namespace

TEST(ParamCount, MlpWithHiddenLayer) { EXPECT_EQ(param_count(mlp(2, {4}, 3)), 27); }

TEST(ParamCount, LoraCountsOnlyAdapters) {
  EXPECT_EQ(param_count(lora(4, {}, 4, 1)), 8);
  EXPECT_EQ(backbone_param_count(lora(4, {}, 4, 1)), 20);
}

TEST(ParamCount, MlpWithoutHiddenLayers) { EXPECT_EQ(param_count(mlp(5, {}, 3)), 18); }

TEST(ParamCount, MatchesInitializedLength) {
  for (const auto& arch : {mlp(3, {5, 4}, 3), mlp(2, {}, 2), lora(6, {5}, 3, 2)}) {
    std::optional<Eigen::VectorXd> backbone;
    if (arch.kind == ArchKind::kLora) backbone = init_dense(arch, 3, 0.5);
    const auto ps = init_particles(arch, 3, 11, 0.1, 0.1, backbone);
    for (const auto& mu : ps.means) EXPECT_EQ(mu.size(), param_count(arch));
  }
}

TEST(ArchSpecValidate, RejectsBadRecords) {
  EXPECT_THROW(mlp(0, {}, 3).validate(), ContractError);
  EXPECT_THROW(mlp(2, {}, 1).validate(), ContractError);
  EXPECT_THROW(mlp(2, {0}, 3).validate(), ContractError);
  EXPECT_THROW(lora(4, {}, 4, 0).validate(), ContractError);
  EXPECT_THROW(lora(4, {}, 3, 4).validate(), ContractError);
  EXPECT_NO_THROW(lora(4, {}, 3, 3).validate());
}

TEST(ArchSpecParse, KnownAndUnknownNames) {
  EXPECT_EQ(parse_arch_kind("lora"), ArchKind::kLora);
  EXPECT_EQ(parse_activation("tanh"), Activation::kTanh);
  EXPECT_THROW(parse_arch_kind("cnn"), ConfigError);
  EXPECT_THROW(parse_activation("gelu"), ConfigError);
}

TEST(InitParticles, SameSeedIsBitwiseIdentical) {
  const auto arch = mlp(3, {6}, 4);
  const auto a = init_particles(arch, 4, 123, 0.1);
  const auto b = init_particles(arch, 4, 123, 0.1);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a.means[i], b.means[i]));
}

TEST(InitParticles, ParticlesDifferAndSeedsDiffer) {
  const auto arch = mlp(3, {6}, 4);
  const auto a = init_particles(arch, 2, 1, 0.1);
  const auto b = init_particles(arch, 2, 2, 0.1);
  EXPECT_FALSE(bitwise_equal(a.means[0], a.means[1]));
  EXPECT_FALSE(bitwise_equal(a.means[0], b.means[0]));
}

TEST(InitParticles, ZeroScaleGivesZeroMeans) {
  const auto ps = init_particles(mlp(3, {6}, 4), 3, 5, 0.0);
  for (const auto& mu : ps.means) EXPECT_TRUE(mu.isZero(0.0));
}

TEST(InitParticles, EmpiricalScaleMatches) {
  const auto ps = init_particles(mlp(20, {50}, 10), 2, 9, 0.3);
  const auto& mu = ps.means[0];
  const double var = mu.squaredNorm() / static_cast<double>(mu.size());
  EXPECT_NEAR(std::sqrt(var), 0.3, 0.02);
  EXPECT_NEAR(mu.mean(), 0.0, 5.0 * 0.3 / std::sqrt(static_cast<double>(mu.size())));
}

TEST(InitParticles, LoraStartsAtBackbone) {
  const auto arch = lora(5, {6}, 3, 2);
  const Eigen::VectorXd backbone = init_dense(arch, 4, 0.7);
  const auto ps = init_particles(arch, 2, 8, 0.1, 0.1, backbone);
  const Eigen::MatrixXd x = random_inputs(1, 7, 5);
  const Eigen::MatrixXd base = predict_logits(backbone, mlp(5, {6}, 3), x);
  for (const auto& mu : ps.means) {
    for (const auto& layer : unflatten_adapters(mu, arch)) {
      EXPECT_TRUE(layer.b.isZero(0.0));
      EXPECT_FALSE(layer.a.isZero(0.0));
    }
    EXPECT_EQ(predict_logits(mu, arch, x, &backbone), base);
    ad::Tape t;
    EXPECT_EQ(forward(t, t.leaf(mu), arch, x, &backbone).value(), base);
  }
}

TEST(InitParticles, Errors) {
  EXPECT_THROW(init_particles(mlp(2, {}, 2), 0, 1, 0.1), ContractError);
  const auto arch = lora(4, {}, 3, 1);
  EXPECT_THROW(init_particles(arch, 1, 1, 0.1), ContractError);
  EXPECT_THROW(init_particles(arch, 1, 1, 0.1, 0.1, Eigen::VectorXd::Zero(3)), ParameterShapeError);
}

TEST(Forward, ZeroParametersGiveZeroLogits) {
  const auto arch = mlp(4, {5, 3}, 6);
  const Eigen::MatrixXd x = random_inputs(2, 9, 4);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(param_count(arch));
  EXPECT_TRUE(predict_logits(zero, arch, x).isZero(0.0));
  ad::Tape t;
  const auto logits = forward(t, t.leaf(zero), arch, x);
  EXPECT_EQ(logits.rows(), 9);
  EXPECT_EQ(logits.cols(), 6);
  EXPECT_TRUE(logits.value().isZero(0.0));
}

TEST(Forward, HandComputedSingleLayer) {
  // logits = x·Wᵀ + b with W = [[1,2],[3,4],[5,6]], b = (0.5,-0.5,0).
  const auto arch = mlp(2, {}, 3);
  Eigen::VectorXd p(9);
  p << 1, 2, 3, 4, 5, 6, 0.5, -0.5, 0;
  Eigen::MatrixXd x(1, 2);
  x << 1, -1;
  Eigen::MatrixXd expected(1, 3);
  expected << -0.5, -1.5, -1.0;
  EXPECT_TRUE(predict_logits(p, arch, x).isApprox(expected, 1e-15));
}

TEST(Forward, TapeAndPlainPathsAgree) {
  for (auto act : {Activation::kRelu, Activation::kTanh}) {
    const auto arch = mlp(3, {7, 4}, 5, act);
    const auto ps = init_particles(arch, 1, 21, 0.5);
    const Eigen::MatrixXd x = random_inputs(3, 6, 3);
    ad::Tape t;
    const auto logits = forward(t, t.leaf(ps.means[0]), arch, x);
    EXPECT_LE((logits.value() - predict_logits(ps.means[0], arch, x)).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Forward, GradientMatchesFiniteDifferences) {
  for (auto act : {Activation::kRelu, Activation::kTanh}) {
    const auto arch = mlp(3, {5}, 4, act);
    const Eigen::VectorXd p = init_particles(arch, 1, 30, 0.8).means[0];
    const Eigen::MatrixXd x = random_inputs(4, 6, 3);
    const std::vector<int> y{0, 1, 2, 3, 1, 2};
    ad::Tape t;
    auto leaf = t.leaf(p);
    auto loss = ce_loss(forward(t, leaf, arch, x), y);
    t.backward(loss);
    const Eigen::VectorXd numeric =
        finite_difference_gradient([&](const Eigen::VectorXd& v) { return ce_of(v, arch, x, y); }, p);
    EXPECT_LE(max_relative_error(Eigen::VectorXd(leaf.grad()), numeric), 1e-4);
  }
}

TEST(Forward, GradientMatchesHandBackprop) {
  for (auto act : {Activation::kRelu, Activation::kTanh}) {
    const auto arch = mlp(4, {6, 5}, 3, act);
    const Eigen::VectorXd p = init_particles(arch, 1, 31, 0.6).means[0];
    const Eigen::MatrixXd x = random_inputs(5, 8, 4);
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 2, 1};
    ad::Tape t;
    auto leaf = t.leaf(p);
    auto loss = ce_loss(forward(t, leaf, arch, x), y);
    t.backward(loss);
    const auto ref = oracle::mlp_ce_backprop(p, arch, x, y);
    EXPECT_NEAR(loss.item(), ref.loss, 1e-13);
    EXPECT_LE((Eigen::VectorXd(leaf.grad()) - ref.grad).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Forward, LoraGradientMatchesFiniteDifferences) {
  const auto arch = lora(4, {5}, 3, 2);
  const Eigen::VectorXd backbone = init_dense(arch, 6, 0.5);
  CounterRng rng(7, 7);
  const Eigen::VectorXd p = 0.5 * rng.normal_vector(param_count(arch));
  const Eigen::MatrixXd x = random_inputs(6, 5, 4);
  const std::vector<int> y{0, 1, 2, 1, 0};
  ad::Tape t;
  auto leaf = t.leaf(p);
  t.backward(ce_loss(forward(t, leaf, arch, x, &backbone), y));
  const Eigen::VectorXd numeric =
      finite_difference_gradient([&](const Eigen::VectorXd& v) { return ce_of(v, arch, x, y, &backbone); }, p);
  EXPECT_LE(max_relative_error(Eigen::VectorXd(leaf.grad()), numeric), 1e-4);
}

TEST(Forward, Errors) {
  const auto arch = mlp(3, {4}, 2);
  const Eigen::MatrixXd x = random_inputs(1, 2, 3);
  EXPECT_THROW(predict_logits(Eigen::VectorXd::Zero(5), arch, x), ParameterShapeError);
  ad::Tape t;
  EXPECT_THROW(forward(t, t.leaf(Eigen::VectorXd::Zero(5)), arch, x), ParameterShapeError);
  EXPECT_THROW(predict_logits(Eigen::VectorXd::Zero(param_count(arch)), arch, random_inputs(1, 2, 4)), DimensionError);
  const auto la = lora(3, {}, 2, 1);
  EXPECT_THROW(predict_logits(Eigen::VectorXd::Zero(param_count(la)), la, x), ContractError);
}

TEST(Lora, MaterializedWeightsMatchAdapterPath) {
  const auto arch = lora(6, {5, 4}, 3, 2);
  const Eigen::VectorXd backbone = init_dense(arch, 12, 0.5);
  CounterRng rng(13, 1);
  const Eigen::MatrixXd x = random_inputs(9, 10, 6);
  ArchSpec dense = arch;
  dense.kind = ArchKind::kMlp;
  dense.rank = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd adapters = rng.normal_vector(param_count(arch));
    const Eigen::VectorXd folded = materialize_lora(backbone, adapters, arch);
    const Eigen::MatrixXd via_adapters = predict_logits(adapters, arch, x, &backbone);
    const Eigen::MatrixXd via_dense = predict_logits(folded, dense, x);
    EXPECT_LE((via_adapters - via_dense).cwiseAbs().maxCoeff(), 1e-12);
    ad::Tape t;
    EXPECT_LE((forward(t, t.leaf(adapters), arch, x, &backbone).value() - via_dense).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Layout, DenseRoundTripIsBitwise) {
  const auto arch = mlp(4, {6, 3}, 5);
  CounterRng rng(3, 3);
  const Eigen::VectorXd v = rng.normal_vector(param_count(arch));
  const auto layers = unflatten_dense(v, arch);
  ASSERT_EQ(layers.size(), 3u);
  EXPECT_EQ(layers[0].weight.rows(), 6);
  EXPECT_EQ(layers[0].weight.cols(), 4);
  EXPECT_EQ(layers[0].weight(0, 1), v[1]);  // row-major
  EXPECT_EQ(layers[0].bias[0], v[24]);
  EXPECT_TRUE(bitwise_equal(flatten_dense(layers), v));
}

TEST(Layout, AdapterRoundTripIsBitwise) {
  const auto arch = lora(5, {4}, 3, 2);
  CounterRng rng(4, 4);
  const Eigen::VectorXd v = rng.normal_vector(param_count(arch));
  const auto layers = unflatten_adapters(v, arch);
  ASSERT_EQ(layers.size(), 2u);
  EXPECT_EQ(layers[0].a.rows(), 2);
  EXPECT_EQ(layers[0].a.cols(), 5);
  EXPECT_EQ(layers[0].b.rows(), 4);
  EXPECT_EQ(layers[0].b.cols(), 2);
  EXPECT_TRUE(bitwise_equal(flatten_adapters(layers), v));
  EXPECT_THROW(unflatten_adapters(v.head(3), arch), ParameterShapeError);
  EXPECT_THROW(unflatten_dense(v, arch), ParameterShapeError);
}

TEST(Perturb, ZeroDeltaIsIdentity) {
  Eigen::VectorXd p(3);
  p << 1.5, -2, 0.25;
  EXPECT_TRUE(bitwise_equal(perturb(p, Eigen::VectorXd::Zero(3)), p));
}

TEST(Perturb, HandArithmetic) {
  Eigen::VectorXd mu(2), d(2), expected(2);
  mu << 0.5, 0.5;
  d << 0.1, -0.1;
  expected << 0.6, 0.4;
  EXPECT_TRUE(perturb(mu, d).isApprox(expected, 1e-15));
}

TEST(Perturb, InverseRestoresExactly) {
  // Dyadic values keep the round trip exact in binary floating point.
  Eigen::VectorXd p(4), a(4);
  p << 0.5, -1.25, 3.0, 0.125;
  a << 0.25, 0.5, -0.75, 2.0;
  EXPECT_TRUE(bitwise_equal(perturb(perturb(p, a), -a), p));
}

TEST(Perturb, DoesNotAliasInput) {
  Eigen::VectorXd p = Eigen::VectorXd::Ones(3);
  Eigen::VectorXd q = perturb(p, Eigen::VectorXd::Ones(3));
  q[0] = 100.0;
  EXPECT_EQ(p[0], 1.0);
  EXPECT_THROW(perturb(p, Eigen::VectorXd::Ones(2)), ParameterShapeError);
}
