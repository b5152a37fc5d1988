#include "ibdr/gradcheck.hpp"

#include "ibdr/autodiff.hpp"
#include "ibdr/finite_difference.hpp"
#include "ibdr/losses.hpp"
#include "ibdr/models.hpp"
#include "ibdr/optimizer.hpp"
#include "ibdr/rng.hpp"

#include <functional>

namespace ibdr {

namespace {

using ad::Matrix;
using ad::Tape;
using ad::Tensor;
using Fn = std::function<Tensor(Tape&, const Tensor&)>;

constexpr double kStep = 1e-5;

Matrix uniform_matrix(CounterRng& rng, Eigen::Index r, Eigen::Index c, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = lo + (hi - lo) * rng.uniform();
  return m;
}

Eigen::VectorXd flat(const Matrix& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); }

GradCheckResult tape_vs_fd(const std::string& name, const Matrix& x0, const Fn& fn) {
  Tape tape;
  Tensor x = tape.leaf(x0);
  tape.backward(fn(tape, x));
  const Eigen::VectorXd analytic = flat(x.grad());
  auto f = [&](const Eigen::VectorXd& v) {
    Tape t;
    return fn(t, t.constant(Eigen::Map<const Matrix>(v.data(), x0.rows(), x0.cols()))).item();
  };
  const Eigen::VectorXd numeric = finite_difference_gradient(f, flat(x0), kStep);
  return {name, max_relative_error(analytic, numeric), static_cast<std::size_t>(x0.size())};
}

// Random fixed weights turn a matrix output into a scalar that depends on every entry.
Tensor contract(Tape& t, const Tensor& m, std::uint64_t seed) {
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kInit, 1000));
  return ad::sum(ad::hadamard(t.constant(uniform_matrix(rng, m.rows(), m.cols())), m));
}

struct ToyProblem {
  ArchSpec arch;
  Eigen::MatrixXd x;
  std::vector<int> y;
  std::vector<Eigen::VectorXd> theta;
  std::vector<Eigen::MatrixXd> probs;
  Eigen::VectorXd theta_prime;
};

// Two particles of a 3-6-4 tanh network (52 parameters each) on six points.
ToyProblem toy_problem(std::uint64_t seed) {
  ToyProblem p;
  p.arch.input_dim = 3;
  p.arch.hidden_dims = {6};
  p.arch.num_classes = 4;
  p.arch.activation = Activation::kTanh;
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kInit, 1001));
  p.x = uniform_matrix(rng, 6, 3);
  p.y = {0, 1, 2, 3, 1, 2};
  const auto ps = init_particles(p.arch, 2, seed, 0.8, 0.1);
  const auto sampled = sample_particles(ps, seed, 0);
  p.theta = sampled.theta;
  p.probs = particle_probs(p.theta, p.arch, p.x, nullptr);
  p.theta_prime = p.theta[0] + 0.05 * rng.normal_vector(p.theta[0].size());
  return p;
}

ObjectiveInputs toy_inputs(const ToyProblem& p) {
  ObjectiveInputs in;
  in.arch = &p.arch;
  in.particle = 0;
  in.theta_all = p.theta;
  in.probs_all = p.probs;
  in.lambda = 0.3;
  in.x = &p.x;
  in.labels = p.y;
  in.divergence.alpha = 0.5;
  return in;
}

GradCheckResult objective_check(const std::string& name, const ToyProblem& p, const ObjectiveInputs& in,
                                const Eigen::VectorXd& analytic, ObjectiveOptions opts) {
  auto f = [&](const Eigen::VectorXd& v) { return relaxed_objective(v, in, opts, false).terms.total; };
  const Eigen::VectorXd numeric = finite_difference_gradient(f, p.theta_prime, kStep);
  return {name, max_relative_error(analytic, numeric), static_cast<std::size_t>(analytic.size())};
}

struct Registered {
  const char* name;
  std::function<GradCheckResult(const char*, std::uint64_t)> run;
};

const std::vector<Registered>& registry() {
  static const std::vector<Registered> checks = {
      {"op.matmul",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 1);
         const Matrix b = uniform_matrix(rng, 4, 2);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 4),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::matmul(x, t.constant(b)), s); });
       }},
      {"op.transpose",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 2);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 2),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::transpose(x), s); });
       }},
      {"op.add_sub",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 3);
         const Matrix b = uniform_matrix(rng, 3, 3);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 3), [&](Tape& t, const Tensor& x) {
           return contract(t, ad::sub(ad::add(x, t.constant(b)), ad::scale(x, 0.3)), s);
         });
       }},
      {"op.hadamard",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 4);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 2),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::hadamard(x, x), s); });
       }},
      {"op.add_row",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 5);
         const Matrix a = uniform_matrix(rng, 4, 3);
         return tape_vs_fd(n, uniform_matrix(rng, 1, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::add_row(t.constant(a), x), s); });
       }},
      {"op.add_n",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 6);
         const Matrix b = uniform_matrix(rng, 2, 2);
         return tape_vs_fd(n, uniform_matrix(rng, 2, 2), [&](Tape& t, const Tensor& x) {
           const std::vector<Tensor> terms{x, t.constant(b), ad::hadamard(x, x)};
           return contract(t, ad::add_n(terms), s);
         });
       }},
      {"op.sum_mean",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 7);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 2), [](Tape&, const Tensor& x) {
           return ad::add(ad::sum(ad::hadamard(x, x)), ad::mean(x));
         });
       }},
      {"op.relu",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 8);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::relu(x), s); });
       }},
      {"op.tanh",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 9);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::tanh(x), s); });
       }},
      {"op.clamp_min",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 10);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::clamp_min(x, 0.1), s); });
       }},
      {"op.slice_reshape",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 11);
         return tape_vs_fd(n, uniform_matrix(rng, 10, 1), [&](Tape& t, const Tensor& x) {
           return contract(t, ad::tanh(ad::slice_reshape(x, 2, 2, 3)), s);
         });
       }},
      {"op.row_without",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 12);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 4),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::row_without(x, 1, 2), s); });
       }},
      {"op.hcat",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 13);
         const Matrix b = uniform_matrix(rng, 3, 1);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 2), [&](Tape& t, const Tensor& x) {
           const std::vector<Tensor> parts{x, t.constant(b), ad::tanh(x)};
           return contract(t, ad::hcat(parts), s);
         });
       }},
      {"op.squared_distance",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 14);
         const Matrix b = uniform_matrix(rng, 5, 1);
         return tape_vs_fd(n, uniform_matrix(rng, 5, 1),
                           [&](Tape& t, const Tensor& x) { return ad::squared_distance(x, t.constant(b)); });
       }},
      {"op.softmax",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 15);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 4),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::softmax(x), s); });
       }},
      {"op.softmax_cross_entropy",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 16);
         const std::vector<int> y{2, 0, 3};
         return tape_vs_fd(n, uniform_matrix(rng, 3, 4),
                           [&](Tape&, const Tensor& x) { return ad::softmax_cross_entropy(x, y).loss; });
       }},
      {"op.unit_normalize_columns",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 17);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::unit_normalize_columns(x), s); });
       }},
      {"op.gram",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 18);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::gram(x), s); });
       }},
      {"op.add_diagonal",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 19);
         return tape_vs_fd(n, uniform_matrix(rng, 3, 3),
                           [&](Tape& t, const Tensor& x) { return contract(t, ad::add_diagonal(x, 0.7), s); });
       }},
      {"op.determinant",
       [](const char* n, std::uint64_t s) {
         CounterRng rng(s, 20);
         return tape_vs_fd(n, uniform_matrix(rng, 4, 4), [](Tape&, const Tensor& x) { return ad::determinant(x); });
       }},
      {"op.determinant_near_singular",
       [](const char* n, std::uint64_t s) {
         // Symmetric Gram-like matrix with eigenvalues {1e-6, 0.5, 1.5}.
         CounterRng rng(s, 21);
         const Matrix q = Eigen::HouseholderQR<Matrix>(uniform_matrix(rng, 3, 3)).householderQ();
         const Matrix g = q * Eigen::Vector3d(1e-6, 0.5, 1.5).asDiagonal() * q.transpose();
         return tape_vs_fd(n, g, [](Tape&, const Tensor& x) { return ad::determinant(x); });
       }},
      {"model.mlp_forward",
       [](const char* n, std::uint64_t s) {
         ArchSpec arch;
         arch.input_dim = 3;
         arch.hidden_dims = {5, 4};
         arch.num_classes = 3;
         CounterRng rng(s, 22);
         const Matrix x = uniform_matrix(rng, 4, 3);
         const Eigen::VectorXd p = init_dense(arch, s, 0.7);
         return tape_vs_fd(n, p, [&](Tape& t, const Tensor& v) { return contract(t, forward(t, v, arch, x), s); });
       }},
      {"model.lora_forward",
       [](const char* n, std::uint64_t s) {
         ArchSpec arch;
         arch.kind = ArchKind::kLora;
         arch.input_dim = 3;
         arch.hidden_dims = {5};
         arch.num_classes = 3;
         arch.rank = 2;
         arch.activation = Activation::kTanh;
         CounterRng rng(s, 23);
         const Matrix x = uniform_matrix(rng, 4, 3);
         const Eigen::VectorXd backbone = init_dense(arch, s + 1, 0.7);
         const Eigen::VectorXd p = rng.normal_vector(param_count(arch)) * 0.5;
         return tape_vs_fd(n, p, [&](Tape& t, const Tensor& v) {
           return contract(t, forward(t, v, arch, x, &backbone), s);
         });
       }},
      {"loss.cross_entropy",
       [](const char* n, std::uint64_t s) {
         const ToyProblem p = toy_problem(s);
         return tape_vs_fd(n, p.theta_prime,
                           [&](Tape&, const Tensor& v) { return ce_loss(forward(*v.tape(), v, p.arch, p.x), p.y); });
       }},
      {"loss.divergence",
       [](const char* n, std::uint64_t s) {
         const ToyProblem p = toy_problem(s);
         DivergenceConfig cfg;
         cfg.alpha = 1.0;
         return tape_vs_fd(n, p.theta_prime, [&](Tape& t, const Tensor& v) {
           const std::vector<Tensor> probs{ad::softmax(forward(t, v, p.arch, p.x)), t.constant(p.probs[1])};
           return divergence_loss(probs, p.y, cfg).raw_volume;
         });
       }},
      {"loss.transport_cost",
       [](const char* n, std::uint64_t s) {
         const ToyProblem p = toy_problem(s);
         return tape_vs_fd(n, p.theta_prime,
                           [&](Tape& t, const Tensor& v) { return transport_cost(t.constant(p.theta[0]), v); });
       }},
      {"loss.kl_regularizer",
       [](const char* n, std::uint64_t s) {
         const ToyProblem p = toy_problem(s);
         return tape_vs_fd(n, p.theta_prime, [&](Tape& t, const Tensor& v) {
           const std::vector<Tensor> means{v, t.constant(p.theta[1])};
           return kl_regularizer(t, means, 0.1, 0.01);
         });
       }},
      {"loss.relaxed_objective",
       [](const char* n, std::uint64_t s) {
         const ToyProblem p = toy_problem(s);
         const ObjectiveInputs in = toy_inputs(p);
         return objective_check(n, p, in, relaxed_objective(p.theta_prime, in).grad, {});
       }},
      {"step.mu_gradient",
       [](const char* n, std::uint64_t s) {
         // With the cost included, the descent direction less its decay term is ∇ℓ̃ at θ′.
         const ToyProblem p = toy_problem(s);
         ObjectiveInputs in = toy_inputs(p);
         IBDRConfig cfg;
         cfg.k = 2;
         cfg.beta = 0.01;
         cfg.include_cost_in_mu_grad = true;
         in.divergence = cfg.divergence();
         in.divergence.alpha = 0.5;
         cfg.alpha = 0.5;
         const Eigen::VectorXd mu = p.theta[0] * 0.9;
         const Eigen::VectorXd g = mu_gradient(mu, p.theta_prime, in, cfg).grad - (2.0 * cfg.beta / 2.0) * mu;
         return objective_check(n, p, in, g, {});
       }},
  };
  return checks;
}

}  // namespace

std::vector<std::string> grad_check_names() {
  std::vector<std::string> names;
  for (const auto& c : registry()) names.emplace_back(c.name);
  return names;
}

std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  for (const auto& c : registry()) out.push_back(c.run(c.name, seed));
  return out;
}

}  // namespace ibdr
