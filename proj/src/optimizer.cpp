#include "ibdr/optimizer.hpp"

#include "ibdr/errors.hpp"
#include "ibdr/rng.hpp"

#include <cmath>
#include <string>
#include <numbers>

namespace ibdr {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kIbdr: return "ibdr";
    case OptimizerKind::kDeepEns: return "deepens";
    case OptimizerKind::kSam: return "sam";
    case OptimizerKind::kSgld: return "sgld";
  }
  return "unknown";
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "ibdr") return OptimizerKind::kIbdr;
  if (s == "deepens") return OptimizerKind::kDeepEns;
  if (s == "sam") return OptimizerKind::kSam;
  if (s == "sgld") return OptimizerKind::kSgld;
  throw ConfigError("train.optimizer: unknown optimizer '" + s + "' (expected ibdr, deepens, sam or sgld)");
}

void IBDRConfig::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("train.") + name + ": must be finite and >= 0");
  };
  if (k < 1) throw ConfigError("train.K: must be at least 1");
  nonneg(alpha, "alpha");
  nonneg(beta, "beta");
  nonneg(rho, "rho");
  nonneg(sigma, "sigma");
  nonneg(ascent_step, "ascent_step");
  nonneg(lr_lambda, "lr_lambda");
  nonneg(lr_mu, "lr_mu");
  nonneg(lambda_init, "lambda_init");
  nonneg(jitter, "jitter");
  nonneg(rho_sam, "rho_sam");
  nonneg(sgld_noise_scale, "sgld_noise_scale");
  if (div_sign != -1 && div_sign != 1) throw ConfigError("train.div_sign: must be -1 or +1");
  if (!(prob_floor > 0.0)) throw ConfigError("train.prob_floor: must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be at least 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum: must lie in [0, 1)");
  if (optimizer == OptimizerKind::kSgld && !(lr_mu > 0.0)) throw ConfigError("train.lr_mu: SGLD needs a positive step");
  if (optimizer == OptimizerKind::kSam && !(rho_sam > 0.0)) throw ConfigError("train.rho_sam: SAM needs rho_sam > 0");
}

TrainState make_train_state(ParticleSet particles, const IBDRConfig& cfg) {
  TrainState s;
  s.particles = std::move(particles);
  s.particles.sigma = cfg.sigma;
  s.dual.lambda = cfg.lambda_init;
  s.seed = cfg.seed;
  return s;
}

SampledParticles sample_particles(const ParticleSet& particles, std::uint64_t seed, std::uint64_t step) {
  if (!(particles.sigma >= 0.0)) throw ContractError("sample_particles: sigma must be nonnegative");
  SampledParticles out;
  for (std::size_t i = 0; i < particles.size(); ++i) {
    CounterRng rng(seed ^ static_cast<std::uint64_t>(i), CounterRng::stream_id(rng_tag::kSample, i, step));
    Eigen::VectorXd eps = rng.normal_vector(particles.means[i].size());
    out.theta.push_back(particles.means[i] + particles.sigma * eps);
    out.eps.push_back(std::move(eps));
  }
  return out;
}

Eigen::VectorXd ascent_update(const Eigen::VectorXd& theta, const Eigen::VectorXd& grad, const IBDRConfig& cfg) {
  if (grad.size() != theta.size()) throw ParameterShapeError("ascent_update: gradient length differs from theta");
  if (cfg.normalize_ascent) {
    const double norm = grad.norm();
    if (norm == 0.0) return theta;
    return theta + cfg.ascent_step * grad / norm;
  }
  return theta + cfg.ascent_step * grad;
}

Eigen::VectorXd ascent_step(const ObjectiveInputs& in, const IBDRConfig& cfg) {
  const Eigen::VectorXd& theta = in.theta_all[in.particle];
  if (cfg.ascent_step == 0.0) return theta;
  ObjectiveOptions opts;
  opts.include_divergence = !cfg.ascent_ce_only;
  return ascent_update(theta, relaxed_objective(theta, in, opts, true).grad, cfg);
}

DualState lambda_step(DualState dual, double rho, std::span<const double> costs, double lr_lambda) {
  if (costs.empty()) return dual;
  double mean_cost = 0.0;
  for (double c : costs) mean_cost += c;
  mean_cost /= static_cast<double>(costs.size());
  // ∂/∂λ of λρ − (λ/K)Σc, then projection onto λ ≥ 0.
  const double grad = rho - mean_cost;
  dual.lambda = std::max(0.0, dual.lambda - lr_lambda * grad);
  return dual;
}

MuGradient mu_gradient(const Eigen::VectorXd& mu_i, const Eigen::VectorXd& theta_prime_i, const ObjectiveInputs& in,
                       const IBDRConfig& cfg) {
  ObjectiveOptions opts;
  opts.include_cost = cfg.include_cost_in_mu_grad;
  auto eval = relaxed_objective(theta_prime_i, in, opts, true);
  const double k = static_cast<double>(in.theta_all.size());
  eval.grad += (2.0 * cfg.beta / k) * mu_i;
  if (!cfg.include_cost_in_mu_grad) eval.terms.cost = transport_cost(in.theta_all[in.particle], theta_prime_i);
  return {std::move(eval.grad), eval.terms};
}

Eigen::VectorXd mu_step(const Eigen::VectorXd& mu_i, const Eigen::VectorXd& theta_prime_i, const ObjectiveInputs& in,
                        const IBDRConfig& cfg) {
  return mu_i - cfg.lr_mu * mu_gradient(mu_i, theta_prime_i, in, cfg).grad;
}

namespace {

double learning_rate(const TrainState& state, double base, const IBDRConfig& cfg) {
  if (!cfg.cosine_schedule || state.total_steps == 0) return base;
  const double t = std::min(1.0, static_cast<double>(state.step) / static_cast<double>(state.total_steps));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void apply_update(TrainState& state, std::size_t i, const Eigen::VectorXd& grad, double lr, const IBDRConfig& cfg) {
  Eigen::VectorXd& mu = state.particles.means[i];
  if (cfg.momentum > 0.0) {
    if (state.velocity.size() != state.particles.size()) {
      state.velocity.assign(state.particles.size(), Eigen::VectorXd());
    }
    Eigen::VectorXd& v = state.velocity[i];
    if (v.size() != mu.size()) v = Eigen::VectorXd::Zero(mu.size());
    v = cfg.momentum * v + grad;
    mu -= lr * v;
  } else {
    mu -= lr * grad;
  }
}

ObjectiveInputs base_inputs(const TrainState& state, const Batch& batch, std::span<const Eigen::VectorXd> thetas,
                            std::span<const Eigen::MatrixXd> probs, const IBDRConfig& cfg) {
  ObjectiveInputs in;
  in.arch = &state.particles.arch;
  in.frozen = state.particles.backbone();
  in.theta_all = thetas;
  in.probs_all = probs;
  in.lambda = state.dual.lambda;
  in.x = &batch.x;
  in.labels = batch.y;
  in.divergence = cfg.divergence();
  return in;
}

void check_batch(const Batch& batch) {
  if (batch.y.empty()) throw ContractError("train step: empty batch");
  if (static_cast<std::size_t>(batch.x.rows()) != batch.y.size()) {
    throw DimensionError("train step: batch rows and labels disagree");
  }
}

void check_finite(const TrainState& state, const StepTelemetry& t) {
  bool ok = std::isfinite(t.loss) && std::isfinite(t.lambda);
  for (const auto& mu : state.particles.means) ok = ok && mu.allFinite();
  if (!ok) {
    throw NumericDivergenceError(state.step, "non-finite loss or parameters at step " + std::to_string(state.step));
  }
}

void require_finite(const TrainState& state, bool ok, const char* what) {
  if (!ok) {
    throw NumericDivergenceError(state.step, std::string("non-finite ") + what + " at step " + std::to_string(state.step));
  }
}

/// ∇ce at θ for each particle independently, plus the ce value.
MuGradient plain_gradient(const TrainState& state, const Batch& batch, const Eigen::VectorXd& at) {
  std::vector<Eigen::VectorXd> single{at};
  ObjectiveInputs in;
  in.arch = &state.particles.arch;
  in.frozen = state.particles.backbone();
  in.theta_all = single;
  in.x = &batch.x;
  in.labels = batch.y;
  ObjectiveOptions opts{false, false};
  auto eval = relaxed_objective(at, in, opts, true);
  return {std::move(eval.grad), eval.terms};
}

}  // namespace

StepTelemetry ibdr_train_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg) {
  check_batch(batch);
  const std::size_t k = state.particles.size();
  const auto sampled = sample_particles(state.particles, state.seed, state.step);
  std::vector<Eigen::MatrixXd> probs;
  if (cfg.alpha != 0.0) {
    probs = particle_probs(sampled.theta, state.particles.arch, batch.x, state.particles.backbone());
    for (const auto& p : probs) require_finite(state, p.allFinite(), "predictions");
  }
  ObjectiveInputs in = base_inputs(state, batch, sampled.theta, probs, cfg);

  std::vector<Eigen::VectorXd> theta_prime(k);
  std::vector<double> costs(k);
  for (std::size_t i = 0; i < k; ++i) {
    in.particle = i;
    theta_prime[i] = ascent_step(in, cfg);
    require_finite(state, theta_prime[i].allFinite(), "ascent point");
    costs[i] = transport_cost(sampled.theta[i], theta_prime[i]);
  }

  state.dual = lambda_step(state.dual, cfg.rho, costs, cfg.lr_lambda);
  in.lambda = state.dual.lambda;

  std::vector<Eigen::VectorXd> grads(k);
  StepTelemetry tel;
  for (std::size_t i = 0; i < k; ++i) {
    in.particle = i;
    auto g = mu_gradient(state.particles.means[i], theta_prime[i], in, cfg);
    grads[i] = std::move(g.grad);
    tel.loss += g.terms.ce + g.terms.div_term;
    tel.volume += g.terms.raw_volume;
    tel.mean_cost += costs[i];
  }
  const double lr = learning_rate(state, cfg.lr_mu, cfg);
  for (std::size_t i = 0; i < k; ++i) apply_update(state, i, grads[i], lr, cfg);

  tel.loss /= static_cast<double>(k);
  tel.volume /= static_cast<double>(k);
  tel.mean_cost /= static_cast<double>(k);
  tel.lambda = state.dual.lambda;
  check_finite(state, tel);
  ++state.step;
  return tel;
}

StepTelemetry deepens_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg) {
  check_batch(batch);
  const std::size_t k = state.particles.size();
  const double lr = learning_rate(state, cfg.lr_mu, cfg);
  StepTelemetry tel;
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::VectorXd& mu = state.particles.means[i];
    auto g = plain_gradient(state, batch, mu);
    g.grad += (2.0 * cfg.beta / static_cast<double>(k)) * mu;
    tel.loss += g.terms.ce;
    apply_update(state, i, g.grad, lr, cfg);
  }
  tel.loss /= static_cast<double>(k);
  tel.lambda = state.dual.lambda;
  check_finite(state, tel);
  ++state.step;
  return tel;
}

StepTelemetry sam_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg) {
  check_batch(batch);
  const std::size_t k = state.particles.size();
  const double lr = learning_rate(state, cfg.lr_mu, cfg);
  StepTelemetry tel;
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::VectorXd mu = state.particles.means[i];
    const auto first = plain_gradient(state, batch, mu);
    const double norm = first.grad.norm();
    Eigen::VectorXd grad;
    if (norm > 0.0 && cfg.rho_sam > 0.0) {
      const Eigen::VectorXd eps = cfg.rho_sam * first.grad / norm;
      auto second = plain_gradient(state, batch, mu + eps);
      grad = std::move(second.grad);
      tel.loss += second.terms.ce;
      tel.mean_cost += eps.squaredNorm();
    } else {
      grad = first.grad;
      tel.loss += first.terms.ce;
    }
    grad += (2.0 * cfg.beta / static_cast<double>(k)) * mu;
    apply_update(state, i, grad, lr, cfg);
  }
  tel.loss /= static_cast<double>(k);
  tel.mean_cost /= static_cast<double>(k);
  tel.lambda = state.dual.lambda;
  check_finite(state, tel);
  ++state.step;
  return tel;
}

StepTelemetry sgld_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg) {
  check_batch(batch);
  if (!(cfg.lr_mu > 0.0)) throw ContractError("sgld_step: step size must be positive");
  const std::size_t k = state.particles.size();
  const double eta = learning_rate(state, cfg.lr_mu, cfg);
  const double noise = std::sqrt(2.0 * eta) * cfg.sgld_noise_scale;
  StepTelemetry tel;
  for (std::size_t i = 0; i < k; ++i) {
    Eigen::VectorXd& mu = state.particles.means[i];
    auto g = plain_gradient(state, batch, mu);
    g.grad += 2.0 * cfg.beta * mu;
    tel.loss += g.terms.ce;
    CounterRng rng(state.seed ^ static_cast<std::uint64_t>(i), CounterRng::stream_id(rng_tag::kSgld, i, state.step));
    const Eigen::VectorXd xi = rng.normal_vector(mu.size());
    mu = mu - eta * g.grad + noise * xi;
  }
  tel.loss /= static_cast<double>(k);
  tel.lambda = state.dual.lambda;
  check_finite(state, tel);
  ++state.step;
  return tel;
}

StepTelemetry train_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg) {
  switch (cfg.optimizer) {
    case OptimizerKind::kIbdr: return ibdr_train_step(state, batch, cfg);
    case OptimizerKind::kDeepEns: return deepens_step(state, batch, cfg);
    case OptimizerKind::kSam: return sam_step(state, batch, cfg);
    case OptimizerKind::kSgld: return sgld_step(state, batch, cfg);
  }
  throw ContractError("train_step: unknown optimizer");
}

std::vector<Batch> epoch_batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw ContractError("epoch_batches: batch_size must be positive");
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kShuffle, epoch));
  const auto order = rng.permutation(ds.size());
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.x.resize(static_cast<Eigen::Index>(end - start), ds.features.cols());
    b.y.resize(end - start);
    for (std::size_t r = start; r < end; ++r) {
      b.x.row(static_cast<Eigen::Index>(r - start)) = ds.features.row(static_cast<Eigen::Index>(order[r]));
      b.y[r - start] = ds.labels[order[r]];
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

StepTelemetry train_epoch(TrainState& state, const Dataset& ds, const IBDRConfig& cfg, std::size_t epoch) {
  const auto batches = epoch_batches(ds, cfg.batch_size, cfg.seed, epoch);
  StepTelemetry mean;
  for (const auto& b : batches) {
    const auto t = train_step(state, b, cfg);
    mean.loss += t.loss;
    mean.volume += t.volume;
    mean.mean_cost += t.mean_cost;
    mean.lambda = t.lambda;
  }
  const double n = static_cast<double>(batches.size());
  mean.loss /= n;
  mean.volume /= n;
  mean.mean_cost /= n;
  return mean;
}

}  // namespace ibdr
