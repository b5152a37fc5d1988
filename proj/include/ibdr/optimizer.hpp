#pragma once

// Training steps over a particle ensemble: the interactive distributionally
// robust step plus three baselines (independent ensemble SGD, per-particle
// SAM, SGLD). All randomness is derived from (seed, particle, step), so a
// TrainState and a batch fully determine the next state.

#include "ibdr/data.hpp"
#include "ibdr/losses.hpp"
#include "ibdr/models.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ibdr {

enum class OptimizerKind { kIbdr, kDeepEns, kSam, kSgld };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& s);

struct IBDRConfig {
  OptimizerKind optimizer = OptimizerKind::kIbdr;
  std::size_t k = 4;
  double alpha = 0.02;
  double beta = 1e-4;
  double rho = 0.05;
  double sigma = 0.1;
  double ascent_step = 0.05;  // α₁
  double lr_lambda = 0.01;    // α_λ
  double lr_mu = 0.05;        // α_μ, also the baselines' learning rate and SGLD's η
  double lambda_init = 0.0;
  bool normalize_ascent = false;
  bool include_cost_in_mu_grad = false;
  bool ascent_ce_only = false;
  int div_sign = -1;
  double jitter = 0.0;
  double prob_floor = 1e-12;
  KlForm kl_form = KlForm::kLinearSigma;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double momentum = 0.0;
  bool cosine_schedule = false;
  double rho_sam = 0.05;
  double sgld_noise_scale = 1.0;

  DivergenceConfig divergence() const { return {alpha, div_sign, jitter, prob_floor}; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct DualState {
  double lambda = 0.0;
};

struct TrainState {
  ParticleSet particles;
  DualState dual;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t total_steps = 0;        // cosine schedule horizon; 0 = constant rate
  std::vector<Eigen::VectorXd> velocity;  // momentum buffers, empty when unused
};

TrainState make_train_state(ParticleSet particles, const IBDRConfig& cfg);

struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> y;
};

struct StepTelemetry {
  double loss = 0.0;       // mean over particles of ce + div_term at the descent point
  double volume = 0.0;     // mean raw volume at the descent point (0 when α = 0)
  double lambda = 0.0;     // after the step
  double mean_cost = 0.0;  // mean c(θ_i, θ′_i)
};

struct SampledParticles {
  std::vector<Eigen::VectorXd> theta;
  std::vector<Eigen::VectorXd> eps;
};

/// θ_i = μ_i + σ·ε_i with ε_i from the stream of (seed, particle i, step).
SampledParticles sample_particles(const ParticleSet& particles, std::uint64_t seed, std::uint64_t step);

/// θ + α₁·g, or θ + α₁·g/‖g‖ when normalize_ascent (g = 0 leaves θ unchanged).
Eigen::VectorXd ascent_update(const Eigen::VectorXd& theta, const Eigen::VectorXd& grad, const IBDRConfig& cfg);

/// θ′_i = θ_i + α₁·g with g = ∇ℓ̃ evaluated at θ′ = θ_i; g/‖g‖ when
/// normalize_ascent (g = 0 leaves θ_i unchanged).
Eigen::VectorXd ascent_step(const ObjectiveInputs& in, const IBDRConfig& cfg);

/// λ ← max(0, λ − α_λ·(ρ − mean(costs))).
DualState lambda_step(DualState dual, double rho, std::span<const double> costs, double lr_lambda);

struct MuGradient {
  Eigen::VectorXd grad;
  ObjectiveTerms terms;
};

/// ∇_{θ′}[ce + sign·α·vol] at θ′_i plus 2(β/K)μ_i, and −2λ(θ′_i − θ_i) when
/// include_cost_in_mu_grad.
MuGradient mu_gradient(const Eigen::VectorXd& mu_i, const Eigen::VectorXd& theta_prime_i, const ObjectiveInputs& in,
                       const IBDRConfig& cfg);

/// μ_i − α_μ·mu_gradient(...).
Eigen::VectorXd mu_step(const Eigen::VectorXd& mu_i, const Eigen::VectorXd& theta_prime_i, const ObjectiveInputs& in,
                        const IBDRConfig& cfg);

StepTelemetry ibdr_train_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg);
StepTelemetry deepens_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg);
StepTelemetry sam_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg);
StepTelemetry sgld_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg);

/// Dispatches on cfg.optimizer. Throws NumericDivergenceError on a
/// non-finite loss or parameter.
StepTelemetry train_step(TrainState& state, const Batch& batch, const IBDRConfig& cfg);

/// Shuffled mini-batches for one epoch; the order depends on (seed, epoch).
std::vector<Batch> epoch_batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::size_t epoch);

/// Runs one epoch and returns the mean telemetry over its steps.
StepTelemetry train_epoch(TrainState& state, const Dataset& ds, const IBDRConfig& cfg, std::size_t epoch);

}  // namespace ibdr
