#pragma once

#include "ibdr/autodiff.hpp"
#include "ibdr/models.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace ibdr {

/// Which Gaussian KL expression feeds the regularizer and the bound.
/// kLinearSigma: KL(N(μ,σ²I) ‖ N(0,I)) taken as ½(‖μ‖² + dσ − d log σ).
/// kStandard: the textbook ½(‖μ‖² + dσ² − d − d log σ²).
enum class KlForm { kLinearSigma, kStandard };

struct DivergenceConfig {
  double alpha = 0.02;
  int sign = -1;  // -1: descent increases spanned volume; +1: literal "+α·l_div"
  double jitter = 0.0;
  double prob_floor = 1e-12;

  void validate() const;
};

struct DivergenceTerms {
  ad::Tensor raw_volume;  // batch mean of det(FᵀF + jitter·I)
  ad::Tensor div_term;    // sign·α·raw_volume
};

struct ObjectiveTerms {
  double ce = 0.0;
  double raw_volume = 0.0;
  double div_term = 0.0;
  double cost = 0.0;
  double total = 0.0;  // ce + div_term − λ·cost
};

ad::Tensor ce_loss(const ad::Tensor& logits, std::span<const int> labels);

/// Per sample: clamp each particle's probabilities to ≥ prob_floor, drop the
/// label entry, unit-normalize, stack the K vectors as columns of F and take
/// det(FᵀF + jitter·I). Throws RankDeficiencyError when K > C−1 and jitter = 0.
DivergenceTerms divergence_loss(std::span<const ad::Tensor> probs, std::span<const int> labels,
                                const DivergenceConfig& cfg);

/// Value-only volume of one sample. `frame` is K x C (one row per particle).
double sample_volume(const Eigen::MatrixXd& frame, int label, double prob_floor, double jitter);

/// Batch-mean volume from per-particle probability matrices (each b x C).
double divergence_volume(std::span<const Eigen::MatrixXd> probs, std::span<const int> labels,
                         const DivergenceConfig& cfg);

/// Squared Euclidean distance ‖θ − θ′‖².
ad::Tensor transport_cost(const ad::Tensor& theta, const ad::Tensor& theta_prime);
double transport_cost(const Eigen::VectorXd& theta, const Eigen::VectorXd& theta_prime);

/// Everything the per-particle objective reads besides θ′_i.
struct ObjectiveInputs {
  const ArchSpec* arch = nullptr;
  const Eigen::VectorXd* frozen = nullptr;
  std::size_t particle = 0;
  std::span<const Eigen::VectorXd> theta_all;  // sampled θ_{1:K}
  std::span<const Eigen::MatrixXd> probs_all;  // softmax of θ_{1:K} on the batch
  double lambda = 0.0;
  const Eigen::MatrixXd* x = nullptr;
  std::span<const int> labels;
  DivergenceConfig divergence;
};

struct ObjectiveOptions {
  bool include_divergence = true;
  bool include_cost = true;
};

struct ObjectiveEvaluation {
  ObjectiveTerms terms;
  Eigen::VectorXd grad;  // ∂total/∂θ′_i; empty unless requested
};

/// Probabilities of every θ_j on the batch, in particle order.
std::vector<Eigen::MatrixXd> particle_probs(std::span<const Eigen::VectorXd> thetas, const ArchSpec& arch,
                                            const Eigen::MatrixXd& x, const Eigen::VectorXd* frozen);

/// ℓ̃(θ′_i, θ_i) = ce(θ′_i) + sign·α·vol(θ′_i, θ_{−i}) − λ·c(θ_i, θ′_i).
/// Only θ′_i is differentiated; the other particles' predictions are constants.
/// The divergence is skipped when α = 0 or disabled in `opts`.
ObjectiveEvaluation relaxed_objective(const Eigen::VectorXd& theta_prime, const ObjectiveInputs& in,
                                      ObjectiveOptions opts = {}, bool with_grad = true);

/// (β/K)·(Σ‖μ_i‖² + d·(σ − log σ)); kStandard swaps in d·(σ² − 1 − log σ²).
double kl_regularizer(const ParticleSet& particles, double beta, KlForm form = KlForm::kLinearSigma);
ad::Tensor kl_regularizer(ad::Tape& tape, std::span<const ad::Tensor> means, double sigma, double beta,
                          KlForm form = KlForm::kLinearSigma);

/// Per-dimension σ term of the KL expression.
double kl_sigma_term(double sigma, KlForm form);

}  // namespace ibdr
