#pragma once

// Ensemble evaluation: prediction averaging, accuracy, calibration, NLL,
// diversity volume, confidence-threshold OOD sweeps, and the PAC-Bayes
// complexity diagnostic.

#include "ibdr/data.hpp"
#include "ibdr/errors.hpp"
#include "ibdr/losses.hpp"
#include "ibdr/models.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ibdr {

struct MetricsReport {
  std::string split;
  double accuracy = 0.0;
  double ece = 0.0;
  double nll = 0.0;
  double mean_volume = 0.0;
  double lambda = 0.0;
  double train_loss = 0.0;
  std::uint64_t step = 0;
};

struct OODCurve {
  std::vector<double> thresholds;
  std::vector<double> frac_flagged;
};

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
Eigen::Index argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = j;
  }
  return best;
}

template <typename Derived>
double accuracy(const Eigen::MatrixBase<Derived>& probs, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (argmax_lowest(probs.row(i)) == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Equal-width bins over (0, 1] on the max probability; a confidence on a bin
/// edge belongs to the bin whose upper edge it is.
/// ECE = Σ_b (n_b / n)·|acc_b − conf_b|.
template <typename Derived>
double ece(const Eigen::MatrixBase<Derived>& probs, std::span<const int> labels, int num_bins = 15) {
  if (num_bins < 1) throw ContractError("ece: num_bins must be at least 1");
  const Eigen::Index n = probs.rows();
  if (n == 0) return 0.0;
  std::vector<double> conf_sum(num_bins, 0.0), hit_sum(num_bins, 0.0);
  std::vector<std::size_t> count(num_bins, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pred = argmax_lowest(probs.row(i));
    const double c = probs(i, pred);
    int b = static_cast<int>(std::ceil(c * num_bins)) - 1;
    b = std::clamp(b, 0, num_bins - 1);
    conf_sum[b] += c;
    hit_sum[b] += (pred == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    ++count[b];
  }
  double total = 0.0;
  for (int b = 0; b < num_bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    total += (nb / static_cast<double>(n)) * std::abs(hit_sum[b] / nb - conf_sum[b] / nb);
  }
  return total;
}

/// Mean −log p[y] with probabilities clamped to ≥ 1e-12.
template <typename Derived>
double nll(const Eigen::MatrixBase<Derived>& probs, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    total -= std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), 1e-12));
  }
  return total / static_cast<double>(labels.size());
}

/// Mean over particles of softmax(forward(θ_i, x)). θ_i = μ_i unless
/// eval_sample, in which case θ_i = μ_i + σε_i from the (seed, i) stream.
Eigen::MatrixXd ensemble_predict(const ParticleSet& particles, const Eigen::MatrixXd& x, bool eval_sample = false,
                                 std::uint64_t seed = 0);

/// Mean raw volume over the dataset at the particle means. Requires
/// K ≤ C − 1 or positive jitter.
double diversity_volume(const ParticleSet& particles, const Dataset& ds, const DivergenceConfig& cfg);

/// Flags a sample as OOD at threshold t iff its max ensemble probability < t.
OODCurve ood_curve(std::span<const double> confidences, std::span<const double> thresholds);

struct OODSweep {
  OODCurve in;
  OODCurve ood;
};
OODSweep ood_sweep(const ParticleSet& particles, const Dataset& in_data, const Dataset& ood_data,
                   std::span<const double> thresholds);

/// L·√((Σ‖μ_i‖² + K·d·s(σ) + 2 log(1/δ)) / 4N) with s(σ) = σ − log σ, or
/// σ² − 1 − log σ² for KlForm::kStandard.
double pac_bayes_complexity(const ParticleSet& particles, double n, double delta, double loss_bound,
                            KlForm form = KlForm::kLinearSigma);

struct EvalConfig {
  int ece_bins = 15;
  bool eval_sample = false;
  DivergenceConfig divergence;
};

/// Full evaluation of one split. `loss` is the mean per-particle cross
/// entropy on the split; the volume is 0 when the frame is rank deficient.
MetricsReport evaluate(const ParticleSet& particles, const Dataset& ds, const EvalConfig& cfg, std::uint64_t seed = 0);

}  // namespace ibdr
