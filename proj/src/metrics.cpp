#include "ibdr/metrics.hpp"

#include "ibdr/errors.hpp"
#include "ibdr/rng.hpp"

namespace ibdr {

Eigen::MatrixXd ensemble_predict(const ParticleSet& particles, const Eigen::MatrixXd& x, bool eval_sample,
                                 std::uint64_t seed) {
  if (particles.size() == 0) throw ContractError("ensemble_predict: empty particle set");
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(x.rows(), particles.arch.num_classes);
  for (std::size_t i = 0; i < particles.size(); ++i) {
    Eigen::VectorXd theta = particles.means[i];
    if (eval_sample) {
      CounterRng rng(seed ^ static_cast<std::uint64_t>(i), CounterRng::stream_id(rng_tag::kEvalSample, i));
      theta += particles.sigma * rng.normal_vector(theta.size());
    }
    mean += softmax_rows(predict_logits(theta, particles.arch, x, particles.backbone()));
  }
  return mean / static_cast<double>(particles.size());
}

double diversity_volume(const ParticleSet& particles, const Dataset& ds, const DivergenceConfig& cfg) {
  const auto probs = particle_probs(particles.means, particles.arch, ds.features, particles.backbone());
  return divergence_volume(probs, ds.labels, cfg);
}

OODCurve ood_curve(std::span<const double> confidences, std::span<const double> thresholds) {
  if (confidences.empty()) throw ContractError("ood sweep: empty dataset");
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (thresholds[t] < 0.0 || thresholds[t] > 1.0 || (t > 0 && thresholds[t] < thresholds[t - 1])) {
      throw ContractError("ood sweep: thresholds must be ascending within [0, 1]");
    }
  }
  std::vector<double> sorted(confidences.begin(), confidences.end());
  std::sort(sorted.begin(), sorted.end());
  OODCurve curve;
  curve.thresholds.assign(thresholds.begin(), thresholds.end());
  for (double t : thresholds) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    curve.frac_flagged.push_back(static_cast<double>(below) / static_cast<double>(sorted.size()));
  }
  return curve;
}

namespace {

std::vector<double> max_confidence(const ParticleSet& particles, const Dataset& ds) {
  if (ds.size() == 0) throw ContractError("ood sweep: empty dataset");
  const Eigen::MatrixXd p = ensemble_predict(particles, ds.features);
  std::vector<double> conf(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) conf[static_cast<std::size_t>(i)] = p.row(i).maxCoeff();
  return conf;
}

}  // namespace

OODSweep ood_sweep(const ParticleSet& particles, const Dataset& in_data, const Dataset& ood_data,
                   std::span<const double> thresholds) {
  return {ood_curve(max_confidence(particles, in_data), thresholds),
          ood_curve(max_confidence(particles, ood_data), thresholds)};
}

double pac_bayes_complexity(const ParticleSet& particles, double n, double delta, double loss_bound, KlForm form) {
  if (!(n >= 1.0)) throw DomainError("pac_bayes_complexity: N must be at least 1");
  if (!(delta > 0.0 && delta <= 1.0)) throw DomainError("pac_bayes_complexity: delta must lie in (0, 1]");
  if (!(loss_bound > 0.0)) throw DomainError("pac_bayes_complexity: loss bound must be positive");
  if (particles.size() == 0) throw ContractError("pac_bayes_complexity: empty particle set");
  const double s = kl_sigma_term(particles.sigma, form);
  double norms = 0.0;
  for (const auto& mu : particles.means) norms += mu.squaredNorm();
  const double k = static_cast<double>(particles.size());
  const double d = static_cast<double>(particles.dim());
  const double inner = norms + k * d * s + 2.0 * std::log(1.0 / delta);
  return loss_bound * std::sqrt(inner / (4.0 * n));
}

MetricsReport evaluate(const ParticleSet& particles, const Dataset& ds, const EvalConfig& cfg, std::uint64_t seed) {
  if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
  MetricsReport r;
  r.split = ds.name;
  const auto probs = particle_probs(particles.means, particles.arch, ds.features, particles.backbone());
  Eigen::MatrixXd ens;
  if (cfg.eval_sample) {
    ens = ensemble_predict(particles, ds.features, true, seed);
  } else {
    ens = Eigen::MatrixXd::Zero(ds.features.rows(), particles.arch.num_classes);
    for (const auto& p : probs) ens += p;
    ens /= static_cast<double>(probs.size());
  }
  r.accuracy = accuracy(ens, ds.labels);
  r.ece = ece(ens, ds.labels, cfg.ece_bins);
  r.nll = nll(ens, ds.labels);
  double ce = 0.0;
  for (const auto& p : probs) ce += nll(p, ds.labels);
  r.train_loss = ce / static_cast<double>(probs.size());
  const auto k = static_cast<Eigen::Index>(particles.size());
  if (k <= particles.arch.num_classes - 1 || cfg.divergence.jitter > 0.0) {
    r.mean_volume = divergence_volume(probs, ds.labels, cfg.divergence);
  } else {
    r.mean_volume = 0.0;  // the frame cannot span K directions
  }
  return r;
}

}  // namespace ibdr
