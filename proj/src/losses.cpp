#include "ibdr/losses.hpp"

#include "ibdr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ibdr {

using Eigen::Index;

void DivergenceConfig::validate() const {
  if (!(alpha >= 0.0)) throw ContractError("divergence: alpha must be nonnegative");
  if (sign != -1 && sign != 1) throw ContractError("divergence: sign must be -1 or +1");
  if (!(jitter >= 0.0)) throw ContractError("divergence: jitter must be nonnegative");
  if (!(prob_floor > 0.0)) throw ContractError("divergence: prob_floor must be positive");
}

ad::Tensor ce_loss(const ad::Tensor& logits, std::span<const int> labels) {
  return ad::softmax_cross_entropy(logits, labels).loss;
}

namespace {

void check_frame(std::size_t k, Index classes, const DivergenceConfig& cfg) {
  cfg.validate();
  if (k < 1) throw ContractError("divergence: need at least one particle");
  if (classes < 2) throw ContractError("divergence: need at least two classes");
  if (static_cast<Index>(k) > classes - 1 && cfg.jitter == 0.0) {
    throw RankDeficiencyError("divergence: K = " + std::to_string(k) + " particles exceed C-1 = " +
                              std::to_string(classes - 1) +
                              " non-label directions; the determinant is identically 0 without jitter");
  }
}

void check_probs(const Eigen::MatrixXd& p, std::span<const int> labels) {
  if (p.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("divergence: " + std::to_string(p.rows()) + " probability rows for " +
                         std::to_string(labels.size()) + " labels");
  }
  for (Index i = 0; i < p.rows(); ++i) {
    if (p.row(i).minCoeff() < 0.0 || std::abs(p.row(i).sum() - 1.0) > 1e-6) {
      throw ContractError("divergence: row " + std::to_string(i) + " is not a probability vector");
    }
    if (labels[i] < 0 || labels[i] >= p.cols()) {
      throw IndexError("divergence: label " + std::to_string(labels[i]) + " out of range");
    }
  }
}

/// Lexicographic order of the frame columns, so the determinant is computed
/// on the same matrix whatever order the particles arrive in.
std::vector<std::size_t> canonical_order(const std::vector<Eigen::VectorXd>& cols) {
  std::vector<std::size_t> order(cols.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(cols[a].begin(), cols[a].end(), cols[b].begin(), cols[b].end());
  });
  return order;
}

}  // namespace

DivergenceTerms divergence_loss(std::span<const ad::Tensor> probs, std::span<const int> labels,
                                const DivergenceConfig& cfg) {
  if (probs.empty()) throw ContractError("divergence: need at least one particle");
  const Index classes = probs.front().cols();
  check_frame(probs.size(), classes, cfg);
  for (const auto& p : probs) {
    if (p.cols() != classes) throw DimensionError("divergence: particles disagree on class count");
    check_probs(p.value(), labels);
  }
  std::vector<ad::Tensor> clamped;
  clamped.reserve(probs.size());
  for (const auto& p : probs) clamped.push_back(ad::clamp_min(p, cfg.prob_floor));

  std::vector<ad::Tensor> dets;
  dets.reserve(labels.size());
  std::vector<ad::Tensor> raw_cols(probs.size()), cols(probs.size());
  std::vector<Eigen::VectorXd> values(probs.size());
  for (Index s = 0; s < static_cast<Index>(labels.size()); ++s) {
    for (std::size_t k = 0; k < clamped.size(); ++k) {
      raw_cols[k] = ad::row_without(clamped[k], s, labels[s]);
      values[k] = raw_cols[k].value();
    }
    const auto order = canonical_order(values);
    for (std::size_t k = 0; k < order.size(); ++k) cols[k] = raw_cols[order[k]];
    ad::Tensor frame = ad::unit_normalize_columns(ad::hcat(cols));
    ad::Tensor g = ad::gram(frame);
    if (cfg.jitter != 0.0) g = ad::add_diagonal(g, cfg.jitter);
    dets.push_back(ad::determinant(g));
  }
  ad::Tensor raw = ad::scale(ad::add_n(dets), 1.0 / static_cast<double>(labels.size()));
  ad::Tensor term = ad::scale(raw, cfg.sign * cfg.alpha);
  return {raw, term};
}

double sample_volume(const Eigen::MatrixXd& frame, int label, double prob_floor, double jitter) {
  const Index k = frame.rows(), c = frame.cols();
  std::vector<Eigen::VectorXd> cols(static_cast<std::size_t>(k), Eigen::VectorXd(c - 1));
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0, r = 0; j < c; ++j) {
      if (j != label) cols[i][r++] = std::max(frame(i, j), prob_floor);
    }
  }
  const auto order = canonical_order(cols);
  Eigen::MatrixXd f(c - 1, k);
  for (Index i = 0; i < k; ++i) f.col(i) = cols[order[i]].normalized();
  Eigen::MatrixXd g = f.transpose() * f;
  g.diagonal().array() += jitter;
  return g.partialPivLu().determinant();
}

double divergence_volume(std::span<const Eigen::MatrixXd> probs, std::span<const int> labels,
                         const DivergenceConfig& cfg) {
  if (probs.empty()) throw ContractError("divergence: need at least one particle");
  if (labels.empty()) throw ContractError("divergence: empty batch");
  const Index classes = probs.front().cols();
  check_frame(probs.size(), classes, cfg);
  for (const auto& p : probs) check_probs(p, labels);
  const Index k = static_cast<Index>(probs.size());
  Eigen::MatrixXd frame(k, classes);
  double total = 0.0;
  for (Index s = 0; s < static_cast<Index>(labels.size()); ++s) {
    for (Index i = 0; i < k; ++i) frame.row(i) = probs[i].row(s);
    total += sample_volume(frame, labels[s], cfg.prob_floor, cfg.jitter);
  }
  return total / static_cast<double>(labels.size());
}

ad::Tensor transport_cost(const ad::Tensor& theta, const ad::Tensor& theta_prime) {
  if (theta.size() != theta_prime.size()) {
    throw ParameterShapeError("transport_cost: lengths " + std::to_string(theta.size()) + " and " +
                              std::to_string(theta_prime.size()) + " differ");
  }
  return ad::squared_distance(theta, theta_prime);
}

double transport_cost(const Eigen::VectorXd& theta, const Eigen::VectorXd& theta_prime) {
  if (theta.size() != theta_prime.size()) {
    throw ParameterShapeError("transport_cost: lengths " + std::to_string(theta.size()) + " and " +
                              std::to_string(theta_prime.size()) + " differ");
  }
  return (theta - theta_prime).squaredNorm();
}

std::vector<Eigen::MatrixXd> particle_probs(std::span<const Eigen::VectorXd> thetas, const ArchSpec& arch,
                                            const Eigen::MatrixXd& x, const Eigen::VectorXd* frozen) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(thetas.size());
  for (const auto& t : thetas) out.push_back(softmax_rows(predict_logits(t, arch, x, frozen)));
  return out;
}

ObjectiveEvaluation relaxed_objective(const Eigen::VectorXd& theta_prime, const ObjectiveInputs& in,
                                      ObjectiveOptions opts, bool with_grad) {
  if (in.arch == nullptr || in.x == nullptr) throw ContractError("relaxed_objective: missing arch or batch");
  if (!(in.lambda >= 0.0)) throw ContractError("relaxed_objective: lambda must be nonnegative");
  if (in.particle >= in.theta_all.size()) throw IndexError("relaxed_objective: particle index out of range");
  const bool use_div = opts.include_divergence && in.divergence.alpha != 0.0;
  if (use_div && in.probs_all.size() != in.theta_all.size()) {
    throw ContractError("relaxed_objective: need probabilities for every particle");
  }

  ad::Tape tape;
  ad::Tensor tp = tape.leaf(theta_prime, with_grad);
  ad::Tensor logits = forward(tape, tp, *in.arch, *in.x, in.frozen);
  auto sce = ad::softmax_cross_entropy(logits, in.labels);

  ObjectiveTerms terms;
  terms.ce = sce.loss.item();
  std::vector<ad::Tensor> parts{sce.loss};

  if (use_div) {
    std::vector<ad::Tensor> probs;
    probs.reserve(in.probs_all.size());
    for (std::size_t j = 0; j < in.probs_all.size(); ++j) {
      probs.push_back(j == in.particle ? sce.probs : tape.constant(in.probs_all[j]));
    }
    auto div = divergence_loss(probs, in.labels, in.divergence);
    terms.raw_volume = div.raw_volume.item();
    terms.div_term = div.div_term.item();
    parts.push_back(div.div_term);
  }

  if (opts.include_cost) {
    ad::Tensor cost = transport_cost(tape.constant(in.theta_all[in.particle]), tp);
    terms.cost = cost.item();
    parts.push_back(ad::scale(cost, -in.lambda));
  }

  ad::Tensor total = ad::add_n(parts);
  terms.total = total.item();

  ObjectiveEvaluation out{terms, {}};
  if (with_grad) {
    tape.backward(total);
    out.grad = tp.grad();
  }
  return out;
}

double kl_sigma_term(double sigma, KlForm form) {
  if (!(sigma > 0.0)) throw DomainError("KL term needs sigma > 0, got " + std::to_string(sigma));
  return form == KlForm::kLinearSigma ? sigma - std::log(sigma) : sigma * sigma - 1.0 - std::log(sigma * sigma);
}

double kl_regularizer(const ParticleSet& particles, double beta, KlForm form) {
  const double sig = kl_sigma_term(particles.sigma, form);
  if (particles.size() == 0) throw ContractError("kl_regularizer: empty particle set");
  double norms = 0.0;
  for (const auto& mu : particles.means) norms += mu.squaredNorm();
  const double k = static_cast<double>(particles.size());
  return (beta / k) * (norms + static_cast<double>(particles.dim()) * sig);
}

ad::Tensor kl_regularizer(ad::Tape& tape, std::span<const ad::Tensor> means, double sigma, double beta,
                          KlForm form) {
  const double sig = kl_sigma_term(sigma, form);
  if (means.empty()) throw ContractError("kl_regularizer: empty particle set");
  std::vector<ad::Tensor> norms;
  const ad::Tensor zero = tape.constant(Eigen::MatrixXd::Zero(means.front().rows(), means.front().cols()));
  for (const auto& mu : means) norms.push_back(ad::squared_distance(mu, zero));
  const double k = static_cast<double>(means.size());
  const double d = static_cast<double>(means.front().size());
  ad::Tensor constant = tape.constant(Eigen::MatrixXd::Constant(1, 1, d * sig));
  norms.push_back(constant);
  return ad::scale(ad::add_n(norms), beta / k);
}

}  // namespace ibdr
