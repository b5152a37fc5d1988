#pragma once

// Particle-parameterized classifiers. Every particle is one flat parameter
// vector; an ArchSpec fixes how that vector is carved into layers.
//
// Dense layer convention: logits = x·Wᵀ + b with W stored out x in, row-major,
// followed by b. A low-rank adapter replaces W by W0 + B·A, with
// A (r x in) and B (out x r) trainable and W0, b frozen in the backbone.

#include "ibdr/autodiff.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ibdr {

enum class ArchKind { kMlp, kLora };
enum class Activation { kRelu, kTanh };

std::string to_string(ArchKind kind);
std::string to_string(Activation act);
ArchKind parse_arch_kind(const std::string& s);
Activation parse_activation(const std::string& s);

struct ArchSpec {
  ArchKind kind = ArchKind::kMlp;
  Eigen::Index input_dim = 2;
  std::vector<Eigen::Index> hidden_dims;
  Eigen::Index num_classes = 2;
  Eigen::Index rank = 0;  // lora only
  Activation activation = Activation::kRelu;

  /// {input_dim, hidden..., num_classes}.
  std::vector<Eigen::Index> layer_sizes() const;
  /// Throws ContractError on an invalid record.
  void validate() const;

  bool operator==(const ArchSpec&) const = default;
};

/// Trainable parameters per particle (lora counts only the adapters).
Eigen::Index param_count(const ArchSpec& arch);
/// Parameters of the plain dense network with the same layer sizes.
Eigen::Index backbone_param_count(const ArchSpec& arch);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

struct AdapterLayer {
  Eigen::MatrixXd a;  // r x in
  Eigen::MatrixXd b;  // out x r
};

std::vector<DenseLayer> unflatten_dense(const Eigen::VectorXd& flat, const ArchSpec& arch);
Eigen::VectorXd flatten_dense(const std::vector<DenseLayer>& layers);
std::vector<AdapterLayer> unflatten_adapters(const Eigen::VectorXd& flat, const ArchSpec& arch);
Eigen::VectorXd flatten_adapters(const std::vector<AdapterLayer>& layers);

/// Folds adapters into the backbone: W0 + B·A per layer, biases unchanged.
/// Returns a flat vector for the plain dense layout.
Eigen::VectorXd materialize_lora(const Eigen::VectorXd& backbone, const Eigen::VectorXd& adapters,
                                 const ArchSpec& arch);

/// Mixture-of-Gaussians posterior: component means plus a shared scale.
struct ParticleSet {
  std::vector<Eigen::VectorXd> means;
  double sigma = 0.1;
  ArchSpec arch;
  std::optional<Eigen::VectorXd> frozen_backbone;

  std::size_t size() const { return means.size(); }
  Eigen::Index dim() const { return means.empty() ? 0 : means.front().size(); }
  const Eigen::VectorXd* backbone() const { return frozen_backbone ? &*frozen_backbone : nullptr; }
};

/// Each mean is drawn from N(0, init_scale²) on its own particle-indexed
/// stream. For lora, A ~ N(0, init_scale²) and B = 0, so the initial model
/// equals the backbone.
ParticleSet init_particles(const ArchSpec& arch, std::size_t k, std::uint64_t seed, double init_scale,
                           double sigma = 0.1, std::optional<Eigen::VectorXd> frozen_backbone = std::nullopt);

/// Random plain-dense parameters for the given layer sizes.
Eigen::VectorXd init_dense(const ArchSpec& arch, std::uint64_t seed, double init_scale);

/// Records the network on `tape`. `params` is a d x 1 tensor.
ad::Tensor forward(ad::Tape& tape, const ad::Tensor& params, const ArchSpec& arch, const Eigen::MatrixXd& x,
                   const Eigen::VectorXd* frozen = nullptr);

/// Value-only forward pass in plain Eigen.
Eigen::MatrixXd predict_logits(const Eigen::VectorXd& params, const ArchSpec& arch, const Eigen::MatrixXd& x,
                               const Eigen::VectorXd* frozen = nullptr);

Eigen::VectorXd perturb(const Eigen::VectorXd& params, const Eigen::VectorXd& delta);

/// Row-wise stable softmax.
template <typename Derived>
Eigen::MatrixXd softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace ibdr
