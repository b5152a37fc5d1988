#include "ibdr/models.hpp"

#include "ibdr/errors.hpp"
#include "ibdr/rng.hpp"

#include <algorithm>

namespace ibdr {

using Eigen::Index;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(ArchKind kind) { return kind == ArchKind::kMlp ? "mlp" : "lora"; }
std::string to_string(Activation act) { return act == Activation::kRelu ? "relu" : "tanh"; }

ArchKind parse_arch_kind(const std::string& s) {
  if (s == "mlp") return ArchKind::kMlp;
  if (s == "lora") return ArchKind::kLora;
  throw ConfigError("unknown model kind '" + s + "' (expected mlp or lora)");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + s + "' (expected relu or tanh)");
}

std::vector<Index> ArchSpec::layer_sizes() const {
  std::vector<Index> sizes;
  sizes.push_back(input_dim);
  sizes.insert(sizes.end(), hidden_dims.begin(), hidden_dims.end());
  sizes.push_back(num_classes);
  return sizes;
}

void ArchSpec::validate() const {
  if (input_dim < 1) throw ContractError("arch: input_dim must be positive");
  if (num_classes < 2) throw ContractError("arch: num_classes must be at least 2");
  for (Index h : hidden_dims) {
    if (h < 1) throw ContractError("arch: hidden dims must be positive");
  }
  if (kind == ArchKind::kLora) {
    const auto sizes = layer_sizes();
    Index limit = *std::min_element(sizes.begin(), sizes.end());
    if (rank < 1 || rank > limit) {
      throw ContractError("arch: lora rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) + "]");
    }
  }
}

Index backbone_param_count(const ArchSpec& arch) {
  const auto sizes = arch.layer_sizes();
  Index d = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) d += sizes[l] * sizes[l + 1] + sizes[l + 1];
  return d;
}

Index param_count(const ArchSpec& arch) {
  if (arch.kind == ArchKind::kMlp) return backbone_param_count(arch);
  const auto sizes = arch.layer_sizes();
  Index d = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) d += arch.rank * (sizes[l] + sizes[l + 1]);
  return d;
}

std::vector<DenseLayer> unflatten_dense(const Eigen::VectorXd& flat, const ArchSpec& arch) {
  if (flat.size() != backbone_param_count(arch)) {
    throw ParameterShapeError("dense parameters: expected " + std::to_string(backbone_param_count(arch)) +
                              " values, got " + std::to_string(flat.size()));
  }
  const auto sizes = arch.layer_sizes();
  std::vector<DenseLayer> layers;
  Index off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Index in = sizes[l], out = sizes[l + 1];
    DenseLayer layer;
    layer.weight = Eigen::Map<const RowMajor>(flat.data() + off, out, in);
    off += out * in;
    layer.bias = flat.segment(off, out);
    off += out;
    layers.push_back(std::move(layer));
  }
  return layers;
}

Eigen::VectorXd flatten_dense(const std::vector<DenseLayer>& layers) {
  Index d = 0;
  for (const auto& l : layers) d += l.weight.size() + l.bias.size();
  Eigen::VectorXd flat(d);
  Index off = 0;
  for (const auto& l : layers) {
    Eigen::Map<RowMajor>(flat.data() + off, l.weight.rows(), l.weight.cols()) = l.weight;
    off += l.weight.size();
    flat.segment(off, l.bias.size()) = l.bias;
    off += l.bias.size();
  }
  return flat;
}

std::vector<AdapterLayer> unflatten_adapters(const Eigen::VectorXd& flat, const ArchSpec& arch) {
  if (arch.kind != ArchKind::kLora) throw ContractError("adapters requested for a non-lora arch");
  if (flat.size() != param_count(arch)) {
    throw ParameterShapeError("adapter parameters: expected " + std::to_string(param_count(arch)) +
                              " values, got " + std::to_string(flat.size()));
  }
  const auto sizes = arch.layer_sizes();
  const Index r = arch.rank;
  std::vector<AdapterLayer> layers;
  Index off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Index in = sizes[l], out = sizes[l + 1];
    AdapterLayer layer;
    layer.a = Eigen::Map<const RowMajor>(flat.data() + off, r, in);
    off += r * in;
    layer.b = Eigen::Map<const RowMajor>(flat.data() + off, out, r);
    off += out * r;
    layers.push_back(std::move(layer));
  }
  return layers;
}

Eigen::VectorXd flatten_adapters(const std::vector<AdapterLayer>& layers) {
  Index d = 0;
  for (const auto& l : layers) d += l.a.size() + l.b.size();
  Eigen::VectorXd flat(d);
  Index off = 0;
  for (const auto& l : layers) {
    Eigen::Map<RowMajor>(flat.data() + off, l.a.rows(), l.a.cols()) = l.a;
    off += l.a.size();
    Eigen::Map<RowMajor>(flat.data() + off, l.b.rows(), l.b.cols()) = l.b;
    off += l.b.size();
  }
  return flat;
}

Eigen::VectorXd materialize_lora(const Eigen::VectorXd& backbone, const Eigen::VectorXd& adapters,
                                 const ArchSpec& arch) {
  auto dense = unflatten_dense(backbone, arch);
  const auto lora = unflatten_adapters(adapters, arch);
  for (std::size_t l = 0; l < dense.size(); ++l) dense[l].weight += lora[l].b * lora[l].a;
  return flatten_dense(dense);
}

Eigen::VectorXd init_dense(const ArchSpec& arch, std::uint64_t seed, double init_scale) {
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kBackbone));
  return init_scale * rng.normal_vector(backbone_param_count(arch));
}

ParticleSet init_particles(const ArchSpec& arch, std::size_t k, std::uint64_t seed, double init_scale,
                           double sigma, std::optional<Eigen::VectorXd> frozen_backbone) {
  arch.validate();
  if (k < 1) throw ContractError("init_particles: K must be at least 1");
  if (arch.kind == ArchKind::kLora) {
    if (!frozen_backbone) throw ContractError("init_particles: lora requires a frozen backbone");
    if (frozen_backbone->size() != backbone_param_count(arch)) {
      throw ParameterShapeError("init_particles: backbone has " + std::to_string(frozen_backbone->size()) +
                                " values, arch needs " + std::to_string(backbone_param_count(arch)));
    }
  }
  ParticleSet set;
  set.sigma = sigma;
  set.arch = arch;
  if (arch.kind == ArchKind::kLora) set.frozen_backbone = std::move(frozen_backbone);
  const Index d = param_count(arch);
  for (std::size_t i = 0; i < k; ++i) {
    CounterRng rng(seed ^ static_cast<std::uint64_t>(i), CounterRng::stream_id(rng_tag::kInit, i));
    Eigen::VectorXd mu = init_scale * rng.normal_vector(d);
    if (arch.kind == ArchKind::kLora) {
      auto layers = unflatten_adapters(mu, arch);
      for (auto& l : layers) l.b.setZero();
      mu = flatten_adapters(layers);
    }
    set.means.push_back(std::move(mu));
  }
  return set;
}

namespace {

ad::Tensor activate(const ad::Tensor& h, Activation act) {
  return act == Activation::kRelu ? ad::relu(h) : ad::tanh(h);
}

void check_params(Index got, const ArchSpec& arch, const Eigen::VectorXd* frozen) {
  if (got != param_count(arch)) {
    throw ParameterShapeError("forward: expected " + std::to_string(param_count(arch)) + " parameters, got " +
                              std::to_string(got));
  }
  if (arch.kind == ArchKind::kLora) {
    if (frozen == nullptr) throw ContractError("forward: lora arch needs a frozen backbone");
    if (frozen->size() != backbone_param_count(arch)) {
      throw ParameterShapeError("forward: backbone length " + std::to_string(frozen->size()) + ", expected " +
                                std::to_string(backbone_param_count(arch)));
    }
  }
}

}  // namespace

ad::Tensor forward(ad::Tape& tape, const ad::Tensor& params, const ArchSpec& arch, const Eigen::MatrixXd& x,
                   const Eigen::VectorXd* frozen) {
  if (params.cols() != 1) throw ParameterShapeError("forward: params must be a column vector");
  check_params(params.rows(), arch, frozen);
  if (x.cols() != arch.input_dim) {
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " features, arch expects " +
                         std::to_string(arch.input_dim));
  }
  const auto sizes = arch.layer_sizes();
  const std::size_t n_layers = sizes.size() - 1;
  ad::Tensor h = tape.constant(x);

  if (arch.kind == ArchKind::kMlp) {
    Index off = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Index in = sizes[l], out = sizes[l + 1];
      ad::Tensor w = ad::slice_reshape(params, off, out, in);
      off += out * in;
      ad::Tensor b = ad::slice_reshape(params, off, 1, out);
      off += out;
      h = ad::add_row(ad::matmul(h, ad::transpose(w)), b);
      if (l + 1 < n_layers) h = activate(h, arch.activation);
    }
    return h;
  }

  const auto base = unflatten_dense(*frozen, arch);
  const Index r = arch.rank;
  Index off = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Index in = sizes[l], out = sizes[l + 1];
    ad::Tensor a = ad::slice_reshape(params, off, r, in);
    off += r * in;
    ad::Tensor b = ad::slice_reshape(params, off, out, r);
    off += out * r;
    ad::Tensor w0t = tape.constant(base[l].weight.transpose());
    ad::Tensor bias = tape.constant(base[l].bias.transpose());
    // x·(W0 + B·A)ᵀ = x·W0ᵀ + (x·Aᵀ)·Bᵀ
    ad::Tensor low = ad::matmul(ad::matmul(h, ad::transpose(a)), ad::transpose(b));
    h = ad::add_row(ad::add(ad::matmul(h, w0t), low), bias);
    if (l + 1 < n_layers) h = activate(h, arch.activation);
  }
  return h;
}

Eigen::MatrixXd predict_logits(const Eigen::VectorXd& params, const ArchSpec& arch, const Eigen::MatrixXd& x,
                               const Eigen::VectorXd* frozen) {
  check_params(params.size(), arch, frozen);
  if (x.cols() != arch.input_dim) {
    throw DimensionError("predict_logits: input has " + std::to_string(x.cols()) + " features, arch expects " +
                         std::to_string(arch.input_dim));
  }
  const auto layers = unflatten_dense(arch.kind == ArchKind::kMlp ? params : *frozen, arch);
  std::vector<AdapterLayer> adapters;
  if (arch.kind == ArchKind::kLora) adapters = unflatten_adapters(params, arch);

  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXd z = h * layers[l].weight.transpose();
    if (!adapters.empty()) z += (h * adapters[l].a.transpose()) * adapters[l].b.transpose();
    z.rowwise() += layers[l].bias.transpose();
    if (l + 1 < layers.size()) {
      h = arch.activation == Activation::kRelu ? Eigen::MatrixXd(z.cwiseMax(0.0))
                                               : Eigen::MatrixXd(z.array().tanh().matrix());
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Eigen::VectorXd perturb(const Eigen::VectorXd& params, const Eigen::VectorXd& delta) {
  if (params.size() != delta.size()) {
    throw ParameterShapeError("perturb: lengths " + std::to_string(params.size()) + " and " +
                              std::to_string(delta.size()) + " differ");
  }
  return params + delta;
}

}  // namespace ibdr
