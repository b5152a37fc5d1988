#include "ibdr/checkpoint.hpp"

#include "ibdr/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ibdr {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "payloads are written in native little-endian order");

void write_doubles(const fs::path& path, const std::vector<const Eigen::VectorXd*>& blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write '" + path.string() + "'");
  for (const auto* v : blocks) {
    out.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("checkpoint: write failed for '" + path.string() + "'");
}

std::vector<double> read_doubles(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: missing '" + path.filename().string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() != expected * sizeof(double)) {
    throw CheckpointError("checkpoint: '" + path.filename().string() + "' has " + std::to_string(bytes.size()) +
                          " bytes, manifest implies " + std::to_string(expected * sizeof(double)));
  }
  std::vector<double> values(expected);
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

Json arch_json(const ArchSpec& a) {
  Json j;
  j["kind"] = to_string(a.kind);
  j["input_dim"] = a.input_dim;
  j["hidden"] = a.hidden_dims;
  j["num_classes"] = a.num_classes;
  j["rank"] = a.rank;
  j["activation"] = to_string(a.activation);
  return j;
}

ArchSpec arch_from_json(const Json& j) {
  ArchSpec a;
  a.kind = parse_arch_kind(j.at("kind").get<std::string>());
  a.input_dim = j.at("input_dim").get<Eigen::Index>();
  a.hidden_dims = j.at("hidden").get<std::vector<Eigen::Index>>();
  a.num_classes = j.at("num_classes").get<Eigen::Index>();
  a.rank = j.at("rank").get<Eigen::Index>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.validate();
  return a;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  const ParticleSet& ps = ckpt.particles;
  const auto d = static_cast<std::size_t>(param_count(ps.arch));
  for (const auto& mu : ps.means) {
    if (static_cast<std::size_t>(mu.size()) != d) throw CheckpointError("checkpoint: particle length disagrees with arch");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("checkpoint: cannot create '" + dir.string() + "': " + ec.message());

  Json m;
  m["format_version"] = kCheckpointFormatVersion;
  m["arch"] = arch_json(ps.arch);
  m["K"] = ps.size();
  m["d"] = d;
  m["sigma"] = ps.sigma;
  m["lambda"] = ckpt.lambda;
  m["step"] = ckpt.step;
  m["seed"] = ckpt.seed;
  m["config_hash"] = ckpt.config_hash;
  m["backbone_d"] = ps.frozen_backbone ? ps.frozen_backbone->size() : 0;

  std::vector<const Eigen::VectorXd*> blocks;
  for (const auto& mu : ps.means) blocks.push_back(&mu);
  write_doubles(dir / "particles.bin", blocks);
  if (ps.frozen_backbone) {
    write_doubles(dir / "backbone.bin", {&*ps.frozen_backbone});
  } else {
    fs::remove(dir / "backbone.bin", ec);
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  out << m.dump(2) << "\n";
  if (!out) throw CheckpointError("checkpoint: cannot write manifest in '" + dir.string() + "'");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: no manifest.json in '" + dir.string() + "'");
  Json m;
  try {
    m = Json::parse(in);
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  if (!m.contains("format_version") || !m["format_version"].is_number_integer()) {
    throw CheckpointError("checkpoint: manifest lacks format_version");
  }
  const int version = m["format_version"].get<int>();
  if (version != kCheckpointFormatVersion) {
    throw UnsupportedVersionError("checkpoint: format_version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointFormatVersion) + ")");
  }

  Checkpoint ckpt;
  std::size_t k = 0, d = 0, backbone_d = 0;
  try {
    ckpt.particles.arch = arch_from_json(m.at("arch"));
    k = m.at("K").get<std::size_t>();
    d = m.at("d").get<std::size_t>();
    backbone_d = m.at("backbone_d").get<std::size_t>();
    ckpt.particles.sigma = m.at("sigma").get<double>();
    ckpt.lambda = m.at("lambda").get<double>();
    ckpt.step = m.at("step").get<std::uint64_t>();
    ckpt.seed = m.at("seed").get<std::uint64_t>();
    ckpt.config_hash = m.at("config_hash").get<std::string>();
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest field: ") + e.what());
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint: bad arch: ") + e.what());
  }
  const ArchSpec& arch = ckpt.particles.arch;
  if (k == 0) throw CheckpointError("checkpoint: K must be positive");
  if (d != static_cast<std::size_t>(param_count(arch))) {
    throw CheckpointError("checkpoint: manifest d = " + std::to_string(d) + " but arch has " +
                          std::to_string(param_count(arch)) + " parameters");
  }
  const bool lora = arch.kind == ArchKind::kLora;
  if (lora != (backbone_d != 0) || (lora && backbone_d != static_cast<std::size_t>(backbone_param_count(arch)))) {
    throw CheckpointError("checkpoint: backbone_d disagrees with arch");
  }

  const std::vector<double> flat = read_doubles(dir / "particles.bin", k * d);
  for (std::size_t i = 0; i < k; ++i) {
    ckpt.particles.means.emplace_back(Eigen::Map<const Eigen::VectorXd>(flat.data() + i * d, static_cast<Eigen::Index>(d)));
  }
  if (lora) {
    const std::vector<double> bb = read_doubles(dir / "backbone.bin", backbone_d);
    ckpt.particles.frozen_backbone = Eigen::Map<const Eigen::VectorXd>(bb.data(), static_cast<Eigen::Index>(backbone_d));
  }
  return ckpt;
}

}  // namespace ibdr
