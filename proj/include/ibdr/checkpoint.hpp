#pragma once

// On-disk layout of a trained ensemble:
//   manifest.json   format_version, arch, K, d, sigma, lambda, step, seed, config_hash
//   particles.bin   K·d little-endian float64, particle-major
//   backbone.bin    frozen dense weights, lora only

#include "ibdr/models.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace ibdr {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ParticleSet particles;
  double lambda = 0.0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);

/// Throws UnsupportedVersionError for a foreign format_version and
/// CheckpointError for any other missing or inconsistent piece.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ibdr
