#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ibdr {

struct Dataset {
  Eigen::MatrixXd features;  // n x input_dim
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Eigen::Index input_dim() const { return features.cols(); }
  /// Throws ContractError when labels/features disagree or fall out of range.
  void validate() const;
};

/// Class means on a seeded random sphere of radius 3; points are
/// mean + spread·N(0, I) with exactly n / num_classes points per class.
Dataset gen_blobs(std::size_t n, int num_classes, Eigen::Index input_dim, double spread, std::uint64_t seed);

/// Two interleaving unit half-circles with Gaussian noise, n / 2 per class.
Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed);

/// `label_column` is a header name, a zero-based index, or "last".
/// A first line that does not parse as numbers is treated as a header.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column = "last");
/// Features as f0..f{d-1}, then a trailing "label" column; values printed
/// with 17 significant digits so reading back is exact.
void write_csv(const Dataset& ds, const std::filesystem::path& path);

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Big-endian IDX images (u8, n x rows x cols) and labels (u8, n).
/// Pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

enum class ShiftKind { kGaussianNoise, kMeanShift, kLabelSubset };
ShiftKind parse_shift_kind(const std::string& s);
std::string to_string(ShiftKind kind);

/// Deterministic corruptions for out-of-distribution experiments.
///   gaussian_noise: x + magnitude·s_j·ξ with s_j the feature's sample std,
///                   so magnitude 1 doubles each feature's variance;
///   mean_shift:     x + magnitude·u along a seeded random unit direction u;
///   label_subset:   keeps rows whose label is in `classes`, or when `classes`
///                   is empty, drops the top round(magnitude) class ids.
/// Magnitude 0 (and no class list) returns an identical copy.
Dataset shift_transform(const Dataset& ds, ShiftKind kind, double magnitude, std::uint64_t seed,
                        std::span<const int> classes = {});

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows);

/// Seeded permutation, then contiguous slices of floor(n·f) rows each; the
/// rounding remainder goes to the first slice.
std::vector<Dataset> split(const Dataset& ds, std::span<const double> fractions, std::uint64_t seed);

}  // namespace ibdr
