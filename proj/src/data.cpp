#include "ibdr/data.hpp"

#include "ibdr/errors.hpp"
#include "ibdr/rng.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace ibdr {

using Eigen::Index;

void Dataset::validate() const {
  if (labels.empty()) throw ContractError("dataset '" + name + "' is empty");
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ContractError("dataset '" + name + "': " + std::to_string(features.rows()) + " feature rows for " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ContractError("dataset '" + name + "': label " + std::to_string(y) + " out of range");
  }
  if (!features.allFinite()) throw ContractError("dataset '" + name + "' has non-finite features");
}

Dataset gen_blobs(std::size_t n, int num_classes, Index input_dim, double spread, std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("gen_blobs: need at least 2 classes");
  if (input_dim < 1) throw ContractError("gen_blobs: input_dim must be positive");
  if (n == 0 || n % static_cast<std::size_t>(num_classes) != 0) {
    throw ContractError("gen_blobs: n = " + std::to_string(n) + " is not a positive multiple of " +
                        std::to_string(num_classes) + " classes");
  }
  CounterRng centers(seed, CounterRng::stream_id(rng_tag::kData, 0));
  Eigen::MatrixXd means(num_classes, input_dim);
  for (int c = 0; c < num_classes; ++c) {
    Eigen::VectorXd g = centers.normal_vector(input_dim);
    means.row(c) = 3.0 * g.normalized().transpose();
  }
  CounterRng noise(seed, CounterRng::stream_id(rng_tag::kData, 1));
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = num_classes;
  ds.features.resize(static_cast<Index>(n), input_dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    ds.labels[i] = c;
    ds.features.row(static_cast<Index>(i)) = means.row(c) + spread * noise.normal_vector(input_dim).transpose();
  }
  return ds;
}

Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw ContractError("gen_two_moons: n = " + std::to_string(n) + " must be positive and even");
  const std::size_t half = n / 2;
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kData, 2));
  Dataset ds;
  ds.name = "moons";
  ds.num_classes = 2;
  ds.features.resize(static_cast<Index>(n), 2);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < half; ++i) {
    const double t = half > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    ds.features.row(static_cast<Index>(i)) << std::cos(t), std::sin(t);
    ds.labels[i] = 0;
    ds.features.row(static_cast<Index>(half + i)) << 1.0 - std::cos(t), 0.5 - std::sin(t);
    ds.labels[half + i] = 1;
  }
  if (noise > 0.0) {
    for (Index i = 0; i < ds.features.rows(); ++i) {
      ds.features(i, 0) += noise * rng.normal();
      ds.features(i, 1) += noise * rng.normal();
    }
  }
  return ds;
}

// ---- CSV -----------------------------------------------------------------

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* end = t.data() + t.size();
  auto res = std::from_chars(t.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw IngestionError("load_csv: cannot open '" + path.string() + "'");

  std::vector<std::vector<double>> rows;
  std::vector<std::string> header;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    std::vector<double> values(fields.size());
    bool numeric = true;
    for (std::size_t j = 0; j < fields.size(); ++j) numeric = numeric && parse_double(fields[j], values[j]);
    if (!numeric) {
      if (rows.empty() && header.empty()) {
        for (auto& f : fields) header.push_back(trim(f));
        width = header.size();
        continue;
      }
      throw IngestionError("load_csv: non-numeric value on line " + std::to_string(line_no) + " of '" +
                           path.string() + "'");
    }
    if (width == 0) width = values.size();
    if (values.size() != width) {
      throw IngestionError("load_csv: line " + std::to_string(line_no) + " has " + std::to_string(values.size()) +
                           " fields, expected " + std::to_string(width));
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw IngestionError("load_csv: no data rows in '" + path.string() + "'");
  if (width < 2) throw IngestionError("load_csv: need at least one feature and a label column");

  std::size_t label_idx = width - 1;
  if (label_column != "last") {
    auto it = std::find(header.begin(), header.end(), label_column);
    if (it != header.end()) {
      label_idx = static_cast<std::size_t>(it - header.begin());
    } else {
      std::size_t idx = 0;
      auto res = std::from_chars(label_column.data(), label_column.data() + label_column.size(), idx);
      if (res.ec != std::errc() || res.ptr != label_column.data() + label_column.size() || idx >= width) {
        throw IngestionError("load_csv: label column '" + label_column + "' not found");
      }
      label_idx = idx;
    }
  }

  Dataset ds;
  ds.name = path.filename().string();
  ds.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(width - 1));
  ds.labels.resize(rows.size());
  int max_label = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double lv = rows[i][label_idx];
    if (lv < 0 || std::floor(lv) != lv) {
      throw IngestionError("load_csv: label '" + std::to_string(lv) + "' on data row " + std::to_string(i + 1) +
                           " is not a nonnegative integer");
    }
    ds.labels[i] = static_cast<int>(lv);
    max_label = std::max(max_label, ds.labels[i]);
    for (std::size_t j = 0, c = 0; j < width; ++j) {
      if (j != label_idx) ds.features(static_cast<Index>(i), static_cast<Index>(c++)) = rows[i][j];
    }
  }
  ds.num_classes = max_label + 1;
  return ds;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("write_csv: cannot open '" + path.string() + "'");
  for (Index j = 0; j < ds.features.cols(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (Index i = 0; i < ds.features.rows(); ++i) {
    for (Index j = 0; j < ds.features.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
      out << buf << ',';
    }
    out << ds.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

// ---- IDX -----------------------------------------------------------------

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("load_idx: cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw FormatError("load_idx: '" + path.string() + "' truncated in header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  const std::uint32_t img_magic = be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw FormatError("load_idx: image magic expected " + hex(kIdxImageMagic) + ", got " + hex(img_magic));
  }
  const std::uint32_t lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw FormatError("load_idx: label magic expected " + hex(kIdxLabelMagic) + ", got " + hex(lab_magic));
  }
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t n_labels = be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("load_idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n * pixels) throw FormatError("load_idx: image payload truncated");
  if (lab.size() < 8 + n) throw FormatError("load_idx: label payload truncated");
  if (n == 0 || pixels == 0) throw FormatError("load_idx: empty dataset");

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.features.resize(static_cast<Index>(n), static_cast<Index>(pixels));
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      ds.features(static_cast<Index>(i), static_cast<Index>(p)) = img[16 + i * pixels + p] / 255.0;
    }
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::max(2, max_label + 1);
  return ds;
}

// ---- shifts and splits ---------------------------------------------------

ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "gaussian_noise") return ShiftKind::kGaussianNoise;
  if (s == "mean_shift") return ShiftKind::kMeanShift;
  if (s == "label_subset") return ShiftKind::kLabelSubset;
  throw ContractError("unknown shift kind '" + s + "' (expected gaussian_noise, mean_shift or label_subset)");
}

std::string to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::kGaussianNoise: return "gaussian_noise";
    case ShiftKind::kMeanShift: return "mean_shift";
    case ShiftKind::kLabelSubset: return "label_subset";
  }
  return "unknown";
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.name = ds.name;
  out.num_classes = ds.num_classes;
  out.features.resize(static_cast<Index>(rows.size()), ds.features.cols());
  out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = ds.features.row(static_cast<Index>(rows[i]));
    out.labels[i] = ds.labels[rows[i]];
  }
  return out;
}

Dataset shift_transform(const Dataset& ds, ShiftKind kind, double magnitude, std::uint64_t seed,
                        std::span<const int> classes) {
  if (!(magnitude >= 0.0)) throw ContractError("shift_transform: magnitude must be nonnegative");
  if (magnitude == 0.0 && classes.empty()) return ds;

  Dataset out = ds;
  out.name = ds.name + "+" + to_string(kind);
  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kData, 3, static_cast<std::uint64_t>(kind)));
  switch (kind) {
    case ShiftKind::kGaussianNoise: {
      const Eigen::RowVectorXd mean = ds.features.colwise().mean();
      const double denom = std::max<double>(1.0, static_cast<double>(ds.features.rows()) - 1.0);
      const Eigen::RowVectorXd sd =
          ((ds.features.rowwise() - mean).array().square().colwise().sum() / denom).sqrt().matrix();
      for (Index i = 0; i < out.features.rows(); ++i) {
        for (Index j = 0; j < out.features.cols(); ++j) out.features(i, j) += magnitude * sd[j] * rng.normal();
      }
      break;
    }
    case ShiftKind::kMeanShift: {
      const Eigen::VectorXd u = rng.normal_vector(ds.features.cols()).normalized();
      out.features.rowwise() += magnitude * u.transpose();
      break;
    }
    case ShiftKind::kLabelSubset: {
      std::vector<int> keep(classes.begin(), classes.end());
      if (keep.empty()) {
        const int dropped = static_cast<int>(std::lround(magnitude));
        for (int c = 0; c < ds.num_classes - dropped; ++c) keep.push_back(c);
      }
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (std::find(keep.begin(), keep.end(), ds.labels[i]) != keep.end()) rows.push_back(i);
      }
      if (rows.empty()) throw ContractError("shift_transform: label_subset removed every row");
      out = subset(ds, rows);
      out.name = ds.name + "+label_subset";
      break;
    }
  }
  return out;
}

std::vector<Dataset> split(const Dataset& ds, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) throw ContractError("split: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ContractError("split: fractions must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-9) throw ContractError("split: fractions sum to " + std::to_string(total) + " > 1");
  const std::size_t n = ds.size();
  std::vector<std::size_t> sizes;
  std::size_t assigned = 0;
  for (double f : fractions) {
    sizes.push_back(static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)));
    assigned += sizes.back();
  }
  const auto selected = std::min(n, static_cast<std::size_t>(std::floor(static_cast<double>(n) * total + 1e-9)));
  sizes.front() += selected - assigned;

  CounterRng rng(seed, CounterRng::stream_id(rng_tag::kData, 4));
  const auto perm = rng.permutation(n);
  std::vector<Dataset> parts;
  std::size_t off = 0;
  for (std::size_t s : sizes) {
    std::span<const std::size_t> rows(perm.data() + off, s);
    parts.push_back(subset(ds, rows));
    off += s;
  }
  return parts;
}

}  // namespace ibdr
