#pragma once

// Run configuration: a JSON document with sections model, train, data, eval
// and output. Every key is optional, unknown keys are errors, and the
// resolved form echoes every effective value.
//
// Data specs are also accepted as one-line strings for the CLI:
//   blobs:n=800,classes=8,dim=8,spread=1.0,seed=0,part=test,shift=mean_shift,magnitude=4
//   moons:n=400,noise=0.1
//   csv:path=data.csv,label=last
//   idx:images=train-images.idx,labels=train-labels.idx

#include "ibdr/data.hpp"
#include "ibdr/models.hpp"
#include "ibdr/optimizer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ibdr {

enum class DataPart { kAll, kTrain, kTest };

struct DataSpec {
  std::string kind = "blobs";  // blobs | moons | csv | idx
  std::size_t n = 800;
  int classes = 8;
  Eigen::Index dim = 8;
  double spread = 1.0;
  double noise = 0.1;
  std::uint64_t seed = 0;
  double test_fraction = 0.25;  // held-out share, split with `seed`
  std::string path;
  std::string label_column = "last";
  std::string images;
  std::string labels;
  DataPart part = DataPart::kAll;
  std::optional<ShiftKind> shift;
  double magnitude = 0.0;
  std::vector<int> shift_classes;

  void validate(const std::string& where) const;
};

DataSpec parse_data_spec(const std::string& text);

/// Generates or reads the dataset, splits it and returns both halves.
struct TrainTest {
  Dataset train;
  Dataset test;
};
TrainTest load_train_test(const DataSpec& spec);
/// The part selected by `spec.part`, with the shift applied.
Dataset load_data(const DataSpec& spec);

struct ModelConfig {
  ArchKind kind = ArchKind::kMlp;
  std::vector<Eigen::Index> hidden{16};
  Activation activation = Activation::kRelu;
  Eigen::Index rank = 2;
  double init_scale = 0.1;
  std::size_t backbone_epochs = 0;  // lora: SGD epochs on the backbone before adapters
  Eigen::Index input_dim = 0;        // 0: taken from the data
  Eigen::Index num_classes = 0;      // 0: taken from the data
};

struct EvalSettings {
  int ece_bins = 15;
  bool eval_sample = false;
  std::size_t every_epochs = 1;
  std::string thresholds = "0:1:0.05";  // start:stop:step
  std::string ood_data;                 // optional spec scanned against the test split
};

struct RunConfig {
  ModelConfig model;
  IBDRConfig train;
  DataSpec data;
  EvalSettings eval;
  std::string output_dir;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
  /// Architecture for datasets with the given shape; explicit model dims must agree.
  ArchSpec arch_for(Eigen::Index input_dim, int num_classes) const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Pretty-printed JSON with every effective value.
std::string resolved_json(const RunConfig& cfg);

/// Ascending grid from "start:stop:step"; stop is included when it lies on the grid.
std::vector<double> parse_threshold_grid(const std::string& text);

/// FNV-1a 64-bit, as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace ibdr
