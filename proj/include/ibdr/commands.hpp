#pragma once

// Command implementations behind the ibdr executable. Each returns a process
// exit code and writes diagnostics to `err`.

#include "ibdr/config.hpp"
#include "ibdr/metrics.hpp"
#include "ibdr/optimizer.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ibdr {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;
inline constexpr int kDivergence = 3;
inline constexpr int kCheckpoint = 4;
inline constexpr int kGradCheck = 5;
}  // namespace exit_code

struct RunResult {
  TrainState state;
  std::vector<MetricsReport> history;  // train and test rows per evaluation
};

/// Fresh particles for `cfg` on data shaped like `train`. For lora the
/// backbone is a seeded dense network, optionally fitted to `train` first.
ParticleSet initial_particles(const RunConfig& cfg, const Dataset& train);

/// Trains from scratch and evaluates both splits at step 0, every
/// `eval.every_epochs` epochs, and after the last epoch. `out` holds the
/// rows recorded so far if a NumericDivergenceError escapes.
void run_training(const RunConfig& cfg, const Dataset& train, const Dataset& test, RunResult& out);

inline constexpr const char* kMetricsHeader = "step,split,loss,acc,ece,nll,volume,lambda";
std::string metrics_row(const MetricsReport& r);

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::optional<std::uint64_t> seed, std::ostream& err);
int cmd_eval(const std::filesystem::path& checkpoint_dir, const std::string& data_spec,
             const std::filesystem::path& out_path, std::ostream& err);
int cmd_ood_scan(const std::filesystem::path& checkpoint_dir, const std::string& in_spec, const std::string& ood_spec,
                 const std::string& thresholds, const std::filesystem::path& out_csv, std::ostream& err);
/// `values` is a comma list; an empty optional selects the parameter's default grid.
int cmd_sweep(const std::filesystem::path& config_path, const std::string& param,
              const std::optional<std::string>& values, const std::filesystem::path& out_csv, std::ostream& err);
int cmd_grad_check(std::uint64_t seed, double tolerance, std::ostream& out);

}  // namespace ibdr
