#pragma once

// Stability-weight sweeps, phase-transition detection, report serialization and the CLI.

#include "cbm/data.hpp"
#include "cbm/metrics.hpp"
#include "cbm/spectra.hpp"
#include "cbm/transfer.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cbm {

struct DataSource {
  enum class Kind { synthetic, files, cub };
  Kind kind = Kind::synthetic;
  SyntheticConfig synthetic;
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  CubIngestConfig cub;
  bool cub_official_split = true;  // otherwise stratified_split with cub.train_fraction
};

struct SweepConfig {
  std::vector<double> lambda_grid;
  TrainConfig train;
  LossWeights weights;  // lambda_s_max is replaced by each grid value
  DataSource data;
  int parallel_runs = 1;
  std::optional<double> reference_lambda;  // externally reported critical point, if any

  void validate() const;
};

struct SweepRow {
  double lambda_s = 0.0;
  double accuracy = 0.0;
  double mean_attackability = 0.0;
  double mean_rel_pert_norm = 0.0;
  double sparsity = 0.0;
  double mean_stability_loss = 0.0;  // final-epoch training mean
  double bound_lhs = 0.0;
  double bound_rhs = 0.0;
  bool bound_holds = true;
  std::string status = "ok";

  bool operator==(const SweepRow& other) const;
};

struct PhaseTransition {
  std::optional<double> critical_lambda;  // empty: none detected
  double max_ratio = 0.0;
  std::optional<double> reference_lambda;
  bool diverges_from_reference = false;
  std::string note;

  bool operator==(const PhaseTransition& other) const;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  PhaseTransition transition;

  bool all_ok() const;
  bool operator==(const SweepReport& other) const;
};

inline constexpr double kDropRatioFloor = 1e-12;
inline constexpr double kDropRatioThreshold = 2.0;

/// Picks the grid value with the largest consecutive attackability drop ratio
/// A(lambda_{i-1}) / max(A(lambda_i), floor) over rows with finite attackability. Reports
/// none when that ratio is below `threshold`. Throws MetricError with fewer than 2 usable rows.
PhaseTransition detect_phase_transition(const SweepReport& report, std::optional<double> reference_lambda = std::nullopt,
                                        double floor = kDropRatioFloor, double threshold = kDropRatioThreshold);

/// Loads the train/test pair described by a data source.
SplitDataset resolve_data(const DataSource& source);

/// Trains and evaluates one model for a single stability weight.
SweepRow evaluate_lambda(const SplitDataset& data, double lambda_s, const LossWeights& weights, const TrainConfig& cfg);

/// One training run per grid value, all with the same seed; rows are assembled in grid order
/// regardless of `parallel_runs`.
SweepReport run_sweep(const SweepConfig& cfg);
SweepReport run_sweep(const SweepConfig& cfg, const SplitDataset& data);

void write_sweep_csv(std::ostream& out, const SweepReport& report);
SweepReport read_sweep_csv(std::istream& in);
std::string sweep_to_json(const SweepReport& report);
SweepReport sweep_from_json(const std::string& text);

/// Config parsing. Relative paths resolve against `base_dir`.
SweepConfig sweep_config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
SyntheticConfig synthetic_config_from_json(const std::string& text);
void train_config_from_json(const std::string& text, TrainConfig& cfg, LossWeights& weights);

/// Entry point behind the `cbmguard` executable. Returns 0 on success, 1 on usage errors and
/// 2 on runtime errors.
int cli_main(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int cli_main(int argc, const char* const* argv);

}  // namespace cbm
