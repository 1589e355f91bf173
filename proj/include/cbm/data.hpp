#pragma once

// Dataset sources (synthetic generator, CUB-200-2011 attributes) and the versioned text
// formats for datasets and model checkpoints.

#include "cbm/core.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <utility>
#include <vector>

namespace cbm {

inline constexpr int kFormatVersion = 1;
inline constexpr std::size_t kCubAttributeCount = 312;

struct SyntheticConfig {
  std::size_t num_concepts = 20;   // K
  std::size_t num_classes = 5;     // C
  std::size_t feature_dim = 32;    // d
  std::size_t n_per_class = 125;
  double sharpness = 0.9;          // probability a sample bit agrees with its class prototype
  double feature_noise_std = 0.1;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

/// Class prototypes in {0,1}^K, per-sample bit flips with probability 1 - sharpness, and
/// features x = M c* + noise for one fixed random map M. Split per class, deterministic in seed.
SplitDataset synth_generate(const SyntheticConfig& cfg);

/// Per-class split keeping round(fraction * n_class) samples of each class for training.
SplitDataset stratified_split(const Dataset& d, double train_fraction, std::uint64_t seed);

struct CubIngestConfig {
  std::filesystem::path root;
  std::vector<int> class_ids = default_class_ids();
  double train_fraction = 0.8;  // used by stratified_split when the official split is not wanted

  static std::vector<int> default_class_ids();  // 1..15
  void validate() const;
};

struct CubIngestResult {
  Dataset dataset;                   // samples sorted by image id
  std::vector<int> image_ids;        // parallel to dataset.samples
  std::vector<bool> official_train;  // parallel to dataset.samples, from train_test_split.txt
  std::size_t malformed_rows = 0;    // attribute rows skipped as unparsable
};

/// Reads the CUB-200-2011 layout under cfg.root. Only images of the selected classes are
/// kept; labels are re-indexed in ascending class-id order. Certainty ids are ignored.
CubIngestResult cub_ingest(const CubIngestConfig& cfg);

/// Splits an ingestion result by the official train/test flag.
SplitDataset official_split(const CubIngestResult& r);

void dataset_save(std::ostream& out, const Dataset& d);
void dataset_save(const std::filesystem::path& path, const Dataset& d);
Dataset dataset_load(std::istream& in);
Dataset dataset_load(const std::filesystem::path& path);

struct Checkpoint {
  std::optional<LinearConceptPredictor> predictor;
  LinearHead head;
  std::optional<double> lambda_s;  // stability weight the model was trained with, if known

  bool operator==(const Checkpoint& other) const;
};

void model_save(std::ostream& out, const Checkpoint& m);
void model_save(const std::filesystem::path& path, const Checkpoint& m);
Checkpoint model_load(std::istream& in);
Checkpoint model_load(const std::filesystem::path& path);

/// Shortest decimal form that parses back to the same double; nan and inf are written as words.
std::string format_double(double v);
/// Parses a full token as a double. Throws FormatError carrying `line`.
double parse_double(std::string_view token, std::size_t line = 0);

}  // namespace cbm
