#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltkd/longtail_data.hpp"
#include "ltkd/losses.hpp"
#include "ltkd/model.hpp"
#include "ltkd/training.hpp"

namespace ltkd {

/// Where training/test splits come from.
///   synthetic  - Gaussian mixture drawn directly with long-tailed counts
///   subsampled - balanced mixture of max_count per class, then exponential
///                long-tail subsampling
///   files      - splits saved with save_split()
enum class DatasetKind { synthetic, subsampled, files };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  LongTailSpec longtail{10, 500, 100.0};
  int input_dim = 32;
  double class_separation = 3.0;
  double within_class_std = 1.0;
  int test_per_class = 100;
  std::uint64_t seed = 0;
  std::string train_manifest;
  std::string test_manifest;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  BackboneSpec backbone;  // input_dim / num_classes follow the dataset
  std::vector<InsertionPoint> insertion_points;  // empty: baseline only, no teacher
  ResidualOptions residual;
  LossSpec loss;
  ScheduleConfig stage1;
  DistillConfig distill;
  ScheduleConfig stage2;
  std::optional<ScheduleConfig> baseline;  // defaults to stage2
  GroupThresholds groups;
  std::string output_dir;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  const ScheduleConfig& baseline_schedule() const { return baseline ? *baseline : stage2; }
  /// Column label of this run in comparison tables, e.g. "IF=100".
  std::string dataset_label() const;
};

/// Either a complete config (every default filled in) or the full list of
/// problems found, each prefixed with its field path.
struct ConfigResult {
  std::optional<ExperimentConfig> config;
  std::vector<std::string> errors;
  bool ok() const { return config.has_value(); }
};

ConfigResult parse_config(const std::string& text);
ConfigResult validate_config(const std::filesystem::path& path);
ConfigResult config_from_json(const nlohmann::json& j);

/// Fully explicit form; parse_config(to_json(c).dump()) reproduces c.
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const ScheduleConfig& sched);

/// Digest of the explicit config with output_dir removed.
std::string config_digest(const ExperimentConfig& config);

}  // namespace ltkd
