#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltkd/config.hpp"
#include "ltkd/training.hpp"

namespace ltkd {

struct Datasets {
  DatasetSplit train;
  DatasetSplit test;
};

/// Builds (or loads) the train/test splits a config describes.
Datasets build_datasets(const ExperimentConfig& config);

struct StageFailure {
  std::string stage;
  std::uint64_t seed = 0;
  std::string message;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::optional<MetricsRecord> baseline;  // final test metrics
  std::optional<MetricsRecord> ours;
  std::optional<double> delta() const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
  int count = 0;
};

MeanStd mean_std(const std::vector<double>& values);

/// Baseline versus one transfer method over the declared seeds. Built only
/// from persisted metrics files.
struct RunSummary {
  std::string config_digest;
  std::string row_label;     // loss label, e.g. "CE"
  std::string column_label;  // dataset label, e.g. "IF=100"
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::vector<SeedResult> per_seed;
  std::optional<MeanStd> baseline;
  std::optional<MeanStd> ours;
  std::optional<double> delta;  // mean(ours) - mean(baseline)
  std::vector<StageFailure> failures;

  bool complete() const { return failures.empty() && baseline && ours; }
};

nlohmann::json to_json(const RunSummary& summary);
RunSummary summary_from_json(const nlohmann::json& j);

struct RunOptions {
  bool overwrite = false;
  int jobs = 1;                  // seeds processed concurrently
  std::ostream* log = nullptr;   // progress lines
};

/// Baseline, teacher and student training for every seed.
///
/// Layout of the run directory (append-only):
///   config.json                       explicit config snapshot
///   seed_<s>/<stage>/history.jsonl    one MetricsRecord per line
///   seed_<s>/<stage>/final.jsonl      final test MetricsRecord
///   seed_<s>/<stage>/model.ckpt       final checkpoint (+ epoch_<e>.ckpt)
///   seed_<s>/student_<method>/...     one directory per transfer method
///   failures.jsonl                    stage failures, if any
///   summary.json, summary.txt         aggregate, rebuilt from the files above
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                          const RunOptions& options = {});

/// Like run_experiment but trains all three transfer methods against one
/// shared baseline and teacher per seed. Summaries are ordered decouple,
/// high_conf_kernels, from_scratch.
std::vector<RunSummary> run_method_comparison(const ExperimentConfig& config,
                                              const std::filesystem::path& out_dir,
                                              const RunOptions& options = {});

/// Rebuilds the summary of `method` from a run directory's persisted files.
RunSummary load_run_summary(const std::filesystem::path& run_dir,
                            std::optional<TransferMethod> method = std::nullopt);

// ---------------------------------------------------------------------------
// Reports

enum class TableFormat { plain, csv, markdown };
TableFormat parse_table_format(const std::string& s);

/// "+4.03" style signed gain with two decimals; rounding to zero prints "+0.00".
std::string format_gain(double gain_points);

/// Rows = loss labels, columns = dataset labels; each cell shows
/// baseline, ours and the signed gain in accuracy points. Every row must
/// cover the same set of columns.
std::string emit_comparison_table(const std::vector<RunSummary>& summaries, TableFormat format);

/// Baseline plus one row per transfer method with accuracy and gain.
std::string emit_method_table(const std::vector<RunSummary>& summaries, TableFormat format);

struct PlacementRow {
  std::vector<InsertionPoint> placement;  // empty: no residual layer (baseline)
  MeanStd accuracy;
  std::string run_dir;
};

struct PlacementReport {
  int num_blocks = 0;
  std::vector<PlacementRow> rows;
  std::vector<std::string> warnings;
};

/// Runs the full pipeline (teacher + from-scratch student) once per distinct
/// placement set. An empty set reports the baseline.
PlacementReport ablation_gn_placement(const ExperimentConfig& config,
                                      const std::vector<std::vector<InsertionPoint>>& placements,
                                      const std::filesystem::path& out_dir, const RunOptions& options = {});

std::string emit_placement_table(const PlacementReport& report, TableFormat format);

}  // namespace ltkd
