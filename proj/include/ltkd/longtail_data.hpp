#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ltkd/common.hpp"

namespace ltkd {

/// Exponentially decaying class-size profile: class i receives
/// round(max_count * imbalance_factor^(-i / (C - 1))) samples, at least one.
struct LongTailSpec {
  int num_classes = 10;
  int max_count = 5000;
  double imbalance_factor = 100.0;

  void validate() const;
};

std::vector<int> per_class_counts(const LongTailSpec& spec);

/// Labeled samples stored as an N x D_in matrix plus a label per row.
/// Construction validates labels, so per-class counts always agree with the
/// sample list.
class DatasetSplit {
 public:
  DatasetSplit() = default;
  DatasetSplit(Matrix inputs, std::vector<int> labels, int num_classes);

  const Matrix& inputs() const { return inputs_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& per_class_counts() const { return counts_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return labels_.size(); }
  Eigen::Index input_dim() const { return inputs_.cols(); }
  bool empty() const { return labels_.empty(); }

  /// Rows in the given order; labels follow.
  DatasetSplit select(std::span<const std::size_t> indices) const;

  /// Indices of the samples of each class, in storage order.
  std::vector<std::vector<std::size_t>> indices_by_class() const;

 private:
  Matrix inputs_;
  std::vector<int> labels_;
  std::vector<int> counts_;
  int num_classes_ = 0;
};

bool operator==(const DatasetSplit& lhs, const DatasetSplit& rhs);

/// Subsamples a balanced source down to the long-tailed profile of `spec`.
/// Within each class a uniformly random subset is kept; kept samples retain
/// their source order.
DatasetSplit subsample_longtail(const DatasetSplit& source, const LongTailSpec& spec,
                                std::uint64_t seed);

/// Gaussian-mixture stand-in for an image dataset.
struct SynthMixtureSpec {
  int num_classes = 10;
  int input_dim = 32;
  double class_separation = 3.0;
  double within_class_std = 1.0;
  std::vector<int> counts;  // training samples per class
  int test_per_class = 100;

  void validate() const;
};

struct TrainTestSplits {
  DatasetSplit train;
  DatasetSplit test;
};

/// Class means are `class_separation` times the columns of a seeded random
/// orthonormal frame (random unit directions when C > D_in). Train samples
/// are drawn first, then the balanced test set, from one seeded stream.
TrainTestSplits make_synthetic_mixture(const SynthMixtureSpec& spec, std::uint64_t seed);

/// Seeded instance sampling: every epoch is one shuffle of all samples cut
/// into consecutive batches, the last one possibly short.
class InstanceSampler {
 public:
  InstanceSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  InstanceSampler(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed)
      : InstanceSampler(split.size(), batch_size, seed) {}

  std::vector<std::vector<std::size_t>> next_epoch();

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  Rng rng_;
};

/// Draws a class uniformly, then an instance of that class uniformly (with
/// replacement), for every slot of every batch.
class ClassBalancedSampler {
 public:
  ClassBalancedSampler(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> next_batch();

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t batch_size_;
  Rng rng_;
};

/// Inputs and labels gathered for one batch of indices.
struct Batch {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

Batch gather_batch(const DatasetSplit& split, std::span<const std::size_t> indices);

// On-disk layout: <stem>.json manifest + <stem>.bin samples. Each record in
// the binary file is an int32 label followed by D_in float64 values, all
// little-endian. The manifest carries counts, seed and the generating spec.
struct SplitManifestInfo {
  std::uint64_t seed = 0;
  nlohmann::json spec = nlohmann::json::object();
};

void save_split(const DatasetSplit& split, const std::filesystem::path& manifest_path,
                const SplitManifestInfo& info = {});
DatasetSplit load_split(const std::filesystem::path& manifest_path,
                        SplitManifestInfo* info = nullptr);

nlohmann::json to_json(const LongTailSpec& spec);
nlohmann::json to_json(const SynthMixtureSpec& spec);

}  // namespace ltkd
