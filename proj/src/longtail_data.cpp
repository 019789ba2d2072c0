#include "ltkd/longtail_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace ltkd {

static_assert(std::endian::native == std::endian::little,
              "split serialization assumes a little-endian host");

void LongTailSpec::validate() const {
  if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
  if (max_count < 1) throw ValidationError("max_count must be >= 1");
  if (!(imbalance_factor >= 1.0) || !std::isfinite(imbalance_factor))
    throw ValidationError("imbalance_factor must be >= 1");
}

std::vector<int> per_class_counts(const LongTailSpec& spec) {
  spec.validate();
  std::vector<int> counts(spec.num_classes);
  const double last = spec.num_classes - 1;
  for (int i = 0; i < spec.num_classes; ++i) {
    const double n = spec.max_count * std::pow(spec.imbalance_factor, -i / last);
    counts[i] = std::max(1, static_cast<int>(std::lround(n)));
  }
  return counts;
}

DatasetSplit::DatasetSplit(Matrix inputs, std::vector<int> labels, int num_classes)
    : inputs_(std::move(inputs)), labels_(std::move(labels)), num_classes_(num_classes) {
  if (num_classes_ < 1) throw ValidationError("num_classes must be >= 1");
  if (static_cast<std::size_t>(inputs_.rows()) != labels_.size())
    throw ValidationError("input rows (" + std::to_string(inputs_.rows()) +
                          ") do not match label count (" + std::to_string(labels_.size()) + ")");
  counts_.assign(num_classes_, 0);
  for (std::size_t j = 0; j < labels_.size(); ++j) {
    const int y = labels_[j];
    if (y < 0 || y >= num_classes_)
      throw ValidationError("label " + std::to_string(y) + " at sample " + std::to_string(j) +
                            " outside [0, " + std::to_string(num_classes_) + ")");
    ++counts_[y];
  }
}

DatasetSplit DatasetSplit::select(std::span<const std::size_t> indices) const {
  Matrix rows(static_cast<Eigen::Index>(indices.size()), inputs_.cols());
  std::vector<int> labels(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    rows.row(static_cast<Eigen::Index>(r)) = inputs_.row(static_cast<Eigen::Index>(indices[r]));
    labels[r] = labels_.at(indices[r]);
  }
  return DatasetSplit(std::move(rows), std::move(labels), num_classes_);
}

std::vector<std::vector<std::size_t>> DatasetSplit::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(num_classes_);
  for (std::size_t j = 0; j < labels_.size(); ++j) out[labels_[j]].push_back(j);
  return out;
}

bool operator==(const DatasetSplit& lhs, const DatasetSplit& rhs) {
  if (lhs.num_classes() != rhs.num_classes() || lhs.labels() != rhs.labels()) return false;
  const auto& a = lhs.inputs();
  const auto& b = rhs.inputs();
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

DatasetSplit subsample_longtail(const DatasetSplit& source, const LongTailSpec& spec,
                                std::uint64_t seed) {
  const auto target = per_class_counts(spec);
  if (source.num_classes() != spec.num_classes)
    throw ValidationError("source has " + std::to_string(source.num_classes()) +
                          " classes, spec expects " + std::to_string(spec.num_classes));
  auto by_class = source.indices_by_class();
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < static_cast<std::size_t>(target[c]))
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                            " source samples, needs " + std::to_string(target[c]));
    // Partial Fisher-Yates: the first target[c] slots become a uniform subset.
    for (std::size_t i = 0; i < static_cast<std::size_t>(target[c]); ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + target[c]);
  }
  std::sort(keep.begin(), keep.end());
  return source.select(keep);
}

void SynthMixtureSpec::validate() const {
  if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
  if (input_dim < 1) throw ValidationError("input_dim must be >= 1");
  if (!(class_separation > 0.0)) throw ValidationError("class_separation must be > 0");
  if (!(within_class_std > 0.0)) throw ValidationError("within_class_std must be > 0");
  if (counts.size() != static_cast<std::size_t>(num_classes))
    throw ValidationError("counts must have one entry per class");
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] < 1) throw ValidationError("counts[" + std::to_string(i) + "] must be >= 1");
  if (test_per_class < 1) throw ValidationError("test_per_class must be >= 1");
}

namespace {

Matrix class_means(const SynthMixtureSpec& spec, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const int d = spec.input_dim;
  Matrix means(spec.num_classes, d);
  if (spec.num_classes <= d) {
    // Orthonormal frame from the QR factor of a Gaussian matrix.
    Eigen::MatrixXd g(d, d);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) g(r, c) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    for (int i = 0; i < spec.num_classes; ++i) means.row(i) = q.col(i).transpose();
  } else {
    for (int i = 0; i < spec.num_classes; ++i) {
      for (int c = 0; c < d; ++c) means(i, c) = normal(rng);
      means.row(i).normalize();
    }
  }
  return means * spec.class_separation;
}

DatasetSplit draw_split(const Matrix& means, const std::vector<int>& counts, double stddev,
                        Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  const auto total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  Matrix x(static_cast<Eigen::Index>(total), means.cols());
  std::vector<int> labels;
  labels.reserve(total);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (int n = 0; n < counts[c]; ++n, ++row) {
      for (Eigen::Index k = 0; k < means.cols(); ++k)
        x(row, k) = means(static_cast<Eigen::Index>(c), k) + normal(rng);
      labels.push_back(static_cast<int>(c));
    }
  }
  return DatasetSplit(std::move(x), std::move(labels), static_cast<int>(counts.size()));
}

}  // namespace

TrainTestSplits make_synthetic_mixture(const SynthMixtureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const Matrix means = class_means(spec, rng);
  TrainTestSplits out;
  out.train = draw_split(means, spec.counts, spec.within_class_std, rng);
  out.test = draw_split(means, std::vector<int>(spec.num_classes, spec.test_per_class),
                        spec.within_class_std, rng);
  return out;
}

InstanceSampler::InstanceSampler(std::size_t dataset_size, std::size_t batch_size,
                                 std::uint64_t seed)
    : order_(dataset_size), batch_size_(batch_size), rng_(seed) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (batch_size > dataset_size)
    throw ValidationError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                          std::to_string(dataset_size));
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::vector<std::vector<std::size_t>> InstanceSampler::next_epoch() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order_.size(); start += batch_size_) {
    const auto stop = std::min(order_.size(), start + batch_size_);
    batches.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(start),
                         order_.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

ClassBalancedSampler::ClassBalancedSampler(const DatasetSplit& split, std::size_t batch_size,
                                           std::uint64_t seed)
    : by_class_(split.indices_by_class()), batch_size_(batch_size), rng_(seed) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  for (std::size_t c = 0; c < by_class_.size(); ++c)
    if (by_class_[c].empty())
      throw ValidationError("class " + std::to_string(c) + " has no samples");
}

std::vector<std::size_t> ClassBalancedSampler::next_batch() {
  std::uniform_int_distribution<std::size_t> pick_class(0, by_class_.size() - 1);
  std::vector<std::size_t> batch(batch_size_);
  for (auto& slot : batch) {
    const auto& members = by_class_[pick_class(rng_)];
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    slot = members[pick(rng_)];
  }
  return batch;
}

Batch gather_batch(const DatasetSplit& split, std::span<const std::size_t> indices) {
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(indices.size()), split.input_dim());
  b.labels.resize(indices.size());
  b.indices.assign(indices.begin(), indices.end());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    b.inputs.row(static_cast<Eigen::Index>(r)) =
        split.inputs().row(static_cast<Eigen::Index>(indices[r]));
    b.labels[r] = split.labels()[indices[r]];
  }
  return b;
}

namespace {

constexpr int kSplitFormatVersion = 1;

std::filesystem::path sample_path_for(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

void save_split(const DatasetSplit& split, const std::filesystem::path& manifest_path,
                const SplitManifestInfo& info) {
  const auto bin_path = sample_path_for(manifest_path);
  nlohmann::json manifest = {
      {"format", "ltkd-split"},
      {"format_version", kSplitFormatVersion},
      {"num_classes", split.num_classes()},
      {"input_dim", split.input_dim()},
      {"num_samples", split.size()},
      {"per_class_counts", split.per_class_counts()},
      {"seed", info.seed},
      {"spec", info.spec},
      {"sample_file", bin_path.filename().string()},
      {"encoding", "int32le label + float64le[input_dim] per record"},
  };
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + bin_path.string());
  for (std::size_t j = 0; j < split.size(); ++j) {
    const auto label = static_cast<std::int32_t>(split.labels()[j]);
    bin.write(reinterpret_cast<const char*>(&label), sizeof(label));
    bin.write(reinterpret_cast<const char*>(split.inputs().row(static_cast<Eigen::Index>(j)).data()),
              static_cast<std::streamsize>(sizeof(double) * split.input_dim()));
  }
  if (!bin) throw std::runtime_error("failed writing " + bin_path.string());
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

DatasetSplit load_split(const std::filesystem::path& manifest_path, SplitManifestInfo* info) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open split manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("corrupt split manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "ltkd-split" ||
      manifest.value("format_version", 0) != kSplitFormatVersion)
    throw std::runtime_error("unsupported split manifest format in " + manifest_path.string());

  const int num_classes = manifest.at("num_classes").get<int>();
  const auto dim = manifest.at("input_dim").get<Eigen::Index>();
  const auto n = manifest.at("num_samples").get<std::size_t>();
  const auto bin_path = manifest_path.parent_path() / manifest.at("sample_file").get<std::string>();

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open sample file " + bin_path.string());
  Matrix x(static_cast<Eigen::Index>(n), dim);
  std::vector<int> labels(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::int32_t label = 0;
    bin.read(reinterpret_cast<char*>(&label), sizeof(label));
    bin.read(reinterpret_cast<char*>(x.row(static_cast<Eigen::Index>(j)).data()),
             static_cast<std::streamsize>(sizeof(double) * dim));
    if (!bin) throw std::runtime_error("sample file " + bin_path.string() + " truncated at record " +
                                       std::to_string(j));
    labels[j] = label;
  }
  if (bin.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("sample file " + bin_path.string() + " has trailing bytes");

  DatasetSplit split(std::move(x), std::move(labels), num_classes);
  if (manifest.at("per_class_counts").get<std::vector<int>>() != split.per_class_counts())
    throw std::runtime_error("per_class_counts in " + manifest_path.string() +
                             " disagree with sample file");
  if (info) {
    info->seed = manifest.value("seed", std::uint64_t{0});
    info->spec = manifest.value("spec", nlohmann::json::object());
  }
  return split;
}

nlohmann::json to_json(const LongTailSpec& spec) {
  return {{"num_classes", spec.num_classes},
          {"max_count", spec.max_count},
          {"imbalance_factor", spec.imbalance_factor}};
}

nlohmann::json to_json(const SynthMixtureSpec& spec) {
  return {{"num_classes", spec.num_classes},       {"input_dim", spec.input_dim},
          {"class_separation", spec.class_separation}, {"within_class_std", spec.within_class_std},
          {"counts", spec.counts},                 {"test_per_class", spec.test_per_class}};
}

}  // namespace ltkd
