#include "ltkd/residual_layer.hpp"

#include <algorithm>
#include <string>

namespace ltkd {

bool ResidualParams::feasible() const {
  if (scale.rows() != shift.rows() || scale.cols() != shift.cols()) return false;
  return (scale.array() >= 0.0).all() && (shift.array() >= 0.0).all() &&
         (shift.array() <= 1.0).all();
}

ResidualParams init_params(int num_classes, std::uint64_t seed, int width) {
  if (num_classes < 1) throw ValidationError("residual params need at least one class");
  if (width < 1) throw ValidationError("residual params need width >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ResidualParams p{Matrix(num_classes, width), Matrix(num_classes, width)};
  for (int i = 0; i < num_classes; ++i)
    for (int c = 0; c < width; ++c) p.scale(i, c) = unit(rng);
  for (int i = 0; i < num_classes; ++i)
    for (int c = 0; c < width; ++c) p.shift(i, c) = unit(rng);
  return p;
}

void project_in_place(ResidualParams& params) {
  params.scale = params.scale.cwiseMax(0.0);
  params.shift = params.shift.cwiseMax(0.0).cwiseMin(1.0);
}

ResidualParams project_params(const ResidualParams& params) {
  ResidualParams out = params;
  project_in_place(out);
  return out;
}

void KernelMask::validate(int num_classes_expected, int num_channels) const {
  if (num_classes() != num_classes_expected)
    throw ValidationError("kernel mask covers " + std::to_string(num_classes()) +
                          " classes, expected " + std::to_string(num_classes_expected));
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const auto& set = channels[i];
    if (set.size() != channels.front().size())
      throw ValidationError("kernel mask class " + std::to_string(i) +
                            " has a different set size than class 0");
    for (std::size_t j = 0; j < set.size(); ++j) {
      if (set[j] < 0 || set[j] >= num_channels)
        throw ValidationError("kernel mask class " + std::to_string(i) + " lists channel " +
                              std::to_string(set[j]) + " outside [0, " +
                              std::to_string(num_channels) + ")");
      if (j > 0 && set[j] <= set[j - 1])
        throw ValidationError("kernel mask class " + std::to_string(i) +
                              " channels must be sorted and distinct");
    }
  }
}

KernelMask KernelMask::all(int num_classes, int num_channels) {
  std::vector<int> every(num_channels);
  for (int c = 0; c < num_channels; ++c) every[c] = c;
  return KernelMask{std::vector<std::vector<int>>(num_classes, every)};
}

Matrix sample_standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix e(rows, cols);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = normal(rng);
  return e;
}

namespace {

void check_labels(const ResidualParams& params, std::span<const int> labels) {
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (labels[j] < 0 || labels[j] >= params.num_classes())
      throw ValidationError("label " + std::to_string(labels[j]) + " at row " + std::to_string(j) +
                            " outside [0, " + std::to_string(params.num_classes()) + ")");
}

int param_column(const ResidualParams& params, Eigen::Index col, int positions, Eigen::Index cols) {
  if (!params.per_channel()) return 0;
  const auto channel = col / positions;
  if (cols != static_cast<Eigen::Index>(params.width()) * positions)
    throw ValidationError("per-channel residual params of width " + std::to_string(params.width()) +
                          " do not fit " + std::to_string(cols) + " feature columns");
  return static_cast<int>(channel);
}

}  // namespace

Matrix residual_from_noise(const ResidualParams& params, std::span<const int> labels,
                           const Matrix& noise, int positions) {
  if (static_cast<std::size_t>(noise.rows()) != labels.size())
    throw ValidationError("noise rows do not match label count");
  check_labels(params, labels);
  Matrix r(noise.rows(), noise.cols());
  for (Eigen::Index j = 0; j < noise.rows(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    for (Eigen::Index d = 0; d < noise.cols(); ++d) {
      const int p = param_column(params, d, positions, noise.cols());
      r(j, d) = params.scale(y, p) * noise(j, d) + params.shift(y, p);
    }
  }
  return r;
}

Matrix sample_residual(const ResidualParams& params, std::span<const int> labels, int dim,
                       Rng& rng) {
  if (!params.feasible())
    throw ValidationError("residual params infeasible (scale < 0 or shift outside [0, 1]); "
                          "project before sampling");
  if (dim < 1) throw ValidationError("residual dim must be >= 1");
  const Matrix noise = sample_standard_normal(static_cast<Eigen::Index>(labels.size()), dim, rng);
  return residual_from_noise(params, labels, noise);
}

FeatureBatch apply_gn(const FeatureBatch& features, const Matrix& residual) {
  if (features.values.rows() != residual.rows() || features.values.cols() != residual.cols())
    throw ValidationError("residual shape " + std::to_string(residual.rows()) + "x" +
                          std::to_string(residual.cols()) + " does not match features " +
                          std::to_string(features.values.rows()) + "x" +
                          std::to_string(features.values.cols()));
  return FeatureBatch{features.values + residual, features.labels};
}

Matrix mask_indicator(std::span<const int> labels, const KernelMask& mask,
                      const ChannelLayout& layout) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), layout.columns());
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const int y = labels[j];
    if (y < 0 || y >= mask.num_classes())
      throw ValidationError("label " + std::to_string(y) + " not covered by kernel mask");
    for (int c : mask.channels[y])
      m.row(static_cast<Eigen::Index>(j)).segment(c * layout.positions, layout.positions).setOnes();
  }
  return m;
}

FeatureBatch apply_gn_masked(const FeatureBatch& features, const Matrix& residual,
                             const KernelMask& mask, int positions) {
  if (positions < 1 || features.values.cols() % positions != 0)
    throw ValidationError("feature columns are not a whole number of channels");
  const ChannelLayout layout{static_cast<int>(features.values.cols() / positions), positions};
  mask.validate(mask.num_classes(), layout.channels);
  const Matrix keep = mask_indicator(features.labels, mask, layout);
  if (keep.rows() != residual.rows() || keep.cols() != residual.cols())
    throw ValidationError("residual shape does not match features");
  return FeatureBatch{features.values + residual.cwiseProduct(keep), features.labels};
}

ResidualGrad residual_grad(const ResidualParams& params, std::span<const int> labels,
                           const Matrix& noise, const Matrix& upstream, int positions) {
  if (noise.rows() != upstream.rows() || noise.cols() != upstream.cols())
    throw ValidationError("upstream gradient shape does not match noise");
  check_labels(params, labels);
  ResidualGrad g{Matrix::Zero(params.scale.rows(), params.scale.cols()),
                 Matrix::Zero(params.shift.rows(), params.shift.cols())};
  for (Eigen::Index j = 0; j < noise.rows(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    for (Eigen::Index d = 0; d < noise.cols(); ++d) {
      const int p = param_column(params, d, positions, noise.cols());
      g.scale(y, p) += upstream(j, d) * noise(j, d);
      g.shift(y, p) += upstream(j, d);
    }
  }
  return g;
}

}  // namespace ltkd
