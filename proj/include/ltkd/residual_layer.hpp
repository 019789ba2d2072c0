#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ltkd/common.hpp"

namespace ltkd {

/// Learnable per-class residual distribution E_i = scale_i * E + shift_i with
/// E ~ N(0, 1). Both matrices are C x P: P == 1 broadcasts one scalar pair per
/// class over every feature column, P == channel count gives one pair per
/// class and channel.
///
/// Feasible parameters satisfy scale >= 0 and shift in [0, 1].
struct ResidualParams {
  Matrix scale;
  Matrix shift;

  int num_classes() const { return static_cast<int>(scale.rows()); }
  int width() const { return static_cast<int>(scale.cols()); }
  bool per_channel() const { return scale.cols() > 1; }
  bool feasible() const;
};

/// Both entries drawn uniform in [0, 1].
ResidualParams init_params(int num_classes, std::uint64_t seed, int width = 1);

/// Clamps scale to [0, inf) and shift to [0, 1].
ResidualParams project_params(const ResidualParams& params);
void project_in_place(ResidualParams& params);

struct FeatureBatch {
  Matrix values;
  std::vector<int> labels;
};

/// Per-class channel subsets used to restrict where the residual is added.
struct KernelMask {
  std::vector<std::vector<int>> channels;  // one sorted set per class

  int num_classes() const { return static_cast<int>(channels.size()); }
  void validate(int num_classes, int num_channels) const;
  static KernelMask all(int num_classes, int num_channels);
};

/// Feature columns are grouped into channels of `positions` contiguous
/// columns (positions == 1 for a flat feature vector). Column d belongs to
/// channel d / positions.
struct ChannelLayout {
  int channels = 0;
  int positions = 1;
  int columns() const { return channels * positions; }
};

Matrix sample_standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

/// residual(j, d) = scale[y_j, p(d)] * noise(j, d) + shift[y_j, p(d)].
Matrix residual_from_noise(const ResidualParams& params, std::span<const int> labels,
                           const Matrix& noise, int positions = 1);

/// Fresh standard-normal draws turned into a B x D residual. Throws on
/// infeasible params.
Matrix sample_residual(const ResidualParams& params, std::span<const int> labels, int dim,
                       Rng& rng);

FeatureBatch apply_gn(const FeatureBatch& features, const Matrix& residual);

/// Adds the residual only on the channels listed for each sample's class.
FeatureBatch apply_gn_masked(const FeatureBatch& features, const Matrix& residual,
                             const KernelMask& mask, int positions = 1);

/// B x D indicator of the entries a mask lets through.
Matrix mask_indicator(std::span<const int> labels, const KernelMask& mask,
                      const ChannelLayout& layout);

/// Gradient of a downstream loss with respect to (scale, shift), given the
/// upstream gradient on the residual and the noise that produced it.
struct ResidualGrad {
  Matrix scale;
  Matrix shift;
};

ResidualGrad residual_grad(const ResidualParams& params, std::span<const int> labels,
                           const Matrix& noise, const Matrix& upstream, int positions = 1);

}  // namespace ltkd
