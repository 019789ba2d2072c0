#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltkd/common.hpp"
#include "ltkd/residual_layer.hpp"

namespace ltkd {

enum class BackboneFamily { mlp, small_convnet };
enum class Activation { relu, tanh };

/// How noise is drawn at convolutional sites that still carry positions.
enum class NoiseLayout { broadcast_spatial, per_position };

/// Desk-scale feature extractor. `widths` lists hidden units per block (mlp)
/// or output channels per block (small_convnet, 1-D convolutions with
/// "same" padding over the input vector, followed by global average pooling
/// after the last block). The feature dimension is widths.back().
struct BackboneSpec {
  BackboneFamily family = BackboneFamily::mlp;
  int input_dim = 32;
  std::vector<int> widths = {64, 64, 64};
  int kernel_size = 3;
  Activation activation = Activation::relu;
  int num_classes = 10;

  int num_blocks() const { return static_cast<int>(widths.size()); }
  int feature_dim() const { return widths.empty() ? 0 : widths.back(); }
  void validate() const;
  bool operator==(const BackboneSpec&) const = default;
};

/// Residual injection site, "after block k" (1-based). The last block is the
/// final feature site: for the convnet that is the pooled feature vector.
struct InsertionPoint {
  int block = 0;
  auto operator<=>(const InsertionPoint&) const = default;
};

std::string to_string(InsertionPoint point, int num_blocks);
/// Accepts "after_block_<k>" and "after_final_feature".
InsertionPoint parse_insertion_point(const std::string& name, int num_blocks);

struct ResidualOptions {
  bool per_channel = false;
  NoiseLayout layout = NoiseLayout::broadcast_spatial;
  bool operator==(const ResidualOptions&) const = default;
};

/// Dense affine map: out = in * weight^T + bias. For convolution blocks the
/// weight is out_channels x (in_channels * kernel_size).
struct Affine {
  Matrix weight;
  Matrix bias;  // 1 x out
};

struct Parameters {
  std::vector<Affine> blocks;
  Affine classifier;  // C x D
  std::map<InsertionPoint, ResidualParams> residuals;
};

/// Backbone, classifier and any attached residual layers. The insertion set
/// is the key set of params.residuals; an empty set means the GN path is off.
struct ModelState {
  BackboneSpec spec;
  ResidualOptions residual_options;
  Parameters params;

  bool gn_enabled() const { return !params.residuals.empty(); }
  std::vector<InsertionPoint> insertion_points() const;
  /// Channel layout of the activations at an insertion site.
  ChannelLayout site_layout(InsertionPoint point) const;
};

ModelState init_model(const BackboneSpec& spec, std::span<const InsertionPoint> insertion_points,
                      const ResidualOptions& options, std::uint64_t seed);

/// Same model with all residual layers detached.
ModelState without_residuals(const ModelState& model);

/// Visits every parameter matrix with a stable dotted name.
void visit_parameters(Parameters& params, const std::function<void(const std::string&, Matrix&)>& fn,
                      int num_blocks);
void visit_parameters(const Parameters& params,
                      const std::function<void(const std::string&, const Matrix&)>& fn,
                      int num_blocks);

/// Zero-valued parameters of the same shapes.
Parameters zeros_like(const Parameters& params);

std::string parameter_digest(const ModelState& model);

struct ForwardResult {
  Matrix features;  // B x D penultimate representation
  Matrix logits;    // B x C
};

/// Standard-normal draws for every residual site of one batch.
using NoiseDraw = std::map<InsertionPoint, Matrix>;

NoiseDraw draw_noise(const ModelState& model, Eigen::Index batch, Rng& rng);

/// Label-conditioned inputs of the GN path. When `final_mask` is set the
/// residual at the final feature site is restricted to each class's channels.
struct GnInput {
  std::span<const int> labels;
  const NoiseDraw* noise = nullptr;
  const KernelMask* final_mask = nullptr;
};

/// Intermediate activations kept for the backward pass.
struct ForwardTrace {
  std::vector<Matrix> block_inputs;
  std::vector<Matrix> pre_activations;
  Matrix features;
  Matrix logits;
  std::optional<GnInput> gn;
  Matrix final_mask;  // indicator; empty when unmasked
};

ForwardTrace trace_forward(const ModelState& model, const Matrix& inputs,
                           const GnInput* gn = nullptr);

/// Gradients of a scalar loss given dL/dlogits and, optionally, an extra
/// dL/dfeatures term (the distillation loss taps the penultimate features).
Parameters backward(const ModelState& model, const ForwardTrace& trace, const Matrix& dlogits,
                    const Matrix* dfeatures = nullptr);

ForwardResult forward_std(const ModelState& model, const Matrix& inputs);
/// Draws fresh noise from `rng`; labels are mandatory.
ForwardResult forward_gn(const ModelState& model, const Matrix& inputs, std::span<const int> labels,
                         Rng& rng, const KernelMask* final_mask = nullptr);

// Checkpoints: "LTKDCKPT" magic, uint32 format version, uint64 manifest
// length, JSON manifest (spec, residual options, insertion points, named
// parameter table, payload digest), then the raw float64 payload.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);
/// Also checks every parameter shape against a model built from `expected`.
ModelState load_checkpoint(const std::filesystem::path& path, const BackboneSpec& expected);

nlohmann::json to_json(const BackboneSpec& spec);
BackboneSpec backbone_from_json(const nlohmann::json& j);
std::string to_string(BackboneFamily family);
std::string to_string(Activation activation);
std::string to_string(NoiseLayout layout);
BackboneFamily parse_backbone_family(const std::string& s);
Activation parse_activation(const std::string& s);
NoiseLayout parse_noise_layout(const std::string& s);

}  // namespace ltkd
