#include "ltkd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace ltkd {

namespace {

using RowMap = Eigen::Map<Matrix>;
using ConstRowMap = Eigen::Map<const Matrix>;

bool is_conv(const BackboneSpec& spec) { return spec.family == BackboneFamily::small_convnet; }

int block_in_channels(const BackboneSpec& spec, int block_index) {
  return block_index == 0 ? 1 : spec.widths[block_index - 1];
}

// cols(ci * K + kk, t) = x(ci, t + kk - K / 2), zero outside the signal.
Matrix im2col(const double* x, int in_channels, int length, int kernel) {
  const int pad = kernel / 2;
  Matrix cols = Matrix::Zero(in_channels * kernel, length);
  for (int ci = 0; ci < in_channels; ++ci)
    for (int kk = 0; kk < kernel; ++kk)
      for (int t = 0; t < length; ++t) {
        const int src = t + kk - pad;
        if (src >= 0 && src < length) cols(ci * kernel + kk, t) = x[ci * length + src];
      }
  return cols;
}

void col2im_add(const Matrix& dcols, int in_channels, int length, int kernel, double* dx) {
  const int pad = kernel / 2;
  for (int ci = 0; ci < in_channels; ++ci)
    for (int kk = 0; kk < kernel; ++kk)
      for (int t = 0; t < length; ++t) {
        const int src = t + kk - pad;
        if (src >= 0 && src < length) dx[ci * length + src] += dcols(ci * kernel + kk, t);
      }
}

Matrix block_forward(const BackboneSpec& spec, int k, const Affine& layer, const Matrix& x) {
  if (!is_conv(spec)) {
    Matrix z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.row(0);
    return z;
  }
  const int length = spec.input_dim;
  const int in_ch = block_in_channels(spec, k);
  const int out_ch = spec.widths[k];
  Matrix z(x.rows(), static_cast<Eigen::Index>(out_ch) * length);
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    const Matrix cols = im2col(x.row(j).data(), in_ch, length, spec.kernel_size);
    RowMap out(z.row(j).data(), out_ch, length);
    out.noalias() = layer.weight * cols;
    out.colwise() += layer.bias.row(0).transpose();
  }
  return z;
}

// Accumulates weight/bias gradients and returns dL/dx.
Matrix block_backward(const BackboneSpec& spec, int k, const Affine& layer, const Matrix& x,
                      const Matrix& dz, Affine& grad) {
  if (!is_conv(spec)) {
    grad.weight += dz.transpose() * x;
    grad.bias += dz.colwise().sum();
    return dz * layer.weight;
  }
  const int length = spec.input_dim;
  const int in_ch = block_in_channels(spec, k);
  const int out_ch = spec.widths[k];
  Matrix dx = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    const Matrix cols = im2col(x.row(j).data(), in_ch, length, spec.kernel_size);
    ConstRowMap dout(dz.row(j).data(), out_ch, length);
    grad.weight.noalias() += dout * cols.transpose();
    grad.bias += dout.rowwise().sum().transpose();
    const Matrix dcols = layer.weight.transpose() * dout;
    col2im_add(dcols, in_ch, length, spec.kernel_size, dx.row(j).data());
  }
  return dx;
}

Matrix activate(Activation act, const Matrix& z) {
  if (act == Activation::relu) return z.cwiseMax(0.0);
  return z.array().tanh().matrix();
}

Matrix activation_grad(Activation act, const Matrix& z, const Matrix& upstream) {
  if (act == Activation::relu) return (z.array() > 0.0).select(upstream, 0.0);
  const auto t = z.array().tanh();
  return (upstream.array() * (1.0 - t * t)).matrix();
}

// Repeats each channel column `positions` times: B x C -> B x (C * positions).
Matrix expand_channels(const Matrix& per_channel, int positions) {
  Matrix out(per_channel.rows(), per_channel.cols() * positions);
  for (Eigen::Index c = 0; c < per_channel.cols(); ++c)
    for (int t = 0; t < positions; ++t) out.col(c * positions + t) = per_channel.col(c);
  return out;
}

Matrix sum_positions(const Matrix& full, int positions) {
  Matrix out(full.rows(), full.cols() / positions);
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = full.middleCols(c * positions, positions).rowwise().sum();
  return out;
}

bool site_is_spatial(const ModelState& model, InsertionPoint point) {
  return is_conv(model.spec) && point.block < model.spec.num_blocks();
}

// Residual added at a site and its (pre-expansion) noise layout positions.
Matrix site_residual(const ModelState& model, InsertionPoint point, const ResidualParams& params,
                     std::span<const int> labels, const Matrix& noise) {
  const auto layout = model.site_layout(point);
  if (!site_is_spatial(model, point)) return residual_from_noise(params, labels, noise);
  if (model.residual_options.layout == NoiseLayout::per_position)
    return residual_from_noise(params, labels, noise, layout.positions);
  return expand_channels(residual_from_noise(params, labels, noise), layout.positions);
}

void add_grad(ResidualParams& acc, const ResidualGrad& g) {
  acc.scale += g.scale;
  acc.shift += g.shift;
}

}  // namespace

void BackboneSpec::validate() const {
  if (input_dim < 1) throw ValidationError("backbone.input_dim must be >= 1");
  if (widths.empty()) throw ValidationError("backbone.widths needs at least one block");
  for (std::size_t i = 0; i < widths.size(); ++i)
    if (widths[i] < 1)
      throw ValidationError("backbone.widths[" + std::to_string(i) + "] must be >= 1");
  if (num_classes < 1) throw ValidationError("backbone.num_classes must be >= 1");
  if (family == BackboneFamily::small_convnet && (kernel_size < 1 || kernel_size % 2 == 0))
    throw ValidationError("backbone.kernel_size must be a positive odd integer");
}

std::string to_string(InsertionPoint point, int num_blocks) {
  if (point.block == num_blocks) return "after_final_feature";
  return "after_block_" + std::to_string(point.block);
}

InsertionPoint parse_insertion_point(const std::string& name, int num_blocks) {
  if (name == "after_final_feature") return InsertionPoint{num_blocks};
  const std::string prefix = "after_block_";
  if (name.rfind(prefix, 0) == 0) {
    const auto digits = name.substr(prefix.size());
    if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos) {
      const int block = std::stoi(digits);
      if (block < 1 || block > num_blocks)
        throw ValidationError("insertion point " + name + " references a missing block (backbone has " +
                              std::to_string(num_blocks) + ")");
      return InsertionPoint{block};
    }
  }
  throw ValidationError("unknown insertion point '" + name + "'");
}

std::vector<InsertionPoint> ModelState::insertion_points() const {
  std::vector<InsertionPoint> out;
  for (const auto& [point, _] : params.residuals) out.push_back(point);
  return out;
}

ChannelLayout ModelState::site_layout(InsertionPoint point) const {
  if (point.block < 1 || point.block > spec.num_blocks())
    throw ValidationError("insertion point block " + std::to_string(point.block) + " out of range");
  const int channels = spec.widths[point.block - 1];
  if (site_is_spatial(*this, point)) return ChannelLayout{channels, spec.input_dim};
  return ChannelLayout{channels, 1};
}

ModelState init_model(const BackboneSpec& spec, std::span<const InsertionPoint> insertion_points,
                      const ResidualOptions& options, std::uint64_t seed) {
  spec.validate();
  ModelState model{spec, options, {}};
  Rng rng(derive_seed(seed, 0));
  for (int k = 0; k < spec.num_blocks(); ++k) {
    const int fan_in = is_conv(spec) ? block_in_channels(spec, k) * spec.kernel_size
                                     : (k == 0 ? spec.input_dim : spec.widths[k - 1]);
    // He-uniform for rectifiers, Glorot-style bound for tanh.
    const double gain = spec.activation == Activation::relu ? 6.0 : 3.0;
    std::uniform_real_distribution<double> u(-std::sqrt(gain / fan_in), std::sqrt(gain / fan_in));
    Affine layer{Matrix(spec.widths[k], fan_in), Matrix::Zero(1, spec.widths[k])};
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = u(rng);
    model.params.blocks.push_back(std::move(layer));
  }
  const int d = spec.feature_dim();
  std::uniform_real_distribution<double> u(-1.0 / std::sqrt(d), 1.0 / std::sqrt(d));
  model.params.classifier = Affine{Matrix(spec.num_classes, d), Matrix::Zero(1, spec.num_classes)};
  for (Eigen::Index i = 0; i < model.params.classifier.weight.size(); ++i)
    model.params.classifier.weight.data()[i] = u(rng);

  for (const auto point : insertion_points) {
    const auto layout = model.site_layout(point);
    const int width = options.per_channel ? layout.channels : 1;
    model.params.residuals[point] =
        init_params(spec.num_classes, derive_seed(seed, 100 + point.block), width);
  }
  return model;
}

ModelState without_residuals(const ModelState& model) {
  ModelState out = model;
  out.params.residuals.clear();
  return out;
}

void visit_parameters(Parameters& params, const std::function<void(const std::string&, Matrix&)>& fn,
                      int num_blocks) {
  for (std::size_t k = 0; k < params.blocks.size(); ++k) {
    const auto prefix = "block" + std::to_string(k + 1);
    fn(prefix + ".weight", params.blocks[k].weight);
    fn(prefix + ".bias", params.blocks[k].bias);
  }
  fn("classifier.weight", params.classifier.weight);
  fn("classifier.bias", params.classifier.bias);
  for (auto& [point, rp] : params.residuals) {
    const auto prefix = "residual." + to_string(point, num_blocks);
    fn(prefix + ".scale", rp.scale);
    fn(prefix + ".shift", rp.shift);
  }
}

void visit_parameters(const Parameters& params,
                      const std::function<void(const std::string&, const Matrix&)>& fn,
                      int num_blocks) {
  visit_parameters(const_cast<Parameters&>(params),
                   [&](const std::string& name, Matrix& m) { fn(name, m); }, num_blocks);
}

Parameters zeros_like(const Parameters& params) {
  Parameters out = params;
  visit_parameters(out, [](const std::string&, Matrix& m) { m.setZero(); },
                   static_cast<int>(params.blocks.size()));
  return out;
}

std::string parameter_digest(const ModelState& model) {
  Fnv1a h;
  visit_parameters(
      model.params,
      [&](const std::string& name, const Matrix& m) {
        h.update(name);
        const std::int64_t shape[2] = {m.rows(), m.cols()};
        h.update(shape, sizeof(shape));
        h.update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
      },
      model.spec.num_blocks());
  return h.hex();
}

NoiseDraw draw_noise(const ModelState& model, Eigen::Index batch, Rng& rng) {
  NoiseDraw draw;
  for (const auto& [point, _] : model.params.residuals) {
    const auto layout = model.site_layout(point);
    const bool per_position = site_is_spatial(model, point) &&
                              model.residual_options.layout == NoiseLayout::per_position;
    draw[point] = sample_standard_normal(batch, per_position ? layout.columns() : layout.channels, rng);
  }
  return draw;
}

ForwardTrace trace_forward(const ModelState& model, const Matrix& inputs, const GnInput* gn) {
  const auto& spec = model.spec;
  if (inputs.cols() != spec.input_dim)
    throw ValidationError("input dim " + std::to_string(inputs.cols()) + " does not match backbone input_dim " +
                          std::to_string(spec.input_dim));
  ForwardTrace trace;
  if (gn) {
    if (gn->labels.size() != static_cast<std::size_t>(inputs.rows()))
      throw ContractViolation("GN path needs one label per input row");
    if (!gn->noise) throw ContractViolation("GN path needs a noise draw");
    for (const auto& [point, _] : model.params.residuals)
      if (!gn->noise->count(point))
        throw ContractViolation("noise draw missing site " + to_string(point, spec.num_blocks()));
    for (const auto& [point, rp] : model.params.residuals)
      if (rp.num_classes() != spec.num_classes)
        throw ValidationError("residual params at " + to_string(point, spec.num_blocks()) +
                              " cover the wrong number of classes");
    trace.gn = *gn;
  }

  const int n = spec.num_blocks();
  Matrix x = inputs;
  for (int k = 0; k < n; ++k) {
    trace.block_inputs.push_back(x);
    Matrix z = block_forward(spec, k, model.params.blocks[k], x);
    x = activate(spec.activation, z);
    trace.pre_activations.push_back(std::move(z));
    const InsertionPoint site{k + 1};
    if (gn && site.block < n) {
      if (auto it = model.params.residuals.find(site); it != model.params.residuals.end())
        x += site_residual(model, site, it->second, gn->labels, gn->noise->at(site));
    }
  }

  Matrix features;
  if (is_conv(spec)) {
    features.resize(x.rows(), spec.feature_dim());
    for (int c = 0; c < spec.feature_dim(); ++c)
      features.col(c) = x.middleCols(static_cast<Eigen::Index>(c) * spec.input_dim, spec.input_dim)
                            .rowwise()
                            .mean();
  } else {
    features = std::move(x);
  }

  const InsertionPoint final_site{n};
  if (gn) {
    if (auto it = model.params.residuals.find(final_site); it != model.params.residuals.end()) {
      Matrix r = residual_from_noise(it->second, gn->labels, gn->noise->at(final_site));
      if (gn->final_mask) {
        gn->final_mask->validate(spec.num_classes, spec.feature_dim());
        trace.final_mask = mask_indicator(gn->labels, *gn->final_mask,
                                          ChannelLayout{spec.feature_dim(), 1});
        r = r.cwiseProduct(trace.final_mask);
      }
      features += r;
    }
  }

  trace.logits = features * model.params.classifier.weight.transpose();
  trace.logits.rowwise() += model.params.classifier.bias.row(0);
  trace.features = std::move(features);
  return trace;
}

Parameters backward(const ModelState& model, const ForwardTrace& trace, const Matrix& dlogits,
                    const Matrix* dfeatures) {
  const auto& spec = model.spec;
  const auto& params = model.params;
  Parameters grad = zeros_like(params);
  const int n = spec.num_blocks();

  grad.classifier.weight = dlogits.transpose() * trace.features;
  grad.classifier.bias = dlogits.colwise().sum();
  Matrix dfeat = dlogits * params.classifier.weight;
  if (dfeatures) dfeat += *dfeatures;

  if (trace.gn) {
    const InsertionPoint final_site{n};
    if (auto it = params.residuals.find(final_site); it != params.residuals.end()) {
      const Matrix upstream = trace.final_mask.size() ? dfeat.cwiseProduct(trace.final_mask) : dfeat;
      add_grad(grad.residuals[final_site],
               residual_grad(it->second, trace.gn->labels, trace.gn->noise->at(final_site), upstream));
    }
  }

  Matrix dx;
  if (is_conv(spec)) {
    const int length = spec.input_dim;
    dx.resize(dfeat.rows(), static_cast<Eigen::Index>(spec.feature_dim()) * length);
    for (int c = 0; c < spec.feature_dim(); ++c)
      for (int t = 0; t < length; ++t)
        dx.col(static_cast<Eigen::Index>(c) * length + t) = dfeat.col(c) / length;
  } else {
    dx = std::move(dfeat);
  }

  for (int k = n - 1; k >= 0; --k) {
    const InsertionPoint site{k + 1};
    if (trace.gn && site.block < n) {
      if (auto it = params.residuals.find(site); it != params.residuals.end()) {
        const auto& noise = trace.gn->noise->at(site);
        const auto layout = model.site_layout(site);
        if (!site_is_spatial(model, site))
          add_grad(grad.residuals[site], residual_grad(it->second, trace.gn->labels, noise, dx));
        else if (model.residual_options.layout == NoiseLayout::per_position)
          add_grad(grad.residuals[site],
                   residual_grad(it->second, trace.gn->labels, noise, dx, layout.positions));
        else
          add_grad(grad.residuals[site], residual_grad(it->second, trace.gn->labels, noise,
                                                       sum_positions(dx, layout.positions)));
      }
    }
    const Matrix dz = activation_grad(spec.activation, trace.pre_activations[k], dx);
    dx = block_backward(spec, k, params.blocks[k], trace.block_inputs[k], dz, grad.blocks[k]);
  }
  return grad;
}

ForwardResult forward_std(const ModelState& model, const Matrix& inputs) {
  auto trace = trace_forward(model, inputs);
  return {std::move(trace.features), std::move(trace.logits)};
}

ForwardResult forward_gn(const ModelState& model, const Matrix& inputs, std::span<const int> labels,
                         Rng& rng, const KernelMask* final_mask) {
  if (labels.empty() && inputs.rows() > 0)
    throw ContractViolation("GN path requires labels (train-time only)");
  for (const auto& [point, rp] : model.params.residuals)
    if (!rp.feasible())
      throw ValidationError("residual params at " + to_string(point, model.spec.num_blocks()) +
                            " infeasible; project before sampling");
  const NoiseDraw noise = draw_noise(model, inputs.rows(), rng);
  const GnInput gn{labels, &noise, final_mask};
  auto trace = trace_forward(model, inputs, &gn);
  return {std::move(trace.features), std::move(trace.logits)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'L', 'T', 'K', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

std::string to_string(BackboneFamily family) {
  return family == BackboneFamily::mlp ? "mlp" : "small_convnet";
}
std::string to_string(Activation activation) {
  return activation == Activation::relu ? "relu" : "tanh";
}
std::string to_string(NoiseLayout layout) {
  return layout == NoiseLayout::broadcast_spatial ? "broadcast_spatial" : "per_position";
}

BackboneFamily parse_backbone_family(const std::string& s) {
  if (s == "mlp") return BackboneFamily::mlp;
  if (s == "small_convnet") return BackboneFamily::small_convnet;
  throw ValidationError("unknown backbone family '" + s + "' (mlp|small_convnet)");
}
Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + s + "' (relu|tanh)");
}
NoiseLayout parse_noise_layout(const std::string& s) {
  if (s == "broadcast_spatial") return NoiseLayout::broadcast_spatial;
  if (s == "per_position") return NoiseLayout::per_position;
  throw ValidationError("unknown noise layout '" + s + "' (broadcast_spatial|per_position)");
}

nlohmann::json to_json(const BackboneSpec& spec) {
  return {{"family", to_string(spec.family)},
          {"input_dim", spec.input_dim},
          {"widths", spec.widths},
          {"kernel_size", spec.kernel_size},
          {"activation", to_string(spec.activation)},
          {"num_classes", spec.num_classes}};
}

BackboneSpec backbone_from_json(const nlohmann::json& j) {
  BackboneSpec spec;
  spec.family = parse_backbone_family(j.at("family").get<std::string>());
  spec.input_dim = j.at("input_dim").get<int>();
  spec.widths = j.at("widths").get<std::vector<int>>();
  spec.kernel_size = j.at("kernel_size").get<int>();
  spec.activation = parse_activation(j.at("activation").get<std::string>());
  spec.num_classes = j.at("num_classes").get<int>();
  return spec;
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  nlohmann::json table = nlohmann::json::array();
  std::vector<double> payload;
  Fnv1a digest;
  visit_parameters(
      model.params,
      [&](const std::string& name, const Matrix& m) {
        table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
        payload.insert(payload.end(), m.data(), m.data() + m.size());
      },
      model.spec.num_blocks());
  digest.update(payload.data(), payload.size() * sizeof(double));

  nlohmann::json points = nlohmann::json::array();
  for (const auto p : model.insertion_points()) points.push_back(to_string(p, model.spec.num_blocks()));
  const nlohmann::json manifest = {
      {"format_version", kCheckpointVersion},
      {"backbone", to_json(model.spec)},
      {"residual_options",
       {{"per_channel", model.residual_options.per_channel},
        {"noise_layout", to_string(model.residual_options.layout)}}},
      {"insertion_points", points},
      {"parameters", table},
      {"payload_values", payload.size()},
      {"payload_digest", digest.hex()},
  };
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)] = {};
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  if (version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": checkpoint format version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (std::uint64_t{1} << 32)) throw CheckpointError(path.string() + ": corrupt manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(path.string() + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt manifest: " + e.what());
  }

  try {
    const auto count = manifest.at("payload_values").get<std::size_t>();
    std::vector<double> payload(count);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw CheckpointError(path.string() + ": truncated parameter payload");
    if (in.peek() != std::char_traits<char>::eof())
      throw CheckpointError(path.string() + ": trailing bytes after payload");
    Fnv1a digest;
    digest.update(payload.data(), payload.size() * sizeof(double));
    if (digest.hex() != manifest.at("payload_digest").get<std::string>())
      throw CheckpointError(path.string() + ": payload digest mismatch (corrupt file)");

    ModelState model;
    model.spec = backbone_from_json(manifest.at("backbone"));
    model.spec.validate();
    const auto& ro = manifest.at("residual_options");
    model.residual_options.per_channel = ro.at("per_channel").get<bool>();
    model.residual_options.layout = parse_noise_layout(ro.at("noise_layout").get<std::string>());
    const int n = model.spec.num_blocks();
    model.params.blocks.resize(n);
    for (const auto& name : manifest.at("insertion_points"))
      model.params.residuals[parse_insertion_point(name.get<std::string>(), n)] = {};

    std::map<std::string, nlohmann::json> entries;
    for (const auto& e : manifest.at("parameters")) entries[e.at("name").get<std::string>()] = e;
    std::size_t filled = 0;
    visit_parameters(
        model.params,
        [&](const std::string& name, Matrix& m) {
          auto it = entries.find(name);
          if (it == entries.end()) throw CheckpointError(path.string() + ": missing parameter " + name);
          const auto rows = it->second.at("rows").get<Eigen::Index>();
          const auto cols = it->second.at("cols").get<Eigen::Index>();
          const auto offset = it->second.at("offset").get<std::size_t>();
          if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) > payload.size())
            throw CheckpointError(path.string() + ": parameter " + name + " exceeds payload");
          m = ConstRowMap(payload.data() + offset, rows, cols);
          ++filled;
        },
        n);
    if (filled != entries.size())
      throw CheckpointError(path.string() + ": manifest lists parameters the backbone does not have");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
  } catch (const ValidationError& e) {
    throw CheckpointError(path.string() + ": invalid model description: " + e.what());
  }
}

ModelState load_checkpoint(const std::filesystem::path& path, const BackboneSpec& expected) {
  ModelState model = load_checkpoint(path);
  const ModelState reference =
      init_model(expected, model.insertion_points(), model.residual_options, 0);
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> shapes;
  visit_parameters(
      reference.params,
      [&](const std::string& name, const Matrix& m) { shapes[name] = {m.rows(), m.cols()}; },
      expected.num_blocks());
  visit_parameters(
      model.params,
      [&](const std::string& name, const Matrix& m) {
        auto it = shapes.find(name);
        if (it == shapes.end())
          throw CheckpointError("checkpoint parameter " + name + " does not exist in the expected backbone");
        if (it->second.first != m.rows() || it->second.second != m.cols())
          throw CheckpointError("shape mismatch for parameter " + name + ": checkpoint has " +
                                std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                ", expected backbone needs " + std::to_string(it->second.first) + "x" +
                                std::to_string(it->second.second));
        shapes.erase(it);
      },
      model.spec.num_blocks());
  if (!shapes.empty())
    throw CheckpointError("checkpoint lacks parameter " + shapes.begin()->first +
                          " required by the expected backbone");
  return model;
}

}  // namespace ltkd
