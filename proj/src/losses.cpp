#include "ltkd/losses.hpp"

#include <cmath>

namespace ltkd {

namespace {

void check_labels(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw ValidationError("logits have " + std::to_string(logits.rows()) + " rows but " +
                          std::to_string(labels.size()) + " labels were given");
  if (labels.empty()) throw ValidationError("loss of an empty batch is undefined");
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (labels[j] < 0 || labels[j] >= logits.cols())
      throw ValidationError("label " + std::to_string(labels[j]) + " at row " + std::to_string(j) +
                            " outside [0, " + std::to_string(logits.cols()) + ")");
}

void check_counts(std::span<const int> counts, Eigen::Index num_classes) {
  if (static_cast<Eigen::Index>(counts.size()) != num_classes)
    throw ValidationError("class counts have " + std::to_string(counts.size()) + " entries, expected " +
                          std::to_string(num_classes));
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] <= 0)
      throw ValidationError("class count " + std::to_string(i) + " must be positive");
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    const double m = out.row(j).maxCoeff();
    const double lse = m + std::log((out.row(j).array() - m).exp().sum());
    out.row(j).array() -= lse;
  }
  return out;
}

// Focal-family loss with per-sample weights: weight_j * -(1 - p)^gamma log p,
// averaged over the batch. gamma == 0 is plain cross-entropy.
LossValue weighted_focal(const Matrix& logits, std::span<const int> labels, double gamma,
                         const std::vector<double>* class_weights) {
  check_labels(logits, labels);
  const Matrix logp = log_softmax(logits);
  const auto batch = static_cast<double>(labels.size());
  LossValue out{0.0, logp.array().exp().matrix()};  // grad starts as softmax
  for (Eigen::Index j = 0; j < logp.rows(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    const double w = class_weights ? (*class_weights)[y] : 1.0;
    const double lp = logp(j, y);
    double loss = -lp;
    double coef = -1.0;  // dL/dz = coef * (onehot - softmax)
    if (gamma != 0.0) {
      const double q = -std::expm1(lp);  // 1 - p without cancellation
      const double p = std::exp(lp);
      const double mod = std::pow(q, gamma);
      loss = -mod * lp;
      const double dmod = q > 0.0 ? gamma * std::pow(q, gamma - 1.0) * p * lp : 0.0;
      coef = dmod - mod;
    }
    out.value += w * loss;
    // row = -coef * (softmax - onehot) scaled by w / B
    out.grad(j, y) -= 1.0;
    out.grad.row(j) *= -coef * w / batch;
  }
  out.value /= batch;
  return out;
}

}  // namespace

void LossSpec::validate(int num_classes) const {
  if (kind == LossKind::focal || (kind == LossKind::class_balanced && cb_focal_base))
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ValidationError("loss.gamma must be >= 0");
  if (kind == LossKind::class_balanced && !(beta >= 0.0 && beta < 1.0))
    throw ValidationError("loss.beta must lie in [0, 1)");
  if (needs_counts()) check_counts(class_counts, num_classes);
}

std::string LossSpec::label() const {
  char buf[64];
  switch (kind) {
    case LossKind::cross_entropy:
      return "CE";
    case LossKind::focal:
      std::snprintf(buf, sizeof(buf), "Focal(gamma=%g)", gamma);
      return buf;
    case LossKind::class_balanced:
      std::snprintf(buf, sizeof(buf), "CB-%s(beta=%g)", cb_focal_base ? "Focal" : "CE", beta);
      return buf;
    case LossKind::balanced_softmax:
      return "BalancedSoftmax";
  }
  return "?";
}

LossValue ce_loss(const Matrix& logits, std::span<const int> labels) {
  return weighted_focal(logits, labels, 0.0, nullptr);
}

LossValue focal_loss(const Matrix& logits, std::span<const int> labels, double gamma) {
  if (!(gamma >= 0.0)) throw ValidationError("focal gamma must be >= 0");
  return weighted_focal(logits, labels, gamma, nullptr);
}

std::vector<double> class_balanced_weights(std::span<const int> counts, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ValidationError("class-balanced beta must lie in [0, 1)");
  if (counts.empty()) throw ValidationError("class-balanced weights need at least one class");
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] < 1) throw ValidationError("class count " + std::to_string(i) + " must be >= 1");
  std::vector<double> w(counts.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    // 1 - beta^n computed as -expm1(n log beta); beta == 0 gives exactly 1.
    const double effective = beta == 0.0 ? 1.0 : -std::expm1(counts[i] * std::log(beta));
    w[i] = (1.0 - beta) / effective;
    sum += w[i];
  }
  const double scale = static_cast<double>(counts.size()) / sum;
  for (auto& x : w) x *= scale;
  return w;
}

LossValue class_balanced_loss(const Matrix& logits, std::span<const int> labels,
                              std::span<const int> counts, double beta, bool focal_base,
                              double gamma) {
  check_counts(counts, logits.cols());
  const auto w = class_balanced_weights(counts, beta);
  return weighted_focal(logits, labels, focal_base ? gamma : 0.0, &w);
}

LossValue balanced_softmax_loss(const Matrix& logits, std::span<const int> labels,
                                std::span<const int> counts) {
  check_counts(counts, logits.cols());
  Eigen::RowVectorXd shift(logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) shift(c) = std::log(static_cast<double>(counts[c]));
  Matrix adjusted = logits;
  adjusted.rowwise() += shift;
  return ce_loss(adjusted, labels);
}

LossValue classification_loss(const Matrix& logits, std::span<const int> labels,
                              const LossSpec& spec) {
  switch (spec.kind) {
    case LossKind::cross_entropy:
      return ce_loss(logits, labels);
    case LossKind::focal:
      return focal_loss(logits, labels, spec.gamma);
    case LossKind::class_balanced:
      return class_balanced_loss(logits, labels, spec.class_counts, spec.beta, spec.cb_focal_base,
                                 spec.gamma);
    case LossKind::balanced_softmax:
      return balanced_softmax_loss(logits, labels, spec.class_counts);
  }
  throw ValidationError("unknown loss kind");
}

LossValue feature_distill_loss(const Matrix& v, const Matrix& v_hat) {
  if (v.rows() != v_hat.rows() || v.cols() != v_hat.cols())
    throw ValidationError("feature shapes differ: " + std::to_string(v.rows()) + "x" +
                          std::to_string(v.cols()) + " vs " + std::to_string(v_hat.rows()) + "x" +
                          std::to_string(v_hat.cols()));
  if (v.size() == 0) throw ValidationError("distillation loss of empty features is undefined");
  const Matrix diff = v - v_hat;
  const auto n = static_cast<double>(diff.size());
  return LossValue{diff.squaredNorm() / n, diff * (2.0 / n)};
}

StudentLoss student_loss(const Matrix& logits, std::span<const int> labels, const LossSpec& spec,
                         const Matrix& v, const Matrix& v_hat, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be finite and >= 0");
  auto cls = classification_loss(logits, labels, spec);
  auto feat = feature_distill_loss(v, v_hat);
  StudentLoss out;
  out.classification = cls.value;
  out.distill = feat.value;
  out.value = cls.value + alpha * feat.value;
  out.dlogits = std::move(cls.grad);
  out.dfeatures = alpha * feat.grad;
  return out;
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cross_entropy:
      return "ce";
    case LossKind::focal:
      return "focal";
    case LossKind::class_balanced:
      return "class_balanced";
    case LossKind::balanced_softmax:
      return "balanced_softmax";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "ce") return LossKind::cross_entropy;
  if (s == "focal") return LossKind::focal;
  if (s == "class_balanced") return LossKind::class_balanced;
  if (s == "balanced_softmax") return LossKind::balanced_softmax;
  throw ValidationError("unknown loss kind '" + s + "' (ce|focal|class_balanced|balanced_softmax)");
}

nlohmann::json to_json(const LossSpec& spec) {
  nlohmann::json j = {{"kind", to_string(spec.kind)},
                      {"gamma", spec.gamma},
                      {"beta", spec.beta},
                      {"cb_focal_base", spec.cb_focal_base}};
  if (!spec.class_counts.empty()) j["class_counts"] = spec.class_counts;
  return j;
}

}  // namespace ltkd
