#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltkd/common.hpp"

namespace ltkd {

enum class LossKind { cross_entropy, focal, class_balanced, balanced_softmax };

/// Classification loss choice. Class-balanced weighting wraps a base loss
/// (cross-entropy by default, focal when `cb_focal_base` is set).
struct LossSpec {
  LossKind kind = LossKind::cross_entropy;
  double gamma = 1.0;   // focal exponent
  double beta = 0.999;  // class-balanced effective-number parameter
  bool cb_focal_base = false;
  std::vector<int> class_counts;  // required by class_balanced and balanced_softmax

  bool needs_counts() const {
    return kind == LossKind::class_balanced || kind == LossKind::balanced_softmax;
  }
  void validate(int num_classes) const;
  std::string label() const;
};

/// Scalar loss and its gradient with respect to the logits.
struct LossValue {
  double value = 0.0;
  Matrix grad;
};

/// Mean over the batch of -log softmax(z)[y], log-sum-exp stabilized.
LossValue ce_loss(const Matrix& logits, std::span<const int> labels);

/// Mean over the batch of -(1 - p_y)^gamma * log p_y.
LossValue focal_loss(const Matrix& logits, std::span<const int> labels, double gamma);

/// Effective-number weights (1 - beta) / (1 - beta^n_i), rescaled so they
/// average to 1 over classes.
std::vector<double> class_balanced_weights(std::span<const int> counts, double beta);

/// Per-sample class weight times the base loss, averaged over the batch.
LossValue class_balanced_loss(const Matrix& logits, std::span<const int> labels,
                              std::span<const int> counts, double beta, bool focal_base = false,
                              double gamma = 1.0);

/// Cross-entropy over logits shifted by log(count) per class.
LossValue balanced_softmax_loss(const Matrix& logits, std::span<const int> labels,
                                std::span<const int> counts);

/// Dispatches on the spec.
LossValue classification_loss(const Matrix& logits, std::span<const int> labels,
                              const LossSpec& spec);

/// Mean over all B * D entries of (v - v_hat)^2; gradient is w.r.t. v.
LossValue feature_distill_loss(const Matrix& v, const Matrix& v_hat);

struct StudentLoss {
  double value = 0.0;
  double classification = 0.0;
  double distill = 0.0;
  Matrix dlogits;
  Matrix dfeatures;
};

/// classification(logits) + alpha * feature_distill(v, v_hat).
StudentLoss student_loss(const Matrix& logits, std::span<const int> labels, const LossSpec& spec,
                         const Matrix& v, const Matrix& v_hat, double alpha);

nlohmann::json to_json(const LossSpec& spec);
std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& s);

}  // namespace ltkd
