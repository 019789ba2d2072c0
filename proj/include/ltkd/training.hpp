#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltkd/longtail_data.hpp"
#include "ltkd/losses.hpp"
#include "ltkd/model.hpp"
#include "ltkd/residual_layer.hpp"

namespace ltkd {

/// One violated invariant of a config struct, keyed by field name.
struct FieldProblem {
  std::string field;
  std::string message;
};

/// Epoch budget, alternation period and SGD hyperparameters of one stage.
/// The learning rate is multiplied by `lr_decay` at every milestone epoch.
struct ScheduleConfig {
  int epochs = 20;
  int period = 7;
  int batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<int> lr_milestones;
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only

  std::vector<FieldProblem> problems() const;
  void validate() const;
  double learning_rate_at(int epoch) const;
};

/// Epochs routed through the GN path.
inline bool is_gn_epoch(int epoch, int period) { return epoch % period == 0; }

enum class TransferMethod { decouple, high_conf_kernels, from_scratch };

std::string to_string(TransferMethod method);
TransferMethod parse_transfer_method(const std::string& s);

struct DistillConfig {
  TransferMethod method = TransferMethod::from_scratch;
  double alpha = 1.0;
  int top_k = 10;                // channels kept per class (high-confidence kernels)
  int confident_per_class = 10;  // images per class used to rank channels
  int fine_tune_epochs = 20;     // decouple / kernels; replaces the schedule's epoch count
  bool resample_teacher_noise = true;
  std::uint64_t seed = 0;        // student initialization (from-scratch)
  std::optional<BackboneSpec> student_backbone;

  std::vector<FieldProblem> problems() const;
  void validate() const;
};

/// Count thresholds for the many / medium / few diagnostic groups: a class is
/// "many" when its training count exceeds `many_above`, "few" when below
/// `few_below`, "medium" otherwise.
struct GroupThresholds {
  int many_above = 100;
  int few_below = 20;
};

struct MetricsRecord {
  int epoch = 0;
  std::string stage;  // baseline | teacher | student
  std::string split;  // train | test
  std::string path;   // std | gn
  double overall_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<int> class_support;
  std::optional<double> many_accuracy;
  std::optional<double> medium_accuracy;
  std::optional<double> few_accuracy;
  double loss = 0.0;
  // Extremes over every residual layer after the epoch's last projection.
  std::optional<double> residual_min_scale;
  std::optional<double> residual_min_shift;
  std::optional<double> residual_max_shift;
};

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& stage, int epoch, int batch, double loss);
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

struct TrainOptions {
  std::string stage = "teacher";
  const DatasetSplit* eval_split = nullptr;  // evaluated after every epoch when set
  GroupThresholds groups;
  bool freeze_residuals = false;  // keep residual layers at their current values
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(int epoch, const ModelState&)> on_epoch_end;
};

struct TrainResult {
  ModelState model;
  std::vector<MetricsRecord> history;
};

/// Plain STD-path training (no residual layers are consulted).
TrainResult train_baseline(const DatasetSplit& data, ModelState model, const LossSpec& loss,
                           const ScheduleConfig& sched, const TrainOptions& opts = {});

/// Alternating schedule: epochs with e % period == 0 take the GN path, the
/// rest the STD path. Residual layers are projected back to the feasible set
/// after every optimizer step.
TrainResult train_teacher(const DatasetSplit& data, ModelState model, const LossSpec& loss,
                          const ScheduleConfig& sched, const TrainOptions& opts = {});

struct KernelSelection {
  KernelMask mask;
  std::vector<std::string> warnings;
};

/// Per class: rank that class's training samples by the teacher's softmax
/// confidence for it, average the final-feature channel activations over the
/// top `confident` samples, and keep the `k` strongest channels. Ties go to
/// the lower sample / channel index.
KernelSelection select_high_conf_kernels(const ModelState& teacher, const DatasetSplit& data, int k,
                                         int confident);

/// Fresh student (seeded by cfg.seed) trained on ℓ + alpha * ℓ_F against the
/// teacher's GN-path features. The teacher is never modified.
TrainResult train_student_scratch(const ModelState& teacher, const DatasetSplit& data,
                                  const LossSpec& loss, const DistillConfig& cfg,
                                  const ScheduleConfig& sched, const TrainOptions& opts = {});

/// Student initialized from the teacher's backbone and classifier, then
/// fine-tuned for cfg.fine_tune_epochs with the restarted schedule.
TrainResult train_student_decouple(const ModelState& teacher, const DatasetSplit& data,
                                   const LossSpec& loss, const DistillConfig& cfg,
                                   const ScheduleConfig& sched, const TrainOptions& opts = {});

/// As the decouple variant, but the teacher adds its residual only on each
/// class's masked channels at the final feature site.
TrainResult train_student_kernels(const ModelState& teacher, const KernelMask& mask,
                                  const DatasetSplit& data, const LossSpec& loss,
                                  const DistillConfig& cfg, const ScheduleConfig& sched,
                                  const TrainOptions& opts = {});

/// Dispatches on cfg.method (selects kernels first for high_conf_kernels).
TrainResult train_student(const ModelState& teacher, const DatasetSplit& data, const LossSpec& loss,
                          const DistillConfig& cfg, const ScheduleConfig& sched,
                          const TrainOptions& opts = {}, std::vector<std::string>* warnings = nullptr);

/// STD-path top-1 evaluation. Group accuracies need the training counts.
MetricsRecord evaluate(const ModelState& model, const DatasetSplit& split,
                       std::span<const int> train_counts = {}, const GroupThresholds& groups = {});

}  // namespace ltkd
