#include "ltkd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ltkd {

std::vector<FieldProblem> ScheduleConfig::problems() const {
  std::vector<FieldProblem> out;
  auto bad = [&](const char* field, const char* rule) {
    out.push_back({field, std::string("ScheduleConfig.") + field + " must " + rule});
  };
  if (epochs < 1) bad("epochs", "be >= 1");
  if (period < 1) bad("period", "be >= 1");
  if (batch_size < 1) bad("batch_size", "be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning_rate", "be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum", "lie in [0, 1)");
  if (!(weight_decay >= 0.0)) bad("weight_decay", "be >= 0");
  if (!(lr_decay > 0.0)) bad("lr_decay", "be > 0");
  for (int m : lr_milestones)
    if (m < 0) bad("lr_milestones", "be non-negative epochs");
  if (checkpoint_every < 0) bad("checkpoint_every", "be >= 0");
  return out;
}

void ScheduleConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw ValidationError(p.front().message);
}

double ScheduleConfig::learning_rate_at(int epoch) const {
  double lr = learning_rate;
  for (int m : lr_milestones)
    if (epoch >= m) lr *= lr_decay;
  return lr;
}

std::string to_string(TransferMethod method) {
  switch (method) {
    case TransferMethod::decouple:
      return "decouple";
    case TransferMethod::high_conf_kernels:
      return "high_conf_kernels";
    case TransferMethod::from_scratch:
      return "from_scratch";
  }
  return "?";
}

TransferMethod parse_transfer_method(const std::string& s) {
  if (s == "decouple") return TransferMethod::decouple;
  if (s == "high_conf_kernels") return TransferMethod::high_conf_kernels;
  if (s == "from_scratch") return TransferMethod::from_scratch;
  throw ValidationError("unknown transfer method '" + s + "' (decouple|high_conf_kernels|from_scratch)");
}

std::vector<FieldProblem> DistillConfig::problems() const {
  std::vector<FieldProblem> out;
  auto bad = [&](const char* field, const char* rule) {
    out.push_back({field, std::string("DistillConfig.") + field + " must " + rule});
  };
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) bad("alpha", "be finite and >= 0");
  if (top_k < 1) bad("top_k", "be >= 1");
  if (confident_per_class < 1) bad("confident_per_class", "be >= 1");
  if (fine_tune_epochs < 0) bad("fine_tune_epochs", "be >= 0");
  if (student_backbone) {
    try {
      student_backbone->validate();
    } catch (const ValidationError& e) {
      out.push_back({"student_backbone", e.what()});
    }
  }
  return out;
}

void DistillConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw ValidationError(p.front().message);
}

TrainingDiverged::TrainingDiverged(const std::string& stage, int epoch, int batch, double loss)
    : std::runtime_error(stage + " training diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch) + " (loss " + std::to_string(loss) + ")"),
      epoch_(epoch),
      batch_(batch) {}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index j = 0; j < logits.rows(); ++j) {
    Eigen::Index best = 0;
    logits.row(j).maxCoeff(&best);  // first maximum on ties
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

// Fills the accuracy fields of a record from predictions.
void score(MetricsRecord& rec, std::span<const int> predictions, std::span<const int> labels,
           int num_classes, std::span<const int> train_counts, const GroupThresholds& groups) {
  std::vector<int> correct(num_classes, 0);
  rec.class_support.assign(num_classes, 0);
  int total_correct = 0;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    ++rec.class_support[labels[j]];
    if (predictions[j] == labels[j]) {
      ++correct[labels[j]];
      ++total_correct;
    }
  }
  rec.overall_accuracy = labels.empty() ? 0.0 : static_cast<double>(total_correct) / labels.size();
  rec.per_class_accuracy.assign(num_classes, 0.0);
  for (int c = 0; c < num_classes; ++c)
    if (rec.class_support[c] > 0)
      rec.per_class_accuracy[c] = static_cast<double>(correct[c]) / rec.class_support[c];

  if (train_counts.size() != static_cast<std::size_t>(num_classes)) return;
  double sums[3] = {0, 0, 0};
  int members[3] = {0, 0, 0};
  for (int c = 0; c < num_classes; ++c) {
    if (rec.class_support[c] == 0) continue;
    const int g = train_counts[c] > groups.many_above ? 0 : (train_counts[c] < groups.few_below ? 2 : 1);
    sums[g] += rec.per_class_accuracy[c];
    ++members[g];
  }
  std::optional<double>* slots[3] = {&rec.many_accuracy, &rec.medium_accuracy, &rec.few_accuracy};
  for (int g = 0; g < 3; ++g)
    if (members[g] > 0) *slots[g] = sums[g] / members[g];
}

void record_residual_extremes(MetricsRecord& rec, const ModelState& model) {
  if (model.params.residuals.empty()) return;
  double min_scale = INFINITY, min_shift = INFINITY, max_shift = -INFINITY;
  for (const auto& [_, rp] : model.params.residuals) {
    min_scale = std::min(min_scale, rp.scale.minCoeff());
    min_shift = std::min(min_shift, rp.shift.minCoeff());
    max_shift = std::max(max_shift, rp.shift.maxCoeff());
  }
  rec.residual_min_scale = min_scale;
  rec.residual_min_shift = min_shift;
  rec.residual_max_shift = max_shift;
}

bool all_finite(const Parameters& grad, int num_blocks) {
  bool ok = true;
  visit_parameters(
      grad, [&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); }, num_blocks);
  return ok;
}

/// SGD with optional momentum and (non-residual) weight decay:
///   v <- momentum * v + g + wd * p;  p <- p - lr * v
class Sgd {
 public:
  Sgd(const ModelState& model, const ScheduleConfig& sched, bool freeze_residuals)
      : velocity_(zeros_like(model.params)),
        momentum_(sched.momentum),
        weight_decay_(sched.weight_decay),
        freeze_residuals_(freeze_residuals),
        num_blocks_(model.spec.num_blocks()) {}

  void step(ModelState& model, const Parameters& grad, double lr) {
    auto params = collect(model.params);
    auto grads = collect(const_cast<Parameters&>(grad));
    auto vel = collect(velocity_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool residual = params[i].first.rfind("residual.", 0) == 0;
      if (residual && freeze_residuals_) continue;
      Matrix& p = *params[i].second;
      Matrix g = *grads[i].second;
      if (weight_decay_ > 0.0 && !residual) g += weight_decay_ * p;
      if (momentum_ > 0.0) {
        Matrix& v = *vel[i].second;
        v = momentum_ * v + g;
        p -= lr * v;
      } else {
        p -= lr * g;
      }
    }
    for (auto& [_, rp] : model.params.residuals) project_in_place(rp);
  }

 private:
  std::vector<std::pair<std::string, Matrix*>> collect(Parameters& p) const {
    std::vector<std::pair<std::string, Matrix*>> out;
    visit_parameters(p, [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); }, num_blocks_);
    return out;
  }

  Parameters velocity_;
  double momentum_;
  double weight_decay_;
  bool freeze_residuals_;
  int num_blocks_;
};

struct StepOutput {
  double loss = 0.0;
  Parameters grad;
  Matrix logits;
};

using StepFn = std::function<StepOutput(const ModelState&, const Batch&, int epoch, Rng& noise)>;
using PathFn = std::function<bool(int epoch)>;  // true: GN path

TrainResult run_training(ModelState model, const DatasetSplit& data, const ScheduleConfig& sched,
                         int epochs, const TrainOptions& opts, const PathFn& gn_epoch,
                         const StepFn& step) {
  InstanceSampler sampler(data, static_cast<std::size_t>(sched.batch_size), derive_seed(sched.seed, 1));
  Rng noise_rng(derive_seed(sched.seed, 2));
  Sgd optimizer(model, sched, opts.freeze_residuals);
  const int num_blocks = model.spec.num_blocks();
  TrainResult result;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = sched.learning_rate_at(epoch);
    const bool gn = gn_epoch(epoch);
    std::vector<int> predictions(data.size());
    double loss_sum = 0.0;
    int batch_index = 0;
    for (const auto& indices : sampler.next_epoch()) {
      const Batch batch = gather_batch(data, indices);
      StepOutput out = step(model, batch, epoch, noise_rng);
      if (!std::isfinite(out.loss) || !all_finite(out.grad, num_blocks))
        throw TrainingDiverged(opts.stage, epoch, batch_index, out.loss);
      optimizer.step(model, out.grad, lr);
      loss_sum += out.loss * static_cast<double>(indices.size());
      const auto pred = argmax_rows(out.logits);
      for (std::size_t r = 0; r < indices.size(); ++r) predictions[indices[r]] = pred[r];
      ++batch_index;
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.stage = opts.stage;
    rec.split = "train";
    rec.path = gn ? "gn" : "std";
    rec.loss = loss_sum / static_cast<double>(data.size());
    score(rec, predictions, data.labels(), data.num_classes(), data.per_class_counts(), opts.groups);
    record_residual_extremes(rec, model);
    result.history.push_back(rec);
    if (opts.on_record) opts.on_record(rec);

    if (opts.eval_split) {
      MetricsRecord eval = evaluate(model, *opts.eval_split, data.per_class_counts(), opts.groups);
      eval.epoch = epoch;
      eval.stage = opts.stage;
      result.history.push_back(eval);
      if (opts.on_record) opts.on_record(eval);
    }
    if (opts.on_epoch_end) opts.on_epoch_end(epoch, model);
  }
  result.model = std::move(model);
  return result;
}

void check_loss_fits(const LossSpec& loss, const ModelState& model) {
  loss.validate(model.spec.num_classes);
}

void check_data_fits(const DatasetSplit& data, const ModelState& model) {
  if (data.empty()) throw ValidationError("training split is empty");
  if (data.num_classes() != model.spec.num_classes)
    throw ValidationError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                          std::to_string(model.spec.num_classes));
  if (data.input_dim() != model.spec.input_dim)
    throw ValidationError("dataset input dim " + std::to_string(data.input_dim()) +
                          " does not match backbone input_dim " + std::to_string(model.spec.input_dim));
}

// Teacher features for distillation: GN path with the batch's true labels.
class TeacherFeatures {
 public:
  TeacherFeatures(const ModelState& teacher, const DatasetSplit& data, const KernelMask* mask,
                  bool resample, std::uint64_t seed)
      : teacher_(teacher), mask_(mask), resample_(resample) {
    if (!resample_) {
      // One frozen draw per training sample.
      Rng rng(derive_seed(seed, 3));
      const NoiseDraw noise = draw_noise(teacher_, static_cast<Eigen::Index>(data.size()), rng);
      const GnInput gn{data.labels(), &noise, mask_};
      frozen_ = trace_forward(teacher_, data.inputs(), &gn).features;
    }
  }

  Matrix operator()(const Batch& batch, Rng& rng) const {
    if (!resample_) {
      Matrix out(static_cast<Eigen::Index>(batch.indices.size()), frozen_.cols());
      for (std::size_t r = 0; r < batch.indices.size(); ++r)
        out.row(static_cast<Eigen::Index>(r)) = frozen_.row(static_cast<Eigen::Index>(batch.indices[r]));
      return out;
    }
    const NoiseDraw noise = draw_noise(teacher_, batch.inputs.rows(), rng);
    const GnInput gn{batch.labels, &noise, mask_};
    return trace_forward(teacher_, batch.inputs, &gn).features;
  }

 private:
  const ModelState& teacher_;
  const KernelMask* mask_;
  bool resample_;
  Matrix frozen_;
};

TrainResult distill(const ModelState& teacher, ModelState student, const DatasetSplit& data,
                    const LossSpec& loss, const DistillConfig& cfg, const ScheduleConfig& sched,
                    int epochs, const KernelMask* mask, TrainOptions opts) {
  cfg.validate();
  check_data_fits(data, teacher);
  check_data_fits(data, student);
  check_loss_fits(loss, student);
  if (student.spec.feature_dim() != teacher.spec.feature_dim())
    throw ValidationError("student feature dim " + std::to_string(student.spec.feature_dim()) +
                          " does not match teacher feature dim " + std::to_string(teacher.spec.feature_dim()));
  for (const auto& [point, rp] : teacher.params.residuals)
    if (!rp.feasible())
      throw ValidationError("teacher residual params at " + to_string(point, teacher.spec.num_blocks()) +
                            " are infeasible");
  if (mask) mask->validate(teacher.spec.num_classes, teacher.spec.feature_dim());
  if (opts.stage == "teacher") opts.stage = "student";

  const TeacherFeatures targets(teacher, data, mask, cfg.resample_teacher_noise, sched.seed);
  const double alpha = cfg.alpha;
  return run_training(
      std::move(student), data, sched, epochs, opts, [](int) { return false; },
      [&](const ModelState& model, const Batch& batch, int, Rng& rng) {
        const Matrix v_hat = targets(batch, rng);
        const ForwardTrace trace = trace_forward(model, batch.inputs);
        StudentLoss l = student_loss(trace.logits, batch.labels, loss, trace.features, v_hat, alpha);
        return StepOutput{l.value, backward(model, trace, l.dlogits, &l.dfeatures), trace.logits};
      });
}

ModelState student_from_teacher(const ModelState& teacher) { return without_residuals(teacher); }

}  // namespace

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j = {
      {"epoch", r.epoch},
      {"stage", r.stage},
      {"split", r.split},
      {"path", r.path},
      {"overall_accuracy", r.overall_accuracy},
      {"per_class_accuracy", r.per_class_accuracy},
      {"class_support", r.class_support},
      {"group_accuracy",
       {{"many", optional_json(r.many_accuracy)},
        {"medium", optional_json(r.medium_accuracy)},
        {"few", optional_json(r.few_accuracy)}}},
      {"loss", r.loss},
  };
  if (r.residual_min_scale)
    j["residual"] = {{"min_scale", *r.residual_min_scale},
                     {"min_shift", *r.residual_min_shift},
                     {"max_shift", *r.residual_max_shift}};
  return j;
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.stage = j.at("stage").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.overall_accuracy = j.at("overall_accuracy").get<double>();
  r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
  r.class_support = j.at("class_support").get<std::vector<int>>();
  const auto& g = j.at("group_accuracy");
  r.many_accuracy = optional_from(g, "many");
  r.medium_accuracy = optional_from(g, "medium");
  r.few_accuracy = optional_from(g, "few");
  r.loss = j.at("loss").get<double>();
  if (j.contains("residual")) {
    const auto& res = j.at("residual");
    r.residual_min_scale = res.at("min_scale").get<double>();
    r.residual_min_shift = res.at("min_shift").get<double>();
    r.residual_max_shift = res.at("max_shift").get<double>();
  }
  return r;
}

TrainResult train_baseline(const DatasetSplit& data, ModelState model, const LossSpec& loss,
                           const ScheduleConfig& sched, const TrainOptions& opts) {
  sched.validate();
  check_data_fits(data, model);
  check_loss_fits(loss, model);
  TrainOptions o = opts;
  if (o.stage == "teacher") o.stage = "baseline";
  return run_training(
      std::move(model), data, sched, sched.epochs, o, [](int) { return false; },
      [&](const ModelState& m, const Batch& batch, int, Rng&) {
        const ForwardTrace trace = trace_forward(m, batch.inputs);
        LossValue l = classification_loss(trace.logits, batch.labels, loss);
        return StepOutput{l.value, backward(m, trace, l.grad), trace.logits};
      });
}

TrainResult train_teacher(const DatasetSplit& data, ModelState model, const LossSpec& loss,
                          const ScheduleConfig& sched, const TrainOptions& opts) {
  sched.validate();
  check_data_fits(data, model);
  check_loss_fits(loss, model);
  if (!model.gn_enabled())
    throw ValidationError("teacher training needs at least one residual insertion point");
  for (auto& [_, rp] : model.params.residuals) project_in_place(rp);
  const int period = sched.period;
  return run_training(
      std::move(model), data, sched, sched.epochs, opts,
      [period](int e) { return is_gn_epoch(e, period); },
      [&](const ModelState& m, const Batch& batch, int epoch, Rng& rng) {
        ForwardTrace trace;
        NoiseDraw noise;
        if (is_gn_epoch(epoch, period)) {
          noise = draw_noise(m, batch.inputs.rows(), rng);
          const GnInput gn{batch.labels, &noise};
          trace = trace_forward(m, batch.inputs, &gn);
        } else {
          trace = trace_forward(m, batch.inputs);
        }
        LossValue l = classification_loss(trace.logits, batch.labels, loss);
        return StepOutput{l.value, backward(m, trace, l.grad), trace.logits};
      });
}

KernelSelection select_high_conf_kernels(const ModelState& teacher, const DatasetSplit& data, int k,
                                         int confident) {
  check_data_fits(data, teacher);
  const int channels = teacher.spec.feature_dim();
  if (k < 0 || k > channels)
    throw ValidationError("top_k " + std::to_string(k) + " outside [0, " + std::to_string(channels) + "]");
  if (confident < 1) throw ValidationError("confident_per_class must be >= 1");

  const ForwardResult fwd = forward_std(teacher, data.inputs());
  const auto by_class = data.indices_by_class();
  KernelSelection out;
  out.mask.channels.resize(teacher.spec.num_classes);
  for (int c = 0; c < teacher.spec.num_classes; ++c) {
    std::vector<std::size_t> members = by_class[c];
    if (members.empty()) throw ValidationError("class " + std::to_string(c) + " has no training samples");
    // Softmax confidence for the sample's own class.
    std::vector<double> confidence(members.size());
    for (std::size_t r = 0; r < members.size(); ++r) {
      const auto row = fwd.logits.row(static_cast<Eigen::Index>(members[r]));
      const double m = row.maxCoeff();
      confidence[r] = std::exp(row(c) - m) / (row.array() - m).exp().sum();
    }
    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });
    std::size_t take = static_cast<std::size_t>(confident);
    if (members.size() < take) {
      out.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                             " samples, fewer than " + std::to_string(confident) + "; using all of them");
      take = members.size();
    }
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(channels);
    for (std::size_t r = 0; r < take; ++r) mean += fwd.features.row(static_cast<Eigen::Index>(members[order[r]]));
    mean /= static_cast<double>(take);

    std::vector<int> ranked(channels);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) { return mean(a) > mean(b); });
    std::vector<int> chosen(ranked.begin(), ranked.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    out.mask.channels[c] = std::move(chosen);
  }
  return out;
}

TrainResult train_student_scratch(const ModelState& teacher, const DatasetSplit& data,
                                  const LossSpec& loss, const DistillConfig& cfg,
                                  const ScheduleConfig& sched, const TrainOptions& opts) {
  sched.validate();
  const BackboneSpec spec = cfg.student_backbone.value_or(teacher.spec);
  ModelState student = init_model(spec, {}, teacher.residual_options, cfg.seed);
  return distill(teacher, std::move(student), data, loss, cfg, sched, sched.epochs, nullptr, opts);
}

TrainResult train_student_decouple(const ModelState& teacher, const DatasetSplit& data,
                                   const LossSpec& loss, const DistillConfig& cfg,
                                   const ScheduleConfig& sched, const TrainOptions& opts) {
  sched.validate();
  return distill(teacher, student_from_teacher(teacher), data, loss, cfg, sched, cfg.fine_tune_epochs,
                 nullptr, opts);
}

TrainResult train_student_kernels(const ModelState& teacher, const KernelMask& mask,
                                  const DatasetSplit& data, const LossSpec& loss,
                                  const DistillConfig& cfg, const ScheduleConfig& sched,
                                  const TrainOptions& opts) {
  sched.validate();
  if (!teacher.params.residuals.count(InsertionPoint{teacher.spec.num_blocks()}))
    throw ValidationError("kernel-masked distillation needs a residual layer at the final feature site");
  return distill(teacher, student_from_teacher(teacher), data, loss, cfg, sched, cfg.fine_tune_epochs,
                 &mask, opts);
}

TrainResult train_student(const ModelState& teacher, const DatasetSplit& data, const LossSpec& loss,
                          const DistillConfig& cfg, const ScheduleConfig& sched, const TrainOptions& opts,
                          std::vector<std::string>* warnings) {
  switch (cfg.method) {
    case TransferMethod::from_scratch:
      return train_student_scratch(teacher, data, loss, cfg, sched, opts);
    case TransferMethod::decouple:
      return train_student_decouple(teacher, data, loss, cfg, sched, opts);
    case TransferMethod::high_conf_kernels: {
      const int k = std::min(cfg.top_k, teacher.spec.feature_dim());
      auto selection = select_high_conf_kernels(teacher, data, k, cfg.confident_per_class);
      if (warnings) warnings->insert(warnings->end(), selection.warnings.begin(), selection.warnings.end());
      return train_student_kernels(teacher, selection.mask, data, loss, cfg, sched, opts);
    }
  }
  throw ValidationError("unknown transfer method");
}

MetricsRecord evaluate(const ModelState& model, const DatasetSplit& split,
                       std::span<const int> train_counts, const GroupThresholds& groups) {
  if (split.empty()) throw ValidationError("cannot evaluate on an empty split");
  check_data_fits(split, model);
  const ForwardResult fwd = forward_std(model, split.inputs());
  MetricsRecord rec;
  rec.split = "test";
  rec.path = "std";
  rec.loss = ce_loss(fwd.logits, split.labels()).value;
  score(rec, argmax_rows(fwd.logits), split.labels(), split.num_classes(), train_counts, groups);
  return rec;
}

}  // namespace ltkd
