// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <boost/multiprecision/cpp_dec_float.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "ltkd/config.hpp"
#include "ltkd/experiment.hpp"
#include "ltkd/losses.hpp"
#include "ltkd/training.hpp"
#include "test_util.hpp"

using namespace ltkd;
using Big = boost::multiprecision::cpp_dec_float_100;

namespace {

constexpr double kLossTol = 1e-9;
constexpr double kGradRelTol = 1e-4;
constexpr double kFdStep = 1e-6;
constexpr double kMomentTol = 0.02;
constexpr int kMomentDraws = 100000;
constexpr int kDeskSeeds = 5;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Verdict dataset_profile() {
  int checked = 0, mismatched = 0;
  for (double imbalance : {100.0, 50.0, 10.0}) {
    const auto counts = per_class_counts({10, 5000, imbalance});
    for (int i = 0; i < 10; ++i) {
      const Big exact = Big(5000) * boost::multiprecision::pow(Big(imbalance), Big(-i) / Big(9));
      const int oracle = std::max(1, boost::multiprecision::floor(exact + Big("0.5")).convert_to<int>());
      ++checked;
      if (counts[i] != oracle) ++mismatched;
    }
  }
  return {mismatched == 0, std::to_string(checked) + " counts checked, " + std::to_string(mismatched) + " mismatched"};
}

Verdict loss_oracles() {
  Rng rng(20240);
  double worst_focal = 0, worst_cb = 0, worst_bs = 0;
  const std::vector<int> counts = {500, 300, 180, 110, 60, 40, 20, 12, 7, 5};
  const std::vector<int> uniform(10, 50);
  for (int t = 0; t < 100; ++t) {
    const Matrix z = test::random_matrix(32, 10, rng, 4.0);
    const auto y = test::random_labels(32, 10, rng);
    const double ce = ce_loss(z, y).value;
    worst_focal = std::max(worst_focal, std::abs(focal_loss(z, y, 0.0).value - ce));
    worst_cb = std::max(worst_cb, std::abs(class_balanced_loss(z, y, counts, 0.0).value - ce));
    worst_bs = std::max(worst_bs, std::abs(balanced_softmax_loss(z, y, uniform).value - ce));
  }
  const double uniform_err = std::abs(ce_loss(Matrix::Constant(4, 10, 0.37), std::vector<int>{0, 3, 6, 9}).value -
                                      std::log(10.0));
  const bool pass = worst_focal < kLossTol && worst_cb < kLossTol && worst_bs < kLossTol && uniform_err < kLossTol;
  return {pass, "max |diff| focal " + fmt("%.2e", worst_focal) + ", CB " + fmt("%.2e", worst_cb) + ", BS " +
                    fmt("%.2e", worst_bs) + ", uniform-vs-lnC " + fmt("%.2e", uniform_err)};
}

Verdict gradient_agreement() {
  double worst = 0.0;
  std::size_t bad = 0, residual_entries = 0;
  const std::vector<std::pair<BackboneFamily, ResidualOptions>> variants = {
      {BackboneFamily::mlp, {}},
      {BackboneFamily::small_convnet, {}},
      {BackboneFamily::small_convnet, {true, NoiseLayout::per_position}}};
  for (std::size_t v = 0; v < variants.size(); ++v) {
    BackboneSpec spec;
    spec.family = variants[v].first;
    spec.input_dim = 4;
    spec.num_classes = 3;
    spec.widths = {5, 4, 3};
    auto model = init_model(spec, test::sites({1, 2, 3}), variants[v].second, 100 + v);
    for (const auto& [_, p] : model.params.residuals) residual_entries += 2 * p.scale.size();
    Rng rng(200 + v);
    const Matrix x = test::random_matrix(6, 4, rng);
    const auto y = test::random_labels(6, 3, rng);
    const NoiseDraw noise = draw_noise(model, 6, rng);
    const GnInput gn{y, &noise, nullptr};
    const auto trace = trace_forward(model, x, &gn);
    const Parameters grads = backward(model, trace, ce_loss(trace.logits, y).grad);
    double w = 0.0;
    bad += test::check_gradients(
               model, grads, [&](const ModelState& m) { return ce_loss(trace_forward(m, x, &gn).logits, y).value; },
               kGradRelTol, kFdStep, &w)
               .size();
    worst = std::max(worst, w);
  }
  return {bad == 0, "max relative error " + fmt("%.2e", worst) + " over mlp + 2 convnet variants (" +
                        std::to_string(residual_entries) + " residual a/b entries included)"};
}

Verdict residual_moments() {
  ResidualParams p{Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 0.5)};
  Rng rng(7);
  const Matrix r = sample_residual(p, std::vector<int>(kMomentDraws / 100, 0), 100, rng);
  const double mean = r.mean();
  const double sd = std::sqrt((r.array() - mean).square().sum() / (r.size() - 1));
  const bool pass = std::abs(mean - 0.5) <= kMomentTol && std::abs(sd - 2.0) <= kMomentTol;
  return {pass, "mean " + fmt("%.4f", mean) + ", std " + fmt("%.4f", sd) + " over " + std::to_string(r.size()) +
                    " draws"};
}

ExperimentConfig desk_config() {
  auto r = parse_config(R"({
    "dataset": {"kind": "synthetic", "longtail": {"num_classes": 10, "max_count": 500, "imbalance_factor": 100},
                "input_dim": 32, "test_per_class": 100},
    "loss": {"kind": "ce"},
    "stage2": {"method": "from_scratch"}
  })");
  if (!r.ok()) throw std::runtime_error(r.errors.front());
  return *r.config;
}

struct SharedRuns {
  ExperimentConfig config = desk_config();
  Datasets data = build_datasets(config);
  std::vector<MetricsRecord> teacher_history_p7;
  std::vector<MetricsRecord> teacher_history_p1;
  ModelState teacher;
};

Verdict schedule(SharedRuns& s) {
  ScheduleConfig sched = s.config.stage1;
  sched.epochs = 20;
  sched.period = 7;
  const auto init = init_model(s.config.backbone, s.config.insertion_points, s.config.residual, 0);
  auto r7 = train_teacher(s.data.train, init, s.config.loss, sched);
  sched.period = 1;
  auto r1 = train_teacher(s.data.train, init, s.config.loss, sched);
  std::set<int> gn7, gn1;
  for (const auto& rec : r7.history)
    if (rec.path == "gn") gn7.insert(rec.epoch);
  for (const auto& rec : r1.history)
    if (rec.path == "gn") gn1.insert(rec.epoch);
  std::set<int> all;
  for (int e = 0; e < 20; ++e) all.insert(e);
  s.teacher_history_p7 = r7.history;
  s.teacher_history_p1 = r1.history;
  s.teacher = std::move(r7.model);
  std::string listed;
  for (int e : gn7) listed += (listed.empty() ? "" : ",") + std::to_string(e);
  return {gn7 == std::set<int>{0, 7, 14} && gn1 == all,
          "period 7 GN epochs {" + listed + "}, period 1 GN epochs " + std::to_string(gn1.size()) + "/20"};
}

Verdict reduction(SharedRuns& s) {
  DistillConfig cfg = s.config.distill;
  cfg.alpha = 0.0;
  cfg.seed = 3;
  ScheduleConfig sched = s.config.stage2;
  sched.seed = 3;
  TrainOptions opts;
  opts.eval_split = &s.data.test;
  const auto student = train_student_scratch(s.teacher, s.data.train, s.config.loss, cfg, sched, opts);
  const auto baseline =
      train_baseline(s.data.train, init_model(s.config.backbone, {}, s.config.residual, 3), s.config.loss, sched, opts);
  bool same = student.history.size() == baseline.history.size();
  for (std::size_t i = 0; same && i < student.history.size(); ++i) {
    const auto& a = student.history[i];
    const auto& b = baseline.history[i];
    same = a.loss == b.loss && a.per_class_accuracy == b.per_class_accuracy && a.overall_accuracy == b.overall_accuracy;
  }
  same = same && parameter_digest(student.model) == parameter_digest(baseline.model);
  return {same, std::to_string(student.history.size()) + " records compared bitwise, final parameter digests " +
                    (parameter_digest(student.model) == parameter_digest(baseline.model) ? "equal" : "differ")};
}

Verdict frozen_and_feasible(SharedRuns& s) {
  const std::string digest = parameter_digest(s.teacher);
  int runs = 0;
  bool unchanged = true;
  for (auto method : {TransferMethod::decouple, TransferMethod::high_conf_kernels, TransferMethod::from_scratch}) {
    DistillConfig cfg = s.config.distill;
    cfg.method = method;
    cfg.fine_tune_epochs = 3;
    ScheduleConfig sched = s.config.stage2;
    sched.epochs = 3;
    train_student(s.teacher, s.data.train, s.config.loss, cfg, sched);
    ++runs;
    unchanged = unchanged && parameter_digest(s.teacher) == digest;
  }
  int epochs = 0;
  bool feasible = true;
  double min_scale = 1e300, min_shift = 1e300, max_shift = -1e300;
  for (const auto* history : {&s.teacher_history_p7, &s.teacher_history_p1})
    for (const auto& rec : *history) {
      if (rec.split != "train") continue;
      ++epochs;
      if (!rec.residual_min_scale) {
        feasible = false;
        continue;
      }
      min_scale = std::min(min_scale, *rec.residual_min_scale);
      min_shift = std::min(min_shift, *rec.residual_min_shift);
      max_shift = std::max(max_shift, *rec.residual_max_shift);
    }
  feasible = feasible && min_scale >= 0.0 && min_shift >= 0.0 && max_shift <= 1.0;
  return {unchanged && feasible, "digest unchanged across " + std::to_string(runs) + " stage-2 runs: " +
                                     (unchanged ? "yes" : "no") + "; over " + std::to_string(epochs) +
                                     " stage-1 epochs min a " + fmt("%.4f", min_scale) + ", b in [" +
                                     fmt("%.4f", min_shift) + ", " + fmt("%.4f", max_shift) + "]"};
}

Verdict desk_experiment(const std::filesystem::path& root) {
  auto config = desk_config();
  config.seeds.clear();
  for (int s = 0; s < kDeskSeeds; ++s) config.seeds.push_back(s);
  RunOptions opts;
  opts.overwrite = true;
  const auto summary = run_experiment(config, root / "desk", opts);
  if (!summary.complete()) return {false, "run incomplete: " + std::to_string(summary.failures.size()) + " failures"};
  std::string deltas;
  for (const auto& r : summary.per_seed) deltas += (deltas.empty() ? "" : " ") + fmt("%+.2f", 100.0 * *r.delta());
  std::cout << "    baseline " << fmt("%.2f", 100 * summary.baseline->mean) << " +/- "
            << fmt("%.2f", 100 * summary.baseline->std) << ", ours " << fmt("%.2f", 100 * summary.ours->mean)
            << " +/- " << fmt("%.2f", 100 * summary.ours->std) << ", per-seed deltas [" << deltas << "]\n";
  return {*summary.delta > 0.0, "mean delta " + fmt("%+.2f", 100.0 * *summary.delta) + " points over " +
                                    std::to_string(summary.per_seed.size()) + " seeds"};
}

Verdict method_report(const std::filesystem::path& root) {
  auto config = desk_config();
  config.seeds = {0, 1, 2};
  RunOptions opts;
  opts.overwrite = true;
  const auto summaries = run_method_comparison(config, root / "methods", opts);
  const std::string table = emit_method_table(summaries, TableFormat::plain);
  std::istringstream lines(table);
  std::string line;
  int rows = 0;
  bool labels_ok = true;
  const char* expected[] = {"Baseline", "Classical Decouple", "Distillation with High-confidence Kernels",
                            "Distilling from Scratch"};
  std::getline(lines, line);  // header
  std::getline(lines, line);  // rule
  while (std::getline(lines, line)) {
    if (rows < 4) labels_ok = labels_ok && line.find(expected[rows]) != std::string::npos;
    ++rows;
    std::cout << "    " << line << '\n';
  }
  bool complete = true;
  for (const auto& s : summaries) complete = complete && s.complete();
  const double scratch = summaries[2].ours->mean;
  const bool scratch_best = scratch >= summaries[0].ours->mean && scratch >= summaries[1].ours->mean;
  return {rows == 4 && labels_ok && complete,
          std::to_string(rows) + " rows; from-scratch best at desk scale: " + (scratch_best ? "yes" : "no") +
              " (recorded, not asserted)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path root =
      argc > 1 ? std::filesystem::path(argv[1]) : std::filesystem::temp_directory_path() / "ltkd_acceptance";
  std::filesystem::create_directories(root);
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& check) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << v.detail << " ["
              << fmt("%.1f", secs) << " s]" << std::endl;
  };

  report(1, "dataset profile exactness", dataset_profile);
  report(2, "loss oracle suite", loss_oracles);
  report(3, "gradient agreement", gradient_agreement);
  report(4, "residual moment check", residual_moments);
  SharedRuns shared;
  report(5, "schedule correctness", [&] { return schedule(shared); });
  report(6, "reduction identity", [&] { return reduction(shared); });
  report(7, "frozen teacher and feasibility", [&] { return frozen_and_feasible(shared); });
  report(8, "desk-scale directional experiment", [&] { return desk_experiment(root); });
  report(9, "method-comparison report", [&] { return method_report(root); });
  std::cout << "INFO  10. full-scale reproduction: out of desk scope, see README" << std::endl;
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << "(" << failures << " of 9 failed)" << std::endl;
  return failures ? 1 : 0;
}
