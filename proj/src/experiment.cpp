#include "ltkd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace ltkd {

namespace fs = std::filesystem;
using nlohmann::json;

Datasets build_datasets(const ExperimentConfig& config) {
  const auto& d = config.dataset;
  switch (d.kind) {
    case DatasetKind::synthetic: {
      SynthMixtureSpec spec{d.longtail.num_classes, d.input_dim, d.class_separation, d.within_class_std,
                            per_class_counts(d.longtail), d.test_per_class};
      auto splits = make_synthetic_mixture(spec, d.seed);
      return {std::move(splits.train), std::move(splits.test)};
    }
    case DatasetKind::subsampled: {
      SynthMixtureSpec spec{d.longtail.num_classes, d.input_dim, d.class_separation, d.within_class_std,
                            std::vector<int>(d.longtail.num_classes, d.longtail.max_count), d.test_per_class};
      auto splits = make_synthetic_mixture(spec, d.seed);
      return {subsample_longtail(splits.train, d.longtail, derive_seed(d.seed, 7)), std::move(splits.test)};
    }
    case DatasetKind::files: {
      Datasets out{load_split(d.train_manifest), load_split(d.test_manifest)};
      for (const auto* split : {&out.train, &out.test}) {
        if (split->num_classes() != d.longtail.num_classes || split->input_dim() != d.input_dim)
          throw ValidationError("dataset files do not match dataset.longtail.num_classes / dataset.input_dim");
      }
      return out;
    }
  }
  throw ValidationError("unknown dataset kind");
}

std::optional<double> SeedResult::delta() const {
  if (!baseline || !ours) return std::nullopt;
  return ours->overall_accuracy - baseline->overall_accuracy;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  out.count = static_cast<int>(values.size());
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / values.size();
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (values.size() - 1));
  }
  return out;
}

namespace {

json optional_stats(const std::optional<MeanStd>& s) {
  if (!s) return nullptr;
  return {{"mean", s->mean}, {"std", s->std}, {"count", s->count}};
}

std::optional<MeanStd> stats_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return MeanStd{j.at("mean").get<double>(), j.at("std").get<double>(), j.at("count").get<int>()};
}

std::string student_stage(TransferMethod m) { return "student_" + to_string(m); }

void append_jsonl(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << j.dump() << '\n';
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void prepare_out_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite)
      throw ValidationError("output directory " + dir.string() +
                            " already holds results; choose a fresh directory or pass --overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

class Logger {
 public:
  explicit Logger(std::ostream* os) : os_(os) {}
  void line(const std::string& s) {
    if (!os_) return;
    std::lock_guard lock(mu_);
    *os_ << s << '\n';
    os_->flush();
  }

 private:
  std::ostream* os_;
  std::mutex mu_;
};

std::string pct(double acc) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * acc);
  return buf;
}

// Trains one stage with streamed history, checkpoints and final metrics.
struct StageRunner {
  const ExperimentConfig& config;
  const Datasets& data;
  fs::path dir;

  TrainOptions options(const std::string& stage, const ScheduleConfig& sched) const {
    fs::create_directories(dir);
    TrainOptions o;
    o.stage = stage;
    o.eval_split = &data.test;
    o.groups = config.groups;
    const auto history = dir / "history.jsonl";
    o.on_record = [history](const MetricsRecord& r) { append_jsonl(history, to_json(r)); };
    if (sched.checkpoint_every > 0) {
      const int every = sched.checkpoint_every;
      const auto d = dir;
      o.on_epoch_end = [every, d](int epoch, const ModelState& m) {
        if ((epoch + 1) % every == 0) {
          char name[32];
          std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
          save_checkpoint(m, d / name);
        }
      };
    }
    return o;
  }

  MetricsRecord finish(const std::string& stage, const TrainResult& result) const {
    save_checkpoint(result.model, dir / "model.ckpt");
    MetricsRecord final = evaluate(result.model, data.test, data.train.per_class_counts(), config.groups);
    final.stage = stage;
    final.epoch = result.history.empty() ? -1 : result.history.back().epoch;
    append_jsonl(dir / "final.jsonl", to_json(final));
    return final;
  }
};

struct PipelineSpec {
  bool run_teacher = true;
  std::vector<TransferMethod> methods;
};

void run_seed(const ExperimentConfig& config, const Datasets& data, std::uint64_t seed, const fs::path& out,
              const PipelineSpec& pipeline, Logger& log, std::vector<StageFailure>& failures,
              std::mutex& failures_mu) {
  const fs::path seed_dir = out / ("seed_" + std::to_string(seed));
  auto fail = [&](const std::string& stage, const std::string& message) {
    log.line("[seed " + std::to_string(seed) + "] " + stage + " FAILED: " + message);
    std::lock_guard lock(failures_mu);
    failures.push_back({stage, seed, message});
  };
  auto with_seed = [seed](ScheduleConfig s) {
    s.seed = seed;
    return s;
  };
  LossSpec loss = config.loss;
  if (loss.needs_counts()) loss.class_counts = data.train.per_class_counts();

  try {
    StageRunner stage{config, data, seed_dir / "baseline"};
    const auto sched = with_seed(config.baseline_schedule());
    ModelState init = init_model(config.backbone, {}, config.residual, seed);
    auto result = train_baseline(data.train, std::move(init), loss, sched, stage.options("baseline", sched));
    const auto final = stage.finish("baseline", result);
    log.line("[seed " + std::to_string(seed) + "] baseline test accuracy " + pct(final.overall_accuracy));
  } catch (const std::exception& e) {
    fail("baseline", e.what());
  }

  if (!pipeline.run_teacher) return;
  ModelState teacher;
  try {
    StageRunner stage{config, data, seed_dir / "teacher"};
    const auto sched = with_seed(config.stage1);
    ModelState init = init_model(config.backbone, config.insertion_points, config.residual, seed);
    auto result = train_teacher(data.train, std::move(init), loss, sched, stage.options("teacher", sched));
    const auto final = stage.finish("teacher", result);
    teacher = std::move(result.model);
    log.line("[seed " + std::to_string(seed) + "] teacher test accuracy (STD path) " +
             pct(final.overall_accuracy));
  } catch (const std::exception& e) {
    fail("teacher", e.what());
    return;
  }

  const std::string digest = parameter_digest(teacher);
  for (const auto method : pipeline.methods) {
    const std::string name = student_stage(method);
    try {
      StageRunner stage{config, data, seed_dir / name};
      DistillConfig cfg = config.distill;
      cfg.method = method;
      cfg.seed = seed;
      const auto sched = with_seed(config.stage2);
      std::vector<std::string> warnings;
      auto result = train_student(teacher, data.train, loss, cfg, sched, stage.options("student", sched), &warnings);
      for (const auto& w : warnings) log.line("[seed " + std::to_string(seed) + "] " + name + " warning: " + w);
      if (parameter_digest(teacher) != digest) throw std::logic_error("teacher parameters changed during distillation");
      const auto final = stage.finish("student", result);
      log.line("[seed " + std::to_string(seed) + "] " + name + " test accuracy " + pct(final.overall_accuracy));
    } catch (const std::exception& e) {
      fail(name, e.what());
    }
  }
}

void run_pipeline(const ExperimentConfig& config, const fs::path& out, const PipelineSpec& pipeline,
                  const RunOptions& options) {
  prepare_out_dir(out, options.overwrite);
  write_text(out / "config.json", to_json(config).dump(2) + "\n");
  Logger log(options.log);
  std::vector<StageFailure> failures;
  std::mutex failures_mu;

  Datasets data;
  try {
    data = build_datasets(config);
  } catch (const std::exception& e) {
    for (const auto seed : config.seeds) failures.push_back({"dataset", seed, e.what()});
  }
  if (failures.empty()) {
    const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(config.seeds.size())));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < config.seeds.size(); i = next++)
        run_seed(config, data, config.seeds[i], out, pipeline, log, failures, failures_mu);
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }
  std::sort(failures.begin(), failures.end(), [](const StageFailure& a, const StageFailure& b) {
    return std::tie(a.seed, a.stage) < std::tie(b.seed, b.stage);
  });
  for (const auto& f : failures)
    append_jsonl(out / "failures.jsonl", {{"stage", f.stage}, {"seed", f.seed}, {"message", f.message}});
}

}  // namespace

json to_json(const RunSummary& s) {
  json per_seed = json::array();
  for (const auto& r : s.per_seed) {
    per_seed.push_back({{"seed", r.seed},
                        {"baseline", r.baseline ? to_json(*r.baseline) : json(nullptr)},
                        {"ours", r.ours ? to_json(*r.ours) : json(nullptr)},
                        {"delta", r.delta() ? json(*r.delta()) : json(nullptr)}});
  }
  json failures = json::array();
  for (const auto& f : s.failures) failures.push_back({{"stage", f.stage}, {"seed", f.seed}, {"message", f.message}});
  return {{"config_digest", s.config_digest},
          {"row_label", s.row_label},
          {"column_label", s.column_label},
          {"method", s.method},
          {"seeds", s.seeds},
          {"per_seed", per_seed},
          {"baseline_accuracy", optional_stats(s.baseline)},
          {"ours_accuracy", optional_stats(s.ours)},
          {"delta", s.delta ? json(*s.delta) : json(nullptr)},
          {"failures", failures}};
}

RunSummary summary_from_json(const json& j) {
  RunSummary s;
  s.config_digest = j.at("config_digest").get<std::string>();
  s.row_label = j.at("row_label").get<std::string>();
  s.column_label = j.at("column_label").get<std::string>();
  s.method = j.at("method").get<std::string>();
  s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& r : j.at("per_seed")) {
    SeedResult sr;
    sr.seed = r.at("seed").get<std::uint64_t>();
    if (!r.at("baseline").is_null()) sr.baseline = metrics_from_json(r.at("baseline"));
    if (!r.at("ours").is_null()) sr.ours = metrics_from_json(r.at("ours"));
    s.per_seed.push_back(std::move(sr));
  }
  s.baseline = stats_from(j.at("baseline_accuracy"));
  s.ours = stats_from(j.at("ours_accuracy"));
  if (!j.at("delta").is_null()) s.delta = j.at("delta").get<double>();
  for (const auto& f : j.at("failures"))
    s.failures.push_back({f.at("stage").get<std::string>(), f.at("seed").get<std::uint64_t>(),
                          f.at("message").get<std::string>()});
  return s;
}

RunSummary load_run_summary(const fs::path& run_dir, std::optional<TransferMethod> method) {
  std::ifstream in(run_dir / "config.json");
  if (!in) throw ValidationError(run_dir.string() + " is not a run directory (no config.json)");
  json cj;
  in >> cj;
  auto parsed = config_from_json(cj);
  if (!parsed.ok()) throw ValidationError(run_dir.string() + "/config.json: " + parsed.errors.front());
  const ExperimentConfig& config = *parsed.config;
  const TransferMethod m = method.value_or(config.distill.method);
  const std::string ours_stage = student_stage(m);

  RunSummary s;
  s.config_digest = config_digest(config);
  s.row_label = config.loss.label();
  s.column_label = config.dataset_label();
  s.method = to_string(m);
  s.seeds = config.seeds;
  std::vector<double> base_acc, ours_acc, deltas;
  for (const auto seed : config.seeds) {
    SeedResult r;
    r.seed = seed;
    const fs::path seed_dir = run_dir / ("seed_" + std::to_string(seed));
    if (auto rows = read_jsonl(seed_dir / "baseline" / "final.jsonl"); !rows.empty())
      r.baseline = metrics_from_json(rows.back());
    if (auto rows = read_jsonl(seed_dir / ours_stage / "final.jsonl"); !rows.empty())
      r.ours = metrics_from_json(rows.back());
    if (r.baseline) base_acc.push_back(r.baseline->overall_accuracy);
    if (r.ours) ours_acc.push_back(r.ours->overall_accuracy);
    s.per_seed.push_back(std::move(r));
  }
  if (!base_acc.empty()) s.baseline = mean_std(base_acc);
  if (!ours_acc.empty()) s.ours = mean_std(ours_acc);
  if (s.baseline && s.ours) s.delta = s.ours->mean - s.baseline->mean;

  for (const auto& f : read_jsonl(run_dir / "failures.jsonl")) {
    const auto stage = f.at("stage").get<std::string>();
    if (stage.rfind("student_", 0) == 0 && stage != ours_stage) continue;
    s.failures.push_back({stage, f.at("seed").get<std::uint64_t>(), f.at("message").get<std::string>()});
  }
  return s;
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& out_dir, const RunOptions& options) {
  // Without insertion points there is no teacher: the run is baseline only.
  const bool teacher = !config.insertion_points.empty();
  run_pipeline(config, out_dir,
               teacher ? PipelineSpec{true, {config.distill.method}} : PipelineSpec{false, {}}, options);
  RunSummary summary = load_run_summary(out_dir);
  write_text(out_dir / "summary.json", to_json(summary).dump(2) + "\n");
  write_text(out_dir / "summary.txt", emit_comparison_table({summary}, TableFormat::plain));
  return summary;
}

std::vector<RunSummary> run_method_comparison(const ExperimentConfig& config, const fs::path& out_dir,
                                              const RunOptions& options) {
  const std::vector<TransferMethod> methods = {TransferMethod::decouple, TransferMethod::high_conf_kernels,
                                               TransferMethod::from_scratch};
  run_pipeline(config, out_dir, PipelineSpec{true, methods}, options);
  std::vector<RunSummary> out;
  json all = json::array();
  for (const auto m : methods) {
    out.push_back(load_run_summary(out_dir, m));
    all.push_back(to_json(out.back()));
  }
  write_text(out_dir / "summary.json", all.dump(2) + "\n");
  write_text(out_dir / "summary.txt", emit_method_table(out, TableFormat::plain));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

TableFormat parse_table_format(const std::string& s) {
  if (s == "plain") return TableFormat::plain;
  if (s == "csv") return TableFormat::csv;
  if (s == "markdown") return TableFormat::markdown;
  throw ValidationError("unknown table format '" + s + "' (plain|csv|markdown)");
}

std::string format_gain(double gain_points) {
  const double rounded = std::round(gain_points * 100.0) / 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", rounded == 0.0 ? 0.0 : rounded);
  return buf;
}

namespace {

double round2(double x) { return std::round(x * 100.0) / 100.0; }

std::string fixed2(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", x);
  return buf;
}

// Renders rows of cells; the first row is the header.
std::string render(const std::vector<std::vector<std::string>>& rows, TableFormat format) {
  std::ostringstream os;
  if (format == TableFormat::csv) {
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        const bool quote = row[c].find_first_of(",\"") != std::string::npos;
        std::string cell = row[c];
        if (quote) {
          std::string q = "\"";
          for (char ch : cell) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
          cell = q + "\"";
        }
        os << (c ? "," : "") << cell;
      }
      os << '\n';
    }
    return os.str();
  }
  std::vector<std::size_t> width;
  auto display_len = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;  // count UTF-8 code points
    return n;
  };
  for (const auto& row : rows) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display_len(row[c]));
  }
  auto line = [&](const std::vector<std::string>& row) {
    const bool md = format == TableFormat::markdown;
    if (md) os << "| ";
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < row.size() ? row[c] : "";
      os << cell << std::string(width[c] - display_len(cell), ' ');
      if (c + 1 < width.size()) os << " | ";
    }
    if (md) os << " |";
    os << '\n';
  };
  line(rows.front());
  if (format == TableFormat::markdown) {
    os << "|";
    for (auto w : width) os << std::string(w + 2, '-') << "|";
    os << '\n';
  } else {
    std::size_t total = 0;
    for (auto w : width) total += w + 3;
    os << std::string(total - 3, '-') << '\n';
  }
  for (std::size_t r = 1; r < rows.size(); ++r) line(rows[r]);
  return os.str();
}

}  // namespace

std::string emit_comparison_table(const std::vector<RunSummary>& summaries, TableFormat format) {
  if (summaries.empty()) throw ValidationError("no run summaries to tabulate");
  std::vector<std::string> columns, row_order;
  std::map<std::pair<std::string, std::string>, const RunSummary*> cells;
  for (const auto& s : summaries) {
    if (std::find(columns.begin(), columns.end(), s.column_label) == columns.end()) columns.push_back(s.column_label);
    if (std::find(row_order.begin(), row_order.end(), s.row_label) == row_order.end()) row_order.push_back(s.row_label);
    if (!cells.emplace(std::make_pair(s.row_label, s.column_label), &s).second)
      throw ValidationError("two runs share row '" + s.row_label + "' and column '" + s.column_label + "'");
  }
  for (const auto& r : row_order)
    for (const auto& c : columns)
      if (!cells.count({r, c}))
        throw ValidationError("mismatched dataset axis: row '" + r + "' has no run for column '" + c + "'");

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"Loss"};
  if (format == TableFormat::csv) header.push_back("variant");
  header.insert(header.end(), columns.begin(), columns.end());
  rows.push_back(header);
  for (const auto& r : row_order) {
    std::vector<std::string> base = {r}, ours = {format == TableFormat::csv ? r : "+Ours"}, gain = {r};
    if (format == TableFormat::csv) {
      base.push_back("baseline");
      ours.push_back("ours");
      gain.push_back("gain");
    }
    for (const auto& c : columns) {
      const RunSummary& s = *cells.at({r, c});
      const std::string b = s.baseline ? fixed2(round2(100.0 * s.baseline->mean)) : "n/a";
      const std::string o = s.ours ? fixed2(round2(100.0 * s.ours->mean)) : "n/a";
      const std::string g = s.baseline && s.ours
                                ? format_gain(round2(100.0 * s.ours->mean) - round2(100.0 * s.baseline->mean))
                                : "n/a";
      base.push_back(b);
      if (format == TableFormat::csv) {
        ours.push_back(o);
        gain.push_back(g);
      } else {
        ours.push_back(o + " (" + g + ")");
      }
    }
    rows.push_back(base);
    rows.push_back(ours);
    if (format == TableFormat::csv) rows.push_back(gain);
  }
  return render(rows, format);
}

std::string emit_method_table(const std::vector<RunSummary>& summaries, TableFormat format) {
  if (summaries.empty()) throw ValidationError("no run summaries to tabulate");
  const auto& first = summaries.front();
  for (const auto& s : summaries)
    if (s.config_digest != first.config_digest)
      throw ValidationError("method rows come from different configs");
  static const std::map<std::string, std::string> names = {
      {"decouple", "Classical Decouple"},
      {"high_conf_kernels", "Distillation with High-confidence Kernels"},
      {"from_scratch", "Distilling from Scratch"}};
  std::vector<std::vector<std::string>> rows = {{"#", "Method", "Accuracy", "Gain"}};
  const bool have_base = first.baseline.has_value();
  const double base = have_base ? round2(100.0 * first.baseline->mean) : 0.0;
  rows.push_back({"1", "Baseline", have_base ? fixed2(base) : "n/a", "-"});
  int index = 2;
  for (const auto& s : summaries) {
    const auto it = names.find(s.method);
    std::vector<std::string> row = {std::to_string(index++), it == names.end() ? s.method : it->second};
    if (s.ours) {
      const double acc = round2(100.0 * s.ours->mean);
      row.push_back(fixed2(acc));
      row.push_back(have_base ? format_gain(acc - base) : "n/a");
    } else {
      row.push_back("n/a");
      row.push_back("n/a");
    }
    rows.push_back(row);
  }
  return render(rows, format);
}

PlacementReport ablation_gn_placement(const ExperimentConfig& config,
                                      const std::vector<std::vector<InsertionPoint>>& placements,
                                      const fs::path& out_dir, const RunOptions& options) {
  const int blocks = config.backbone.num_blocks();
  if (blocks < 3) throw ValidationError("placement ablation needs a backbone with at least 3 blocks");
  PlacementReport report;
  report.num_blocks = blocks;
  std::vector<std::vector<InsertionPoint>> unique;
  for (auto p : placements) {
    for (const auto point : p)
      if (point.block < 1 || point.block > blocks)
        throw ValidationError("placement references block " + std::to_string(point.block) + " but the backbone has " +
                              std::to_string(blocks));
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    if (std::find(unique.begin(), unique.end(), p) != unique.end()) {
      std::string name;
      for (const auto point : p) name += (name.empty() ? "" : ",") + std::to_string(point.block);
      report.warnings.push_back("duplicate placement {" + name + "} ignored");
      continue;
    }
    unique.push_back(std::move(p));
  }
  prepare_out_dir(out_dir, options.overwrite);
  RunOptions inner = options;
  inner.overwrite = false;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    const auto& placement = unique[i];
    std::string name = "placement_" + std::to_string(i + 1) + "_";
    if (placement.empty()) name += "none";
    for (std::size_t k = 0; k < placement.size(); ++k)
      name += (k ? "-b" : "b") + std::to_string(placement[k].block);
    ExperimentConfig cfg = config;
    cfg.insertion_points = placement;
    cfg.distill.method = TransferMethod::from_scratch;
    const fs::path dir = out_dir / name;
    PlacementRow row{placement, {}, dir.string()};
    const auto s = run_experiment(cfg, dir, inner);
    if (placement.empty() && s.baseline) row.accuracy = *s.baseline;
    if (!placement.empty() && s.ours) row.accuracy = *s.ours;
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string emit_placement_table(const PlacementReport& report, TableFormat format) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"#"};
  for (int b = 1; b <= report.num_blocks; ++b) header.push_back("Block" + std::to_string(b));
  header.push_back("Accuracy (%)");
  header.push_back("Std");
  rows.push_back(header);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    std::vector<std::string> row = {std::to_string(i + 1)};
    for (int b = 1; b <= report.num_blocks; ++b) {
      const bool on = std::find(r.placement.begin(), r.placement.end(), InsertionPoint{b}) != r.placement.end();
      row.push_back(on ? "✓" : "-");
    }
    row.push_back(r.accuracy.count ? fixed2(round2(100.0 * r.accuracy.mean)) : "n/a");
    row.push_back(r.accuracy.count ? fixed2(round2(100.0 * r.accuracy.std)) : "n/a");
    rows.push_back(row);
  }
  return render(rows, format);
}

}  // namespace ltkd
