#include "ltkd/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace ltkd {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Reads typed fields out of a JSON object, recording (not throwing) every
// type error and unknown key against its dotted path.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  const json& object(const json& parent, const std::string& path, const char* key) {
    static const json empty = json::object();
    if (!parent.is_object() || !parent.contains(key)) return empty;
    const json& j = parent.at(key);
    if (!j.is_object()) {
      error(join(path, key), "expected an object");
      return empty;
    }
    return j;
  }

  void known_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) return;
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, _] : obj.items())
      if (!allowed.count(k)) error(join(path, k), "unknown key");
  }

  int integer(const json& obj, const std::string& path, const char* key, int fallback) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_number_integer()) return error(join(path, key), "expected an integer"), fallback;
    return j.get<int>();
  }

  std::uint64_t unsigned_integer(const json& obj, const std::string& path, const char* key,
                                 std::uint64_t fallback) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_number_unsigned()) return error(join(path, key), "expected a non-negative integer"), fallback;
    return j.get<std::uint64_t>();
  }

  double number(const json& obj, const std::string& path, const char* key, double fallback) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_number()) return error(join(path, key), "expected a number"), fallback;
    return j.get<double>();
  }

  bool boolean(const json& obj, const std::string& path, const char* key, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_boolean()) return error(join(path, key), "expected true or false"), fallback;
    return j.get<bool>();
  }

  std::string string(const json& obj, const std::string& path, const char* key, std::string fallback) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_string()) return error(join(path, key), "expected a string"), fallback;
    return j.get<std::string>();
  }

  template <class T, class Check>
  std::vector<T> list(const json& obj, const std::string& path, const char* key, std::vector<T> fallback,
                      Check is_ok, const char* what) {
    if (!obj.contains(key)) return fallback;
    const json& j = obj.at(key);
    if (!j.is_array()) return error(join(path, key), std::string("expected an array of ") + what), fallback;
    std::vector<T> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (!is_ok(j[i])) {
        error(join(path, key) + "[" + std::to_string(i) + "]", std::string("expected ") + what);
        continue;
      }
      out.push_back(j[i].get<T>());
    }
    return out;
  }

  void error(const std::string& path, const std::string& message) { errors_.push_back(path + ": " + message); }

 private:
  std::vector<std::string>& errors_;
};

DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "subsampled") return DatasetKind::subsampled;
  if (s == "files") return DatasetKind::files;
  throw ValidationError("unknown dataset kind '" + s + "' (synthetic|subsampled|files)");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::synthetic:
      return "synthetic";
    case DatasetKind::subsampled:
      return "subsampled";
    case DatasetKind::files:
      return "files";
  }
  return "?";
}

// Runs a parse function, recording a ValidationError under `path`.
template <class F>
void attempt(std::vector<std::string>& errors, const std::string& path, F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    errors.push_back(path + ": " + e.what());
  }
}

auto is_int = [](const json& j) { return j.is_number_integer(); };
auto is_uint = [](const json& j) { return j.is_number_unsigned(); };
auto is_str = [](const json& j) { return j.is_string(); };

ScheduleConfig read_schedule(Reader& r, const json& j, const std::string& path, const ScheduleConfig& d) {
  r.known_keys(j, path, {"epochs", "period", "batch_size", "learning_rate", "momentum", "weight_decay",
                         "lr_milestones", "lr_decay", "seed", "checkpoint_every"});
  ScheduleConfig s;
  s.epochs = r.integer(j, path, "epochs", d.epochs);
  s.period = r.integer(j, path, "period", d.period);
  s.batch_size = r.integer(j, path, "batch_size", d.batch_size);
  s.learning_rate = r.number(j, path, "learning_rate", d.learning_rate);
  s.momentum = r.number(j, path, "momentum", d.momentum);
  s.weight_decay = r.number(j, path, "weight_decay", d.weight_decay);
  s.lr_milestones = r.list<int>(j, path, "lr_milestones", d.lr_milestones, is_int, "integers");
  s.lr_decay = r.number(j, path, "lr_decay", d.lr_decay);
  s.seed = r.unsigned_integer(j, path, "seed", d.seed);
  s.checkpoint_every = r.integer(j, path, "checkpoint_every", d.checkpoint_every);
  return s;
}

void schedule_problems(std::vector<std::string>& errors, const ScheduleConfig& s, const std::string& path) {
  for (const auto& p : s.problems()) errors.push_back(join(path, p.field) + ": " + p.message);
}

}  // namespace

std::string ExperimentConfig::dataset_label() const {
  if (dataset.kind == DatasetKind::files) return "files";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "IF=%g", dataset.longtail.imbalance_factor);
  return buf;
}

ConfigResult config_from_json(const json& root) {
  ConfigResult result;
  auto& errors = result.errors;
  if (!root.is_object()) {
    errors.push_back("<root>: expected a JSON object");
    return result;
  }
  Reader r(errors);
  ExperimentConfig c;
  r.known_keys(root, "", {"dataset", "backbone", "loss", "stage1", "stage2", "baseline", "groups",
                          "output_dir", "seeds"});

  // dataset
  const json& ds = r.object(root, "", "dataset");
  r.known_keys(ds, "dataset", {"kind", "longtail", "input_dim", "class_separation", "within_class_std",
                               "test_per_class", "seed", "train_manifest", "test_manifest"});
  attempt(errors, "dataset.kind",
          [&] { c.dataset.kind = parse_dataset_kind(r.string(ds, "dataset", "kind", "synthetic")); });
  const json& lt = r.object(ds, "dataset", "longtail");
  r.known_keys(lt, "dataset.longtail", {"num_classes", "max_count", "imbalance_factor"});
  c.dataset.longtail.num_classes = r.integer(lt, "dataset.longtail", "num_classes", c.dataset.longtail.num_classes);
  c.dataset.longtail.max_count = r.integer(lt, "dataset.longtail", "max_count", c.dataset.longtail.max_count);
  c.dataset.longtail.imbalance_factor =
      r.number(lt, "dataset.longtail", "imbalance_factor", c.dataset.longtail.imbalance_factor);
  c.dataset.input_dim = r.integer(ds, "dataset", "input_dim", c.dataset.input_dim);
  c.dataset.class_separation = r.number(ds, "dataset", "class_separation", c.dataset.class_separation);
  c.dataset.within_class_std = r.number(ds, "dataset", "within_class_std", c.dataset.within_class_std);
  c.dataset.test_per_class = r.integer(ds, "dataset", "test_per_class", c.dataset.test_per_class);
  c.dataset.seed = r.unsigned_integer(ds, "dataset", "seed", c.dataset.seed);
  c.dataset.train_manifest = r.string(ds, "dataset", "train_manifest", "");
  c.dataset.test_manifest = r.string(ds, "dataset", "test_manifest", "");

  const auto& L = c.dataset.longtail;
  if (L.num_classes < 2) errors.push_back("dataset.longtail.num_classes: num_classes must be >= 2");
  if (L.max_count < 1) errors.push_back("dataset.longtail.max_count: max_count must be >= 1");
  if (!(L.imbalance_factor >= 1.0) || !std::isfinite(L.imbalance_factor))
    errors.push_back("dataset.longtail.imbalance_factor: imbalance_factor must be >= 1");
  if (c.dataset.input_dim < 1) errors.push_back("dataset.input_dim: input_dim must be >= 1");
  if (!(c.dataset.class_separation > 0.0))
    errors.push_back("dataset.class_separation: class_separation must be > 0");
  if (!(c.dataset.within_class_std > 0.0))
    errors.push_back("dataset.within_class_std: within_class_std must be > 0");
  if (c.dataset.test_per_class < 1) errors.push_back("dataset.test_per_class: test_per_class must be >= 1");
  if (c.dataset.kind == DatasetKind::files) {
    if (c.dataset.train_manifest.empty())
      errors.push_back("dataset.train_manifest: required when dataset.kind is files");
    if (c.dataset.test_manifest.empty())
      errors.push_back("dataset.test_manifest: required when dataset.kind is files");
  }

  // backbone
  const json& bb = r.object(root, "", "backbone");
  r.known_keys(bb, "backbone", {"family", "widths", "kernel_size", "activation", "insertion_points",
                                "per_channel", "noise_layout"});
  attempt(errors, "backbone.family",
          [&] { c.backbone.family = parse_backbone_family(r.string(bb, "backbone", "family", "mlp")); });
  c.backbone.widths = r.list<int>(bb, "backbone", "widths", c.backbone.widths, is_int, "integers");
  c.backbone.kernel_size = r.integer(bb, "backbone", "kernel_size", c.backbone.kernel_size);
  attempt(errors, "backbone.activation",
          [&] { c.backbone.activation = parse_activation(r.string(bb, "backbone", "activation", "relu")); });
  c.backbone.input_dim = c.dataset.input_dim;
  c.backbone.num_classes = c.dataset.longtail.num_classes;
  attempt(errors, "backbone", [&] { c.backbone.validate(); });
  c.residual.per_channel = r.boolean(bb, "backbone", "per_channel", false);
  attempt(errors, "backbone.noise_layout", [&] {
    c.residual.layout = parse_noise_layout(r.string(bb, "backbone", "noise_layout", "broadcast_spatial"));
  });
  const auto points = r.list<std::string>(bb, "backbone", "insertion_points", {"after_final_feature"}, is_str,
                                          "insertion point names");
  std::set<InsertionPoint> seen;
  for (std::size_t i = 0; i < points.size(); ++i) {
    attempt(errors, "backbone.insertion_points[" + std::to_string(i) + "]", [&] {
      const auto p = parse_insertion_point(points[i], c.backbone.num_blocks());
      if (seen.insert(p).second) c.insertion_points.push_back(p);
    });
  }

  // loss
  const json& ls = r.object(root, "", "loss");
  r.known_keys(ls, "loss", {"kind", "gamma", "beta", "cb_focal_base"});
  attempt(errors, "loss.kind", [&] { c.loss.kind = parse_loss_kind(r.string(ls, "loss", "kind", "ce")); });
  c.loss.gamma = r.number(ls, "loss", "gamma", c.loss.gamma);
  c.loss.beta = r.number(ls, "loss", "beta", c.loss.beta);
  c.loss.cb_focal_base = r.boolean(ls, "loss", "cb_focal_base", c.loss.cb_focal_base);
  if (!(c.loss.gamma >= 0.0)) errors.push_back("loss.gamma: gamma must be >= 0");
  if (!(c.loss.beta >= 0.0 && c.loss.beta < 1.0)) errors.push_back("loss.beta: beta must lie in [0, 1)");

  // schedules
  c.stage1 = read_schedule(r, r.object(root, "", "stage1"), "stage1", ScheduleConfig{});
  schedule_problems(errors, c.stage1, "stage1");

  const json& s2 = r.object(root, "", "stage2");
  r.known_keys(s2, "stage2", {"method", "alpha", "top_k", "confident_per_class", "fine_tune_epochs",
                              "resample_teacher_noise", "schedule"});
  attempt(errors, "stage2.method", [&] {
    c.distill.method = parse_transfer_method(r.string(s2, "stage2", "method", "from_scratch"));
  });
  c.distill.alpha = r.number(s2, "stage2", "alpha", c.distill.alpha);
  c.distill.top_k = r.integer(s2, "stage2", "top_k", c.distill.top_k);
  c.distill.confident_per_class = r.integer(s2, "stage2", "confident_per_class", c.distill.confident_per_class);
  c.distill.fine_tune_epochs = r.integer(s2, "stage2", "fine_tune_epochs", c.distill.fine_tune_epochs);
  c.distill.resample_teacher_noise =
      r.boolean(s2, "stage2", "resample_teacher_noise", c.distill.resample_teacher_noise);
  for (const auto& p : c.distill.problems()) errors.push_back("stage2." + p.field + ": " + p.message);
  if (c.distill.top_k > c.backbone.feature_dim() && c.backbone.feature_dim() > 0 &&
      c.distill.method == TransferMethod::high_conf_kernels)
    errors.push_back("stage2.top_k: DistillConfig.top_k exceeds the feature dimension " +
                     std::to_string(c.backbone.feature_dim()));
  c.stage2 = read_schedule(r, r.object(s2, "stage2", "schedule"), "stage2.schedule", ScheduleConfig{});
  schedule_problems(errors, c.stage2, "stage2.schedule");

  if (root.contains("baseline")) {
    c.baseline = read_schedule(r, r.object(root, "", "baseline"), "baseline", c.stage2);
    schedule_problems(errors, *c.baseline, "baseline");
  }

  const json& gr = r.object(root, "", "groups");
  r.known_keys(gr, "groups", {"many_above", "few_below"});
  c.groups.many_above = r.integer(gr, "groups", "many_above", c.groups.many_above);
  c.groups.few_below = r.integer(gr, "groups", "few_below", c.groups.few_below);
  if (c.groups.few_below < 0) errors.push_back("groups.few_below: few_below must be >= 0");
  if (c.groups.many_above < c.groups.few_below)
    errors.push_back("groups.many_above: many_above must be >= few_below");

  c.output_dir = r.string(root, "", "output_dir", "");
  c.seeds = r.list<std::uint64_t>(root, "", "seeds", c.seeds, is_uint, "non-negative integers");
  if (c.seeds.empty()) errors.push_back("seeds: at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    errors.push_back("seeds: seeds must be distinct");

  if (errors.empty()) result.config = std::move(c);
  return result;
}

ConfigResult parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into line:column.
    std::size_t line = 1, column = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    ConfigResult r;
    r.errors.push_back("parse error at line " + std::to_string(line) + ", column " + std::to_string(column) +
                       ": " + e.what());
    return r;
  }
  return config_from_json(root);
}

ConfigResult validate_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    ConfigResult r;
    r.errors.push_back(path.string() + ": cannot open config file");
    return r;
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

json to_json(const ScheduleConfig& s) {
  return {{"epochs", s.epochs},
          {"period", s.period},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"lr_milestones", s.lr_milestones},
          {"lr_decay", s.lr_decay},
          {"seed", s.seed},
          {"checkpoint_every", s.checkpoint_every}};
}

json to_json(const ExperimentConfig& c) {
  json points = json::array();
  for (const auto p : c.insertion_points) points.push_back(to_string(p, c.backbone.num_blocks()));
  json j = {
      {"dataset",
       {{"kind", to_string(c.dataset.kind)},
        {"longtail", to_json(c.dataset.longtail)},
        {"input_dim", c.dataset.input_dim},
        {"class_separation", c.dataset.class_separation},
        {"within_class_std", c.dataset.within_class_std},
        {"test_per_class", c.dataset.test_per_class},
        {"seed", c.dataset.seed},
        {"train_manifest", c.dataset.train_manifest},
        {"test_manifest", c.dataset.test_manifest}}},
      {"backbone",
       {{"family", to_string(c.backbone.family)},
        {"widths", c.backbone.widths},
        {"kernel_size", c.backbone.kernel_size},
        {"activation", to_string(c.backbone.activation)},
        {"insertion_points", points},
        {"per_channel", c.residual.per_channel},
        {"noise_layout", to_string(c.residual.layout)}}},
      {"loss",
       {{"kind", to_string(c.loss.kind)},
        {"gamma", c.loss.gamma},
        {"beta", c.loss.beta},
        {"cb_focal_base", c.loss.cb_focal_base}}},
      {"stage1", to_json(c.stage1)},
      {"stage2",
       {{"method", to_string(c.distill.method)},
        {"alpha", c.distill.alpha},
        {"top_k", c.distill.top_k},
        {"confident_per_class", c.distill.confident_per_class},
        {"fine_tune_epochs", c.distill.fine_tune_epochs},
        {"resample_teacher_noise", c.distill.resample_teacher_noise},
        {"schedule", to_json(c.stage2)}}},
      {"baseline", to_json(c.baseline_schedule())},
      {"groups", {{"many_above", c.groups.many_above}, {"few_below", c.groups.few_below}}},
      {"output_dir", c.output_dir},
      {"seeds", c.seeds},
  };
  return j;
}

std::string config_digest(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  Fnv1a h;
  h.update(j.dump());
  return h.hex();
}

}  // namespace ltkd
