#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ltkd/config.hpp"
#include "ltkd/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kOutputRootEnv = "LTKD_OUTPUT_ROOT";

struct CliError {
  std::string kind;
  std::vector<std::string> errors;
};

int report_error(const std::string& command, const CliError& e, int code = 1) {
  json j = {{"status", "error"}, {"command", command}, {"kind", e.kind}, {"errors", e.errors}};
  std::cerr << j.dump() << '\n';
  return code;
}

ltkd::ExperimentConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw CliError{"config", {path + ": file not found"}};
  auto result = ltkd::validate_config(path);
  if (!result.ok()) throw CliError{"config", result.errors};
  return *result.config;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw CliError{"arguments", {"--seeds: '" + text + "' is not a comma-separated list of integers"}};
    seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw CliError{"arguments", {"--seeds: empty list"}};
  return seeds;
}

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& flag, const ltkd::ExperimentConfig& config, const std::string& config_path) {
  if (!flag.empty()) return flag;
  if (!config.output_dir.empty()) {
    fs::path p(config.output_dir);
    return p.is_absolute() ? p : output_root() / p;
  }
  return output_root() / fs::path(config_path).stem();
}

// "3;2,3;1,2,3;none" -> {{3}, {2,3}, {1,2,3}, {}}
std::vector<std::vector<ltkd::InsertionPoint>> parse_placements(const std::string& text) {
  std::vector<std::vector<ltkd::InsertionPoint>> out;
  std::stringstream sets(text);
  std::string set;
  while (std::getline(sets, set, ';')) {
    std::vector<ltkd::InsertionPoint> points;
    if (set != "none") {
      std::stringstream ss(set);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
          throw CliError{"arguments", {"--placements: bad block '" + tok + "' in '" + text + "'"}};
        points.push_back(ltkd::InsertionPoint{std::stoi(tok)});
      }
    }
    out.push_back(std::move(points));
  }
  if (out.empty()) throw CliError{"arguments", {"--placements: empty"}};
  return out;
}

int finish_run(const std::string& command, const std::vector<ltkd::RunSummary>& summaries, const fs::path& out) {
  std::vector<std::string> failures;
  for (const auto& s : summaries)
    for (const auto& f : s.failures)
      failures.push_back(f.stage + " (seed " + std::to_string(f.seed) + "): " + f.message);
  if (failures.empty()) return 0;
  std::sort(failures.begin(), failures.end());
  failures.erase(std::unique(failures.begin(), failures.end()), failures.end());
  json j = {{"status", "error"}, {"command", command}, {"kind", "stage_failure"}, {"run_dir", out.string()}, {"errors", failures}};
  std::cerr << j.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-tailed classification with a learned residual-noise teacher and feature distillation"};
  app.require_subcommand(1);

  std::string config_path, seeds_text, out_flag, format_text = "plain", placements_text = "3;2,3;1,2,3;1;2";
  std::string layout = "comparison";
  std::vector<std::string> run_dirs;
  bool overwrite = false, quiet = false;
  int jobs = 1;

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seeds", seeds_text, "comma-separated seeds, overrides the config");
    cmd->add_option("--out", out_flag, "run directory (default: $" + std::string(kOutputRootEnv) + "/<config name>)");
    cmd->add_flag("--overwrite", overwrite, "replace an existing run directory");
    cmd->add_option("--jobs", jobs, "seeds trained concurrently")->check(CLI::PositiveNumber);
    cmd->add_flag("--quiet", quiet, "no progress lines");
  };

  auto* run = app.add_subcommand("run", "baseline, teacher and student for every seed");
  add_run_flags(run);
  auto* compare = app.add_subcommand("compare-methods", "all three transfer methods against one teacher");
  add_run_flags(compare);
  auto* ablate = app.add_subcommand("ablate-placement", "one full pipeline per residual-layer placement");
  add_run_flags(ablate);
  ablate->add_option("--placements", placements_text, "';'-separated block sets, e.g. \"3;2,3;none\"");
  ablate->add_option("--format", format_text, "plain|csv|markdown");

  auto* table = app.add_subcommand("table", "render a report from run directories");
  table->add_option("--runs", run_dirs, "run directories")->required();
  table->add_option("--format", format_text, "plain|csv|markdown");
  table->add_option("--layout", layout, "comparison|methods")->check(CLI::IsMember({"comparison", "methods"}));

  auto* validate = app.add_subcommand("validate", "check a config and print it with defaults filled in");
  validate->add_option("--config", config_path, "experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(),
                        {"arguments", {e.what()}}, 2);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (command == "validate") {
      const auto config = load_config(config_path);
      std::cout << ltkd::to_json(config).dump(2) << '\n';
      return 0;
    }
    if (command == "table") {
      const auto format = ltkd::parse_table_format(format_text);
      std::vector<ltkd::RunSummary> summaries;
      if (layout == "methods") {
        if (run_dirs.size() != 1) throw CliError{"arguments", {"--layout methods takes exactly one run directory"}};
        for (const auto m : {ltkd::TransferMethod::decouple, ltkd::TransferMethod::high_conf_kernels,
                             ltkd::TransferMethod::from_scratch})
          summaries.push_back(ltkd::load_run_summary(run_dirs.front(), m));
        std::cout << ltkd::emit_method_table(summaries, format);
      } else {
        for (const auto& d : run_dirs) summaries.push_back(ltkd::load_run_summary(d));
        std::cout << ltkd::emit_comparison_table(summaries, format);
      }
      return 0;
    }

    auto config = load_config(config_path);
    if (!seeds_text.empty()) config.seeds = parse_seeds(seeds_text);
    const fs::path out = resolve_out(out_flag, config, config_path);
    ltkd::RunOptions opts{overwrite, jobs, quiet ? nullptr : &std::cerr};

    if (command == "run") {
      const auto summary = ltkd::run_experiment(config, out, opts);
      std::cout << ltkd::emit_comparison_table({summary}, ltkd::TableFormat::plain);
      std::cout << "run directory: " << out.string() << '\n';
      return finish_run(command, {summary}, out);
    }
    if (command == "compare-methods") {
      const auto summaries = ltkd::run_method_comparison(config, out, opts);
      std::cout << ltkd::emit_method_table(summaries, ltkd::TableFormat::plain);
      std::cout << "run directory: " << out.string() << '\n';
      return finish_run(command, summaries, out);
    }
    if (command == "ablate-placement") {
      const auto format = ltkd::parse_table_format(format_text);
      const auto report = ltkd::ablation_gn_placement(config, parse_placements(placements_text), out, opts);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      const std::string text = ltkd::emit_placement_table(report, format);
      std::ofstream(out / "report.txt") << ltkd::emit_placement_table(report, ltkd::TableFormat::plain);
      std::cout << text;
      std::vector<ltkd::RunSummary> summaries;
      for (const auto& row : report.rows) summaries.push_back(ltkd::load_run_summary(row.run_dir));
      return finish_run(command, summaries, out);
    }
  } catch (const CliError& e) {
    return report_error(command, e);
  } catch (const ltkd::ValidationError& e) {
    return report_error(command, {"validation", {e.what()}});
  } catch (const std::exception& e) {
    return report_error(command, {"runtime", {e.what()}});
  }
  return 0;
}
