#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advood/pipeline.hpp"

namespace advood::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingStage = 4,
  kParse = 5,
};

// One JSON object per failure on stderr.
inline int report_error(std::ostream& err, int code, std::string_view kind, const std::string& msg,
                        const std::string& field = {}) {
  nlohmann::json j = {{"error", kind}, {"message", msg}, {"exit_code", code}};
  if (!field.empty()) j["field"] = field;
  err << j.dump() << std::endl;
  return code;
}

// Scores an external AOTB file (images dataset or precomputed taps) with the
// detectors already fitted under `out`.
inline void score_file(Pipeline& p, const std::string& input, const std::string& csv_path) {
  const SmallConvNet net = p.load_model();
  const LoadedTensors loaded = load_tensors(input);
  ForwardTaps taps;
  const Tensor* images = nullptr;
  if (const auto* t = std::get_if<ForwardTaps>(&loaded)) {
    taps = *t;
  } else if (const auto* ds = std::get_if<LabeledDataset>(&loaded)) {
    images = &ds->images;
  } else {
    images = &std::get<OodDataset>(loaded).images;
  }
  if (images) taps = forward_with_taps(net, *images);
  std::ostringstream csv;
  csv << "sample_id,split,detector,score\n";
  const std::string split = fs::path(input).stem().string();
  for (DetectorKind k : p.config().detectors) {
    const std::string stem = p.layout().detector_stem(k).string();
    if (!fs::exists(stem + ".json")) continue;
    const DetectorState st = load_detector(stem);
    std::vector<double> s;
    try {
      s = score(st, taps, {&net, images});
    } catch (const Error& e) {
      std::cerr << nlohmann::json({{"warning", "detector skipped"},
                                   {"detector", to_string(k)},
                                   {"message", e.what()}})
                       .dump()
                << std::endl;
      continue;
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      csv << i << ',' << split << ',' << to_string(k) << ',' << detail::fmt(s[i]) << '\n';
    }
  }
  detail::write_text(csv_path, csv.str());
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Adversarial robustness benchmark for post-hoc OOD detectors"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path, out_dir, stage_name, input, csv_path;
  unsigned threads = 1;
  bool quiet = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration JSON (defaults if omitted)");
    sub->add_option("--out", out_dir, "Output directory (overrides output_dir in the config)");
    sub->add_option("--threads", threads, "Worker threads for attacks")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "Suppress progress output");
  };

  std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
  for (Stage s : kAllStages) {
    CLI::App* sub = app.add_subcommand(std::string(to_string(s)), "Run the " + std::string(to_string(s)) + " stage");
    common(sub);
    if (s == Stage::kScore) {
      sub->add_option("--input", input, "Score an external AOTB dataset or taps file instead");
      sub->add_option("--csv", csv_path, "Destination CSV for --input scores");
    }
    stage_cmds.emplace_back(sub, s);
  }
  CLI::App* run_cmd = app.add_subcommand("run", "Run every stage, or one with --stage");
  common(run_cmd);
  run_cmd->add_option("--stage", stage_name, "Run only this stage");
  CLI::App* defaults = app.add_subcommand("default-config", "Print the default run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return report_error(err, kUsage, "usage", e.what());
  }

  try {
    if (defaults->parsed()) {
      out << to_json(default_config()).dump(2) << '\n';
      return kOk;
    }
    RunConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    const std::string root = cfg.output_dir;
    Pipeline p(std::move(cfg), root, threads, quiet ? nullptr : &err);
    if (run_cmd->parsed()) {
      if (stage_name.empty()) {
        p.run_all();
      } else {
        p.run_stage(parse_stage(stage_name));
      }
      return kOk;
    }
    for (const auto& [sub, s] : stage_cmds) {
      if (!sub->parsed()) continue;
      if (s == Stage::kScore && !input.empty()) {
        score_file(p, input,
                   csv_path.empty() ? (p.layout().root / "scores" /
                                       (fs::path(input).stem().string() + ".csv"))
                                          .string()
                                    : csv_path);
      } else {
        p.run_stage(s);
      }
    }
    return kOk;
  } catch (const ConfigError& e) {
    return report_error(err, kConfig, "config", e.what(), e.field());
  } catch (const MissingStageError& e) {
    return report_error(err, kMissingStage, "missing_stage", e.what());
  } catch (const ParseError& e) {
    return report_error(err, kParse, "parse", e.what(), e.field());
  } catch (const Error& e) {
    return report_error(err, kFailure, "error", e.what());
  } catch (const std::exception& e) {
    return report_error(err, kFailure, "internal", e.what());
  }
}

}  // namespace advood::cli
