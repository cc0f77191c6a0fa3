// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end:
//   dermaudit data prepare    parse metadata, assign groups, write split
//                             manifests and the FST histogram
//   dermaudit synth generate  materialize a synthetic two-group dataset
//   dermaudit audit run       execute the full representation-sweep audit
//   dermaudit report          regenerate report and figures from stored runs
//
// Exit codes: 0 success, 1 input error, 2 run failure(s).

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "dermaudit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dermaudit;

namespace {

int cmd_data_prepare(const std::string& metadata, const std::string& images_dir,
                     const std::string& out_dir, std::uint64_t seed, std::int64_t test_size,
                     const ColumnMap& columns) {
  std::ifstream in(metadata);
  if (!in) {
    std::cerr << "error: cannot open metadata '" << metadata << "'\n";
    return 1;
  }
  ParseSummary summary;
  std::vector<ImageRecord> records;
  try {
    records = parse_metadata(in, columns, &summary);
  } catch (const SchemaError& e) {
    std::cerr << "error in '" << metadata << "': " << e.what() << "\n";
    return 1;
  }
  fs::create_directories(out_dir);

  nlohmann::json sj;
  sj["total_rows"] = summary.total_rows;
  sj["rejected_rows"] = summary.rejected_rows;
  sj["invalid_fst"] = summary.invalid_fst;
  for (const auto& [code, count] : summary.fst_counts) {
    sj["fst_counts"][std::to_string(code)] = count;
  }
  std::int64_t n_light = 0, n_dark = 0;
  for (const auto& rec : records) {
    const auto grp = assign_group(rec.fst);
    if (!grp) continue;
    (*grp == SkinToneGroup::Light ? n_light : n_dark) += 1;
  }
  sj["group_counts"] = {{"light", n_light}, {"dark", n_dark}};
  std::ofstream(fs::path(out_dir) / "parse_summary.json") << sj.dump(2) << "\n";

  write_fst_histogram(records, (fs::path(out_dir) / "fst_histogram.png").string(),
                      "source " + metadata);

  const DatasetSplit split = make_split(records, test_size, seed);
  std::vector<nlohmann::json> lines;
  const auto emit = [&](const std::vector<ImageRecord>& recs, const char* group,
                        const char* role) {
    for (const auto& rec : recs) lines.push_back({{"id", rec.id}, {"group", group}, {"role", role}});
  };
  emit(split.test_light, "light", "test");
  emit(split.test_dark, "dark", "test");
  emit(split.train_pool_light, "light", "train_pool");
  emit(split.train_pool_dark, "dark", "train_pool");
  write_jsonl((fs::path(out_dir) / "split_manifest.jsonl").string(), lines);

  std::cout << "parsed " << records.size() << " records (" << summary.rejected_rows
            << " rejected, " << summary.invalid_fst << " invalid FST codes)\n"
            << "groups: " << n_light << " light, " << n_dark << " dark\n"
            << "split: " << split.test_light.size() << "/" << split.test_dark.size()
            << " test, pools " << split.train_pool_light.size() << "/"
            << split.train_pool_dark.size() << "\n"
            << "wrote " << (fs::path(out_dir) / "split_manifest.jsonl").string() << "\n";
  (void)images_dir;
  return 0;
}

int cmd_synth_generate(const std::string& out_dir, SynthParams params) {
  const SynthDataset ds = generate(params);
  materialize(ds, out_dir);
  nlohmann::json pj = {{"side", params.side},
                       {"n_per_group", params.n_per_group},
                       {"luminance_light", params.luminance_light},
                       {"luminance_dark", params.luminance_dark},
                       {"texture_noise", params.texture_noise},
                       {"n_conditions", params.n_conditions},
                       {"seed", params.seed}};
  std::ofstream(fs::path(out_dir) / "synth_params.json") << pj.dump(2) << "\n";
  std::cout << "generated " << ds.records.size() << " images under " << out_dir << "\n";
  return 0;
}

int cmd_audit_run(PipelineConfig cfg) {
  const AuditOutcome outcome = run_audit(cfg);
  std::cout << "audit complete: " << outcome.runs.size() << " runs, " << outcome.failed_runs
            << " failed\n"
            << "report at " << (fs::path(outcome.out_dir) / "report").string() << "\n";
  for (const auto& [config, gap] : outcome.report.mse_gap) {
    std::cout << "  mse gap (dark - light) " << config << ": " << gap << "\n";
  }
  return outcome.failed_runs > 0 ? 2 : 0;
}

int cmd_report(const std::string& dir, std::string out_dir) {
  const std::string runs_dir =
      fs::is_directory(fs::path(dir) / "runs") ? (fs::path(dir) / "runs").string() : dir;
  LoadedRuns loaded = load_runs(runs_dir);
  if (loaded.runs.empty()) {
    std::cerr << "error: no usable run records under '" << runs_dir << "'";
    for (const auto& issue : loaded.issues) std::cerr << "\n  " << issue;
    std::cerr << "\n";
    return 1;
  }
  if (out_dir.empty()) out_dir = dir;

  std::string config_hash = "unknown";
  {
    std::ifstream cfg_in(fs::path(dir) / "config.json");
    if (cfg_in) {
      config_hash = pipeline_config_hash(pipeline_config_from_json(nlohmann::json::parse(cfg_in)));
    }
  }
  std::vector<ImageRecord> dataset_records;
  {
    std::ifstream rec_in(fs::path(dir) / "dataset_records.jsonl");
    std::string line;
    while (rec_in && std::getline(rec_in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ImageRecord rec;
      rec.id = j.at("id").get<std::string>();
      rec.fst.value = j.at("fst").get<int>();
      rec.fine_label = j.at("fine").get<std::string>();
      rec.mid_label = j.at("mid").get<std::string>();
      rec.coarse_label = j.at("coarse").get<std::string>();
      dataset_records.push_back(std::move(rec));
    }
  }

  const AuditReport report =
      write_report(loaded.runs, dataset_records.empty() ? nullptr : &dataset_records, out_dir,
                   config_hash, loaded.issues);
  std::cout << "report regenerated from " << loaded.runs.size() << " runs";
  if (!loaded.issues.empty()) {
    std::cout << " (partial: " << loaded.issues.size() << " issues)";
    for (const auto& issue : loaded.issues) std::cout << "\n  " << issue;
  }
  std::cout << "\nwrote " << (fs::path(out_dir) / "report").string() << "\n";
  (void)report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fairness audit for a perceptual-loss VAE on dermatological images"};
  app.require_subcommand(1);

  // data prepare
  auto* data = app.add_subcommand("data", "Dataset utilities");
  data->require_subcommand(1);
  auto* prepare = data->add_subcommand("prepare", "Parse metadata, write split manifests and FST histogram");
  std::string metadata, images_dir, out_dir = "out";
  std::uint64_t seed = 0;
  std::int64_t test_size = 500;
  ColumnMap columns;
  prepare->add_option("--metadata", metadata, "Metadata CSV path")->required();
  prepare->add_option("--images", images_dir, "Image directory (informational)");
  prepare->add_option("--out", out_dir, "Output directory");
  prepare->add_option("--seed", seed, "Split seed");
  prepare->add_option("--test-size", test_size, "Test records per group");
  prepare->add_option("--col-id", columns.id, "Column name: record id");
  prepare->add_option("--col-fst", columns.fst, "Column name: Fitzpatrick code");
  prepare->add_option("--col-fine", columns.fine, "Column name: fine label");
  prepare->add_option("--col-mid", columns.mid, "Column name: mid label");
  prepare->add_option("--col-coarse", columns.coarse, "Column name: coarse label");
  prepare->add_option("--col-source", columns.source, "Column name: image source");

  // synth generate
  auto* synth = app.add_subcommand("synth", "Synthetic testbed");
  synth->require_subcommand(1);
  auto* generate_cmd = synth->add_subcommand("generate", "Materialize a synthetic dataset");
  SynthParams sp;
  std::string synth_out = "synth_data";
  generate_cmd->add_option("--out", synth_out, "Output directory");
  generate_cmd->add_option("--side", sp.side, "Image side in pixels");
  generate_cmd->add_option("--n-per-group", sp.n_per_group, "Images per group");
  generate_cmd->add_option("--seed", sp.seed, "Generator seed");
  generate_cmd->add_option("--luminance-light", sp.luminance_light, "Light group base luminance");
  generate_cmd->add_option("--luminance-dark", sp.luminance_dark, "Dark group base luminance");
  generate_cmd->add_option("--noise", sp.texture_noise, "Texture noise std");
  generate_cmd->add_option("--conditions", sp.n_conditions, "Number of synthetic conditions");

  // audit run
  auto* audit_cmd = app.add_subcommand("audit", "Representation-sweep audit");
  audit_cmd->require_subcommand(1);
  auto* run = audit_cmd->add_subcommand("run", "Train all configs x repetitions and report");
  std::string config_path, audit_out;
  bool synthetic = false;
  std::optional<std::int64_t> reps, side, epochs, train_size, audit_test_size;
  std::optional<std::uint64_t> audit_seed;
  std::optional<int> jobs;
  run->add_option("--config", config_path, "Pipeline config JSON");
  run->add_flag("--synthetic", synthetic, "Use the desk-scale synthetic testbed");
  run->add_option("--reps", reps, "Number of repetitions");
  run->add_option("--side", side, "Image side in pixels");
  run->add_option("--seed", audit_seed, "Base seed");
  run->add_option("--out", audit_out, "Output directory");
  run->add_option("--jobs", jobs, "Parallel run workers");
  run->add_option("--epochs", epochs, "Training epochs");
  run->add_option("--train-size", train_size, "Training sample size");
  run->add_option("--test-size", audit_test_size, "Test records per group");

  // report
  auto* report_cmd = app.add_subcommand("report", "Regenerate report from persisted runs");
  std::string report_dir, report_out;
  report_cmd->add_option("--runs", report_dir, "Audit output (or runs) directory")->required();
  report_cmd->add_option("--out", report_out, "Report output directory (default: runs dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) {
      return cmd_data_prepare(metadata, images_dir, out_dir, seed, test_size, columns);
    }
    if (generate_cmd->parsed()) {
      return cmd_synth_generate(synth_out, sp);
    }
    if (run->parsed()) {
      PipelineConfig cfg;
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) {
          std::cerr << "error: cannot open config '" << config_path << "'\n";
          return 1;
        }
        cfg = pipeline_config_from_json(nlohmann::json::parse(in));
        if (synthetic) cfg.synthetic = true;
      } else if (synthetic) {
        cfg = PipelineConfig::desk_synthetic();
      } else {
        std::cerr << "error: audit run needs --config or --synthetic\n";
        return 1;
      }
      if (reps) cfg.protocol.n_reps = *reps;
      if (side) {
        cfg.model.input_side = *side;
        cfg.synth.side = *side;
      }
      if (audit_seed) {
        cfg.protocol.base_seed = *audit_seed;
        cfg.synth.seed = *audit_seed;
      }
      if (!audit_out.empty()) cfg.out_dir = audit_out;
      if (jobs) cfg.jobs = *jobs;
      if (epochs) cfg.protocol.epochs = *epochs;
      if (train_size) cfg.protocol.train_size = *train_size;
      if (audit_test_size) cfg.protocol.test_size = *audit_test_size;
      cfg.model.stages();  // validates the geometry before any work starts
      return cmd_audit_run(cfg);
    }
    if (report_cmd->parsed()) {
      return cmd_report(report_dir, report_out);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "run failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
