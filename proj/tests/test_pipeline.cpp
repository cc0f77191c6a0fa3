// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "dermaudit/pipeline.hpp"

using namespace dermaudit;
namespace fs = std::filesystem;

namespace {

ImageMetric metric(const std::string& id, SkinToneGroup g, double mse) {
  ImageMetric m;
  m.id = id;
  m.group = g;
  m.mse = mse;
  m.mean_latent_std = 0.5;
  m.fine = "f";
  m.mid = "m";
  m.coarse = "c";
  return m;
}

RunMetrics run_fixture(const std::string& config, std::int64_t rep, double bias) {
  RunMetrics rm;
  rm.config_name = config;
  rm.repetition = rep;
  rm.test_size = 3;
  rm.train_seed = 42;
  rm.config_hash = "deadbeef";
  for (int i = 0; i < 3; ++i) {
    rm.records.push_back(metric("l" + std::to_string(i), SkinToneGroup::Light, 0.03 + 0.001 * i));
    rm.records.push_back(metric("d" + std::to_string(i), SkinToneGroup::Dark, 0.03 + bias + 0.001 * i));
  }
  return rm;
}

}  // namespace

TEST_CASE("pipeline config round-trips through JSON exactly") {
  PipelineConfig cfg = PipelineConfig::desk_synthetic();
  cfg.metadata_path = "meta.csv";
  cfg.images_dir = "imgs";
  cfg.columns.id = "hash";
  cfg.protocol.base_seed = 99;
  cfg.protocol.configs = {TrainingConfig::Name::B_Mixed, TrainingConfig::Name::C_Dark};
  cfg.extractor_weights = "w.dmta";
  cfg.jobs = 3;
  cfg.synth.condition_mix_light = {0.5, 0.5};

  const auto j1 = to_json(cfg);
  const PipelineConfig back = pipeline_config_from_json(j1);
  const auto j2 = to_json(back);
  CHECK(j1.dump() == j2.dump());
  CHECK(pipeline_config_hash(cfg) == pipeline_config_hash(back));
}

TEST_CASE("runs persist and load back, including failed ones") {
  const auto dir = fs::temp_directory_path() / "dermaudit_persist_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  RunMetrics ok = run_fixture("B_Mixed", 0, 0.01);
  RunMetrics bad;
  bad.config_name = "A_Light";
  bad.repetition = 1;
  bad.test_size = 3;
  bad.failed = true;
  bad.failure_reason = "non-finite training loss at step 4";

  TrainRunLog log;
  log.epochs.push_back({1.0, 0.6, 0.3, 0.1});
  log.wall_seconds = 2.5;
  TrainingConfig tc = TrainingConfig::canonical(TrainingConfig::Name::B_Mixed);
  persist_run(dir.string(), ok, &log, nullptr, nullptr, nullptr, "cfg_hash", &tc);
  persist_run(dir.string(), bad, nullptr, nullptr, nullptr, nullptr, "cfg_hash", nullptr);

  CHECK(fs::exists(dir / "rep0_B_Mixed" / "config.json"));
  CHECK(fs::exists(dir / "rep0_B_Mixed" / "train_log.jsonl"));

  const LoadedRuns loaded = load_runs(dir.string());
  REQUIRE(loaded.issues.empty());
  REQUIRE(loaded.runs.size() == 2);
  // directory scan is sorted: rep0_B_Mixed before rep1_A_Light
  CHECK(loaded.runs[0].config_name == "B_Mixed");
  CHECK(loaded.runs[0].records.size() == 6);
  CHECK(loaded.runs[0].records[0].mse == ok.records[0].mse);
  CHECK(loaded.runs[1].failed);
  CHECK(loaded.runs[1].failure_reason == bad.failure_reason);
  fs::remove_all(dir);
}

TEST_CASE("load_runs reports missing and corrupt entries without failing") {
  const auto dir = fs::temp_directory_path() / "dermaudit_corrupt_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "rep0_A_Light");
  std::ofstream(dir / "rep0_A_Light" / "run.json") << "{ not json";
  fs::create_directories(dir / "rep0_B_Mixed");  // run.json missing entirely

  RunMetrics ok = run_fixture("C_Dark", 0, 0.0);
  persist_run(dir.string(), ok, nullptr, nullptr, nullptr, nullptr, "h", nullptr);

  const LoadedRuns loaded = load_runs(dir.string());
  CHECK(loaded.runs.size() == 1);
  CHECK(loaded.issues.size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("report writing is idempotent byte for byte") {
  const auto dir = fs::temp_directory_path() / "dermaudit_report_idem";
  fs::remove_all(dir);
  std::vector<RunMetrics> runs = {run_fixture("A_Light", 0, 0.05), run_fixture("B_Mixed", 0, 0.02),
                                  run_fixture("C_Dark", 0, -0.01)};
  write_report(runs, nullptr, dir.string(), "hash123");
  std::ifstream first(dir / "report" / "report.json");
  std::stringstream s1;
  s1 << first.rdbuf();
  first.close();
  write_report(runs, nullptr, dir.string(), "hash123");
  std::ifstream second(dir / "report" / "report.json");
  std::stringstream s2;
  s2 << second.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(fs::exists(dir / "report" / "mse_boxplot.png"));
  CHECK(fs::exists(dir / "report" / "mse_summary.csv"));
  fs::remove_all(dir);
}

TEST_CASE("dropping one run changes only that run's cells") {
  std::vector<RunMetrics> all = {run_fixture("A_Light", 0, 0.05), run_fixture("B_Mixed", 0, 0.02),
                                 run_fixture("C_Dark", 0, -0.01)};
  std::vector<RunMetrics> without_c = {all[0], all[1]};

  const AuditReport full = aggregate(all);
  const AuditReport partial = aggregate(without_c);

  for (const char* config : {"A_Light", "B_Mixed"}) {
    for (const char* group : {"light", "dark"}) {
      const auto& a = full.cells.at(config).at(group);
      const auto& b = partial.cells.at(config).at(group);
      CHECK(a.mse.median == b.mse.median);
      CHECK(a.mse.mean == b.mse.mean);
      CHECK(a.count == b.count);
    }
  }
  CHECK(full.cells.count("C_Dark") == 1);
  CHECK(partial.cells.count("C_Dark") == 0);
}

TEST_CASE("fst histogram renders from records") {
  const auto path = fs::temp_directory_path() / "dermaudit_fst_hist.png";
  std::vector<ImageRecord> records;
  for (const int fst : {1, 1, 2, 5, 6, -1, 3}) {
    ImageRecord r;
    r.id = "r" + std::to_string(records.size());
    r.fst.value = fst;
    records.push_back(r);
  }
  write_fst_histogram(records, path.string(), "config test");
  CHECK(fs::exists(path));
  CHECK(fs::file_size(path) > 0);
  fs::remove(path);
}
