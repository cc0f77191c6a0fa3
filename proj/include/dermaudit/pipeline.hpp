// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermaudit/audit.hpp"
#include "dermaudit/common.hpp"
#include "dermaudit/dataset.hpp"
#include "dermaudit/image.hpp"
#include "dermaudit/perceptual.hpp"
#include "dermaudit/plot.hpp"
#include "dermaudit/serialize.hpp"
#include "dermaudit/synthetic.hpp"
#include "dermaudit/training.hpp"

namespace dermaudit {

// Fully resolved pipeline configuration; persisted verbatim with every run.
struct PipelineConfig {
  // dataset
  std::string metadata_path;
  std::string images_dir;
  ColumnMap columns;
  // synthetic testbed
  bool synthetic = false;
  SynthParams synth;
  // experiment
  Protocol protocol;
  VaeConfig model;
  // perceptual backbone
  std::string extractor_geometry = "vgg19";
  std::string extractor_weights;  // archive path; empty -> seeded surrogate weights
  std::uint64_t extractor_seed = 17;
  // execution
  std::string out_dir = "out";
  int jobs = 1;
  bool checkpoint_per_epoch = false;

  // Desk-scale synthetic profile: small enough for a single CPU core.
  static PipelineConfig desk_synthetic() {
    PipelineConfig c;
    c.synthetic = true;
    c.synth = SynthParams{};
    c.model.input_side = 32;
    c.model.latent_side = 4;
    c.model.latent_channels = 8;
    c.model.base_width = 16;
    c.model.max_width = 64;
    c.protocol.n_reps = 3;
    c.protocol.test_size = 100;
    c.protocol.train_size = 416;
    c.protocol.epochs = 6;
    c.protocol.learning_rate = 1e-3;
    c.protocol.batch_size = 64;
    c.extractor_geometry = "tiny";
    return c;
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["dataset"] = {{"metadata", c.metadata_path},
                  {"images_dir", c.images_dir},
                  {"columns",
                   {{"id", c.columns.id},
                    {"fst", c.columns.fst},
                    {"fine", c.columns.fine},
                    {"mid", c.columns.mid},
                    {"coarse", c.columns.coarse},
                    {"source", c.columns.source}}}};
  j["synthetic"] = {{"enabled", c.synthetic},
                    {"side", c.synth.side},
                    {"luminance_light", c.synth.luminance_light},
                    {"luminance_dark", c.synth.luminance_dark},
                    {"lesion_radius_min", c.synth.lesion_radius_min},
                    {"lesion_radius_max", c.synth.lesion_radius_max},
                    {"lesion_contrast_min", c.synth.lesion_contrast_min},
                    {"lesion_contrast_max", c.synth.lesion_contrast_max},
                    {"texture_noise", c.synth.texture_noise},
                    {"n_per_group", c.synth.n_per_group},
                    {"n_conditions", c.synth.n_conditions},
                    {"condition_mix_light", c.synth.condition_mix_light},
                    {"condition_mix_dark", c.synth.condition_mix_dark},
                    {"seed", c.synth.seed}};
  std::vector<std::string> config_names;
  for (auto n : c.protocol.configs) config_names.emplace_back(to_string(n));
  j["protocol"] = {{"n_reps", c.protocol.n_reps},
                   {"configs", config_names},
                   {"test_size", c.protocol.test_size},
                   {"train_size", c.protocol.train_size},
                   {"epochs", c.protocol.epochs},
                   {"learning_rate", c.protocol.learning_rate},
                   {"batch_size", c.protocol.batch_size},
                   {"perceptual_weight", c.protocol.perceptual_weight},
                   {"base_seed", c.protocol.base_seed}};
  j["model"] = {{"input_side", c.model.input_side},
                {"latent_side", c.model.latent_side},
                {"latent_channels", c.model.latent_channels},
                {"base_width", c.model.base_width},
                {"max_width", c.model.max_width}};
  j["extractor"] = {{"geometry", c.extractor_geometry},
                    {"weights", c.extractor_weights},
                    {"seed", c.extractor_seed}};
  j["output"] = {{"dir", c.out_dir}};
  j["jobs"] = c.jobs;
  j["checkpoint_per_epoch"] = c.checkpoint_per_epoch;
  return j;
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    c.metadata_path = d.value("metadata", "");
    c.images_dir = d.value("images_dir", "");
    if (d.contains("columns")) {
      const auto& m = d["columns"];
      c.columns.id = m.value("id", c.columns.id);
      c.columns.fst = m.value("fst", c.columns.fst);
      c.columns.fine = m.value("fine", c.columns.fine);
      c.columns.mid = m.value("mid", c.columns.mid);
      c.columns.coarse = m.value("coarse", c.columns.coarse);
      c.columns.source = m.value("source", c.columns.source);
    }
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    c.synthetic = s.value("enabled", false);
    c.synth.side = s.value("side", c.synth.side);
    c.synth.luminance_light = s.value("luminance_light", c.synth.luminance_light);
    c.synth.luminance_dark = s.value("luminance_dark", c.synth.luminance_dark);
    c.synth.lesion_radius_min = s.value("lesion_radius_min", c.synth.lesion_radius_min);
    c.synth.lesion_radius_max = s.value("lesion_radius_max", c.synth.lesion_radius_max);
    c.synth.lesion_contrast_min = s.value("lesion_contrast_min", c.synth.lesion_contrast_min);
    c.synth.lesion_contrast_max = s.value("lesion_contrast_max", c.synth.lesion_contrast_max);
    c.synth.texture_noise = s.value("texture_noise", c.synth.texture_noise);
    c.synth.n_per_group = s.value("n_per_group", c.synth.n_per_group);
    c.synth.n_conditions = s.value("n_conditions", c.synth.n_conditions);
    c.synth.condition_mix_light =
        s.value("condition_mix_light", std::vector<double>{});
    c.synth.condition_mix_dark = s.value("condition_mix_dark", std::vector<double>{});
    c.synth.seed = s.value("seed", c.synth.seed);
  }
  if (j.contains("protocol")) {
    const auto& p = j["protocol"];
    c.protocol.n_reps = p.value("n_reps", c.protocol.n_reps);
    if (p.contains("configs")) {
      c.protocol.configs.clear();
      for (const auto& name : p["configs"]) {
        const auto parsed = training_config_name_from_string(name.get<std::string>());
        if (!parsed) throw SchemaError("unknown training config '" + name.get<std::string>() + "'");
        c.protocol.configs.push_back(*parsed);
      }
    }
    c.protocol.test_size = p.value("test_size", c.protocol.test_size);
    c.protocol.train_size = p.value("train_size", c.protocol.train_size);
    c.protocol.epochs = p.value("epochs", c.protocol.epochs);
    c.protocol.learning_rate = p.value("learning_rate", c.protocol.learning_rate);
    c.protocol.batch_size = p.value("batch_size", c.protocol.batch_size);
    c.protocol.perceptual_weight = p.value("perceptual_weight", c.protocol.perceptual_weight);
    c.protocol.base_seed = p.value("base_seed", c.protocol.base_seed);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.input_side = m.value("input_side", c.model.input_side);
    c.model.latent_side = m.value("latent_side", c.model.latent_side);
    c.model.latent_channels = m.value("latent_channels", c.model.latent_channels);
    c.model.base_width = m.value("base_width", c.model.base_width);
    c.model.max_width = m.value("max_width", c.model.max_width);
  }
  if (j.contains("extractor")) {
    const auto& e = j["extractor"];
    c.extractor_geometry = e.value("geometry", c.extractor_geometry);
    c.extractor_weights = e.value("weights", c.extractor_weights);
    c.extractor_seed = e.value("seed", c.extractor_seed);
  }
  if (j.contains("output")) c.out_dir = j["output"].value("dir", c.out_dir);
  c.jobs = j.value("jobs", c.jobs);
  c.checkpoint_per_epoch = j.value("checkpoint_per_epoch", c.checkpoint_per_epoch);
  return c;
}

inline std::string pipeline_config_hash(const PipelineConfig& c) {
  return hash_hex(fnv1a64(to_json(c).dump()));
}

// --- Persistence of runs ------------------------------------------------------

inline std::string run_dir_name(const RunMetrics& rm) {
  return "rep" + std::to_string(rm.repetition) + "_" + rm.config_name;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& j : lines) out << j.dump() << "\n";
}

inline void persist_run(const std::string& runs_dir, const RunMetrics& rm, const TrainRunLog* log,
                        VaeModel* model, const DatasetSplit* split,
                        const std::vector<ImageRecord>* sample, const std::string& config_hash,
                        const TrainingConfig* tc = nullptr) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(runs_dir) / run_dir_name(rm);
  fs::create_directories(dir);

  nlohmann::json header = run_header_json(rm);
  header["pipeline_config_hash"] = config_hash;
  if (log) {
    header["wall_seconds"] = log->wall_seconds;
    header["excluded_training_images"] = log->excluded_images;
    header["steps"] = log->steps;
  }
  std::ofstream(dir / "run.json") << header.dump(2) << "\n";

  if (tc) {
    const nlohmann::json cj = {{"name", to_string(tc->name)},
                               {"light_fraction", tc->light_fraction},
                               {"train_size", tc->train_size},
                               {"epochs", tc->epochs},
                               {"learning_rate", tc->learning_rate},
                               {"batch_size", tc->batch_size},
                               {"seed", tc->seed},
                               {"config_hash", training_config_hash(*tc)}};
    std::ofstream(dir / "config.json") << cj.dump(2) << "\n";
  }

  std::vector<nlohmann::json> metric_lines;
  metric_lines.reserve(rm.records.size());
  for (const auto& m : rm.records) metric_lines.push_back(to_json(m));
  write_jsonl((dir / "metrics.jsonl").string(), metric_lines);

  if (log) {
    std::vector<nlohmann::json> epoch_lines;
    for (std::size_t i = 0; i < log->epochs.size(); ++i) {
      const auto& e = log->epochs[i];
      epoch_lines.push_back({{"epoch", i},
                             {"total", e.total},
                             {"recon", e.recon},
                             {"kl", e.kl},
                             {"perceptual", e.perceptual}});
    }
    write_jsonl((dir / "train_log.jsonl").string(), epoch_lines);
  }
  if (model) save_checkpoint(*model, (dir / "model.dmta").string(), rm.config_hash);
  if (sample) {
    std::vector<nlohmann::json> lines;
    lines.reserve(sample->size());
    for (const auto& rec : *sample) lines.push_back({{"id", rec.id}});
    write_jsonl((dir / "sampled_ids.jsonl").string(), lines);
  }
  if (split) {
    std::vector<nlohmann::json> lines;
    const auto emit = [&](const std::vector<ImageRecord>& recs, const char* group,
                          const char* role) {
      for (const auto& rec : recs)
        lines.push_back({{"id", rec.id}, {"group", group}, {"role", role}});
    };
    emit(split->test_light, "light", "test");
    emit(split->test_dark, "dark", "test");
    emit(split->train_pool_light, "light", "train_pool");
    emit(split->train_pool_dark, "dark", "train_pool");
    write_jsonl((dir / "split_manifest.jsonl").string(), lines);
  }
}

struct LoadedRuns {
  std::vector<RunMetrics> runs;
  std::vector<std::string> issues;  // missing/corrupt entries, reported not fatal
};

inline LoadedRuns load_runs(const std::string& runs_dir) {
  namespace fs = std::filesystem;
  LoadedRuns out;
  if (!fs::is_directory(runs_dir)) {
    out.issues.push_back("runs directory '" + runs_dir + "' does not exist");
    return out;
  }
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(runs_dir)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    try {
      std::ifstream header_in(dir / "run.json");
      if (!header_in) {
        out.issues.push_back(dir.filename().string() + ": missing run.json");
        continue;
      }
      nlohmann::json header = nlohmann::json::parse(header_in);
      RunMetrics rm = run_metrics_from_header(header);
      if (!rm.failed) {
        std::ifstream metrics_in(dir / "metrics.jsonl");
        if (!metrics_in) {
          out.issues.push_back(dir.filename().string() + ": missing metrics.jsonl");
          continue;
        }
        std::string line;
        while (std::getline(metrics_in, line)) {
          if (line.empty()) continue;
          rm.records.push_back(image_metric_from_json(nlohmann::json::parse(line)));
        }
      }
      out.runs.push_back(std::move(rm));
    } catch (const std::exception& e) {
      out.issues.push_back(dir.filename().string() + ": " + e.what());
    }
  }
  return out;
}

// --- Report rendering ----------------------------------------------------------

namespace detail {

inline void write_cell_csv(const std::string& path, const AuditReport& report, bool latent,
                           const std::string& config_hash) {
  std::ofstream out(path);
  out << "# config " << config_hash << "\n";
  out << "config,group,count,expected,excluded,min,q1,median,q3,max,mean,complete\n";
  char buf[512];
  for (const auto& [config, groups] : report.cells) {
    for (const char* group : {"light", "dark"}) {
      auto it = groups.find(group);
      if (it == groups.end()) continue;
      const CellStats& c = it->second;
      const BoxStats& b = latent ? c.latent_std : c.mse;
      std::snprintf(buf, sizeof(buf),
                    "%s,%s,%lld,%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n",
                    config.c_str(), group, static_cast<long long>(c.count),
                    static_cast<long long>(c.expected), static_cast<long long>(c.excluded), b.min,
                    b.q1, b.median, b.q3, b.max, b.mean, c.complete() ? 1 : 0);
      out << buf;
    }
  }
}

inline void write_prevalence_csv(const std::string& path, const PrevalenceTable& table,
                                 const std::string& config_hash) {
  std::ofstream out(path);
  out << "# config " << config_hash << "\n";
  out << "condition,light,dark\n";
  char buf[512];
  for (const auto& [label, e] : table) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", label.c_str(), e.light, e.dark);
    out << buf;
  }
}

inline void write_condition_mse_csv(const std::string& path, const ConditionMseTable& table,
                                    const std::string& config_hash) {
  std::ofstream out(path);
  out << "# config " << config_hash << "\n";
  out << "condition,light_mean_mse,dark_mean_mse\n";
  for (const auto& [label, e] : table) {
    out << label << ",";
    char buf[64];
    if (e.light) {
      std::snprintf(buf, sizeof(buf), "%.17g", *e.light);
      out << buf;
    }
    out << ",";
    if (e.dark) {
      std::snprintf(buf, sizeof(buf), "%.17g", *e.dark);
      out << buf;
    }
    out << "\n";
  }
}

inline nlohmann::json box_json(const BoxStats& b) {
  return {{"min", b.min},   {"q1", b.q1},   {"median", b.median},
          {"q3", b.q3},     {"max", b.max}, {"mean", b.mean},
          {"count", b.count}};
}

}  // namespace detail

// Writes report.json, the CSV tables and the figures into <out_dir>/report.
// Pure function of the runs plus optional dataset records (for prevalence),
// so regeneration is idempotent.
inline AuditReport write_report(const std::vector<RunMetrics>& runs,
                                const std::vector<ImageRecord>* dataset_records,
                                const std::string& out_dir, const std::string& config_hash,
                                const std::vector<std::string>& issues = {}) {
  namespace fs = std::filesystem;
  const fs::path report_dir = fs::path(out_dir) / "report";
  fs::create_directories(report_dir);

  AuditReport report = aggregate(runs);
  if (dataset_records) {
    for (const auto g : {Granularity::Coarse, Granularity::Mid, Granularity::Fine}) {
      report.prevalence[to_string(g)] = condition_prevalence(*dataset_records, g);
    }
  }

  const std::string footer = "config " + config_hash;

  std::vector<std::string> config_order;
  for (const auto& [config, _] : report.cells) config_order.push_back(config);

  std::map<std::string, std::map<std::string, BoxStats>> mse_cells, std_cells;
  for (const auto& [config, groups] : report.cells) {
    for (const auto& [group, cell] : groups) {
      if (cell.count == 0) continue;
      mse_cells[config][group] = cell.mse;
      std_cells[config][group] = cell.latent_std;
    }
  }
  plot::grouped_boxplot((report_dir / "mse_boxplot.png").string(),
                        "Reconstruction MSE by training configuration", "MSE", config_order,
                        mse_cells, footer);
  plot::grouped_boxplot((report_dir / "latent_std_boxplot.png").string(),
                        "Mean latent standard deviation by training configuration",
                        "mean latent std", config_order, std_cells, footer);

  detail::write_cell_csv((report_dir / "mse_summary.csv").string(), report, false, config_hash);
  detail::write_cell_csv((report_dir / "latent_std_summary.csv").string(), report, true,
                         config_hash);

  for (const auto& [gname, table] : report.prevalence) {
    detail::write_prevalence_csv((report_dir / ("prevalence_" + gname + ".csv")).string(), table,
                                 config_hash);
    std::vector<std::pair<double, double>> pts;
    for (const auto& [label, e] : table) pts.emplace_back(e.light, e.dark);
    plot::xy_scatter((report_dir / ("prevalence_" + gname + ".png")).string(),
                     "Condition prevalence (" + gname + ")", "light group share",
                     "dark group share", {{"", std::move(pts)}}, footer);
  }

  for (const auto& [gname, per_config] : report.condition_mse) {
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
    for (const auto& [config, table] : per_config) {
      detail::write_condition_mse_csv(
          (report_dir / ("condition_mse_" + gname + "_" + config + ".csv")).string(), table,
          config_hash);
      std::vector<std::pair<double, double>> pts;
      for (const auto& [label, e] : table) {
        if (e.light && e.dark) pts.emplace_back(*e.light, *e.dark);
      }
      series.emplace_back(config, std::move(pts));
    }
    plot::xy_scatter((report_dir / ("condition_mse_" + gname + ".png")).string(),
                     "Per-condition mean MSE (" + gname + ")", "light mean MSE", "dark mean MSE",
                     series, footer);
  }

  nlohmann::json rj;
  rj["pipeline_config_hash"] = config_hash;
  rj["has_incomplete_cells"] = report.has_incomplete_cells;
  rj["issues"] = issues;
  rj["partial"] = !issues.empty() || report.has_incomplete_cells;
  for (const auto& [config, groups] : report.cells) {
    for (const auto& [group, cell] : groups) {
      nlohmann::json cj;
      cj["count"] = cell.count;
      cj["expected"] = cell.expected;
      cj["excluded"] = cell.excluded;
      cj["runs_included"] = cell.runs_included;
      cj["runs_failed"] = cell.runs_failed;
      cj["complete"] = cell.complete();
      if (cell.count > 0) {
        cj["mse"] = detail::box_json(cell.mse);
        cj["mean_latent_std"] = detail::box_json(cell.latent_std);
      }
      rj["cells"][config][group] = std::move(cj);
    }
  }
  for (const auto& [config, gap] : report.mse_gap) rj["mse_gap"][config] = gap;
  for (const auto& [gname, table] : report.prevalence) {
    for (const auto& [label, e] : table) {
      rj["prevalence"][gname][label] = {{"light", e.light}, {"dark", e.dark}};
    }
  }
  for (const auto& [gname, per_config] : report.condition_mse) {
    for (const auto& [config, table] : per_config) {
      for (const auto& [label, e] : table) {
        nlohmann::json ej;
        if (e.light) ej["light"] = *e.light;
        if (e.dark) ej["dark"] = *e.dark;
        rj["condition_mse"][gname][config][label] = std::move(ej);
      }
    }
  }
  for (const auto& rs : report.manifest) {
    rj["manifest"].push_back({{"config", rs.config},
                              {"repetition", rs.repetition},
                              {"failed", rs.failed},
                              {"failure_reason", rs.failure_reason},
                              {"n_records", rs.n_records},
                              {"load_failures", rs.load_failures},
                              {"train_seed", rs.train_seed},
                              {"config_hash", rs.config_hash}});
  }
  std::ofstream(report_dir / "report.json") << rj.dump(2) << "\n";
  return report;
}

// Renders the Fig. 2 analogue from parsed records.
inline void write_fst_histogram(const std::vector<ImageRecord>& records, const std::string& path,
                                const std::string& footer) {
  std::map<int, std::int64_t> counts;
  for (const auto& rec : records) ++counts[rec.fst.value];
  std::vector<std::pair<std::string, double>> bars;
  for (const int code : {-1, 1, 2, 3, 4, 5, 6}) {
    auto it = counts.find(code);
    bars.emplace_back(std::to_string(code),
                      it == counts.end() ? 0.0 : static_cast<double>(it->second));
  }
  plot::bar_chart(path, "Samples per Fitzpatrick skin type", bars, footer);
}

// --- Audit execution -------------------------------------------------------------

struct AuditOutcome {
  std::vector<RunMetrics> runs;
  AuditReport report;
  std::int64_t failed_runs = 0;
  std::string out_dir;
};

// Builds the feature extractor the config asks for; surrogate seeded weights
// are materialized under out_dir so their hash is auditable.
inline FeatureExtractor make_extractor(const PipelineConfig& cfg) {
  if (!cfg.extractor_weights.empty()) {
    return FeatureExtractor::from_archive(TensorArchive::load(cfg.extractor_weights));
  }
  return FeatureExtractor::seeded(ExtractorGeometry::by_name(cfg.extractor_geometry),
                                  cfg.extractor_seed);
}

// Rebuilds the models of the last fully-complete repetition from their
// checkpoints and renders the qualitative reconstruction grids.
inline void render_reconstruction_grids(const PipelineConfig& cfg,
                                        const std::vector<RunMetrics>& runs,
                                        const std::vector<ImageRecord>& records,
                                        const std::string& config_hash, std::ostream& log) {
  namespace fs = std::filesystem;
  std::int64_t chosen_rep = -1;
  for (std::int64_t rep = cfg.protocol.n_reps - 1; rep >= 0 && chosen_rep < 0; --rep) {
    bool all_ok = !runs.empty();
    for (const auto& rm : runs) {
      if (rm.repetition == rep && rm.failed) all_ok = false;
    }
    if (all_ok) chosen_rep = rep;
  }
  if (chosen_rep < 0) return;

  std::vector<std::pair<std::string, VaeModel>> models;
  for (const auto name : cfg.protocol.configs) {
    const fs::path ckpt = fs::path(cfg.out_dir) / "runs" /
                          ("rep" + std::to_string(chosen_rep) + "_" + to_string(name)) /
                          "model.dmta";
    if (!fs::exists(ckpt)) return;
    models.emplace_back(to_string(name), load_checkpoint<float>(ckpt.string()));
  }

  const DatasetSplit split =
      make_split(records, cfg.protocol.test_size,
                 cfg.protocol.base_seed + static_cast<std::uint64_t>(chosen_rep));
  ImageStore store = cfg.synthetic
                         ? ImageStore(ImageResolver((fs::path(cfg.out_dir) / "data").string()),
                                      cfg.model.input_side)
                         : ImageStore(ImageResolver(cfg.images_dir), cfg.model.input_side);

  std::vector<std::pair<std::string, VaeModel*>> model_ptrs;
  std::vector<std::string> row_labels = {"original"};
  for (auto& [label, model] : models) {
    model_ptrs.emplace_back(label, &model);
    row_labels.push_back(label);
  }
  const std::int64_t k = std::min<std::int64_t>(8, cfg.protocol.test_size);
  const fs::path report_dir = fs::path(cfg.out_dir) / "report";
  fs::create_directories(report_dir);
  try {
    const Tensorf light_grid =
        reconstruction_grid(model_ptrs, split.test_light, k, store, cfg.protocol.base_seed);
    plot::save_grid((report_dir / "recon_grid_light.png").string(), light_grid, row_labels,
                    "config " + config_hash);
    const Tensorf dark_grid =
        reconstruction_grid(model_ptrs, split.test_dark, k, store, cfg.protocol.base_seed + 1);
    plot::save_grid((report_dir / "recon_grid_dark.png").string(), dark_grid, row_labels,
                    "config " + config_hash);
  } catch (const std::exception& e) {
    log << "reconstruction grids skipped: " << e.what() << "\n";
  }
}

// Runs the full audit described by the config: dataset (real or synthetic),
// 30 (or n_reps x |configs|) training runs, per-run persistence, aggregate
// report with figures. Cells run independently; `jobs` bounds the fan-out.
inline AuditOutcome run_audit(const PipelineConfig& cfg, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  const std::string config_hash = pipeline_config_hash(cfg);
  fs::create_directories(cfg.out_dir);
  std::ofstream(fs::path(cfg.out_dir) / "config.json")
      << to_json(cfg).dump(2) << "\n";

  // Dataset: synthetic runs materialize and re-parse their own metadata so
  // the exact same ingestion path is exercised either way.
  std::vector<ImageRecord> records;
  std::optional<SynthDataset> synth;
  std::string images_root = cfg.images_dir;
  if (cfg.synthetic) {
    synth = generate(cfg.synth);
    const std::string data_dir = (fs::path(cfg.out_dir) / "data").string();
    materialize(*synth, data_dir, cfg.columns);
    images_root = data_dir;
    std::ifstream meta(fs::path(data_dir) / "metadata.csv");
    records = parse_metadata(meta, cfg.columns);
  } else {
    if (cfg.metadata_path.empty()) throw SchemaError("no dataset metadata path configured");
    std::ifstream meta(cfg.metadata_path);
    if (!meta) throw SchemaError("cannot open metadata '" + cfg.metadata_path + "'");
    records = parse_metadata(meta, cfg.columns);
  }

  // Persist the admitted records so reports can be regenerated without the
  // original dataset.
  {
    std::vector<nlohmann::json> lines;
    for (const auto& rec : records) {
      lines.push_back({{"id", rec.id},
                       {"fst", rec.fst.value},
                       {"fine", rec.fine_label},
                       {"mid", rec.mid_label},
                       {"coarse", rec.coarse_label}});
    }
    write_jsonl((fs::path(cfg.out_dir) / "dataset_records.jsonl").string(), lines);
  }
  write_fst_histogram(records, (fs::path(cfg.out_dir) / "fst_histogram.png").string(),
                      "config " + config_hash);

  const auto make_store = [&]() {
    if (synth) return memory_store(*synth, cfg.model.input_side);
    return ImageStore(ImageResolver(images_root), cfg.model.input_side);
  };

  FeatureExtractor phi = make_extractor(cfg);
  {
    nlohmann::json meta = {{"geometry", cfg.extractor_geometry},
                           {"weights_file", cfg.extractor_weights},
                           {"weights_hash", hash_hex(phi.weights_hash())}};
    if (!cfg.extractor_weights.empty()) {
      meta["weights_file_hash"] = hash_hex(file_hash(cfg.extractor_weights));
    } else {
      meta["weights_seed"] = cfg.extractor_seed;
    }
    std::ofstream(fs::path(cfg.out_dir) / "extractor.json") << meta.dump(2) << "\n";
  }

  const std::string runs_dir = (fs::path(cfg.out_dir) / "runs").string();
  fs::create_directories(runs_dir);

  struct Cell {
    std::int64_t rep;
    TrainingConfig::Name config;
  };
  std::vector<Cell> cells;
  for (std::int64_t rep = 0; rep < cfg.protocol.n_reps; ++rep) {
    for (const auto name : cfg.protocol.configs) cells.push_back({rep, name});
  }

  std::vector<RunMetrics> results(cells.size());
  std::mutex log_mutex;

  const auto run_cell = [&](std::size_t cell_index, ImageStore& store, FeatureExtractor& phi_local) {
    const Cell& cell = cells[cell_index];
    const std::uint64_t seed_r = cfg.protocol.base_seed + static_cast<std::uint64_t>(cell.rep);
    const DatasetSplit split = make_split(records, cfg.protocol.test_size, seed_r);

    TrainingConfig tc = TrainingConfig::canonical(cell.config);
    tc.train_size = cfg.protocol.train_size;
    tc.epochs = cfg.protocol.epochs;
    tc.learning_rate = cfg.protocol.learning_rate;
    tc.batch_size = cfg.protocol.batch_size;
    tc.seed = derive_seed(seed_r, to_string(cell.config));

    RunMetrics rm;
    rm.config_name = to_string(cell.config);
    rm.repetition = cell.rep;
    rm.test_size = cfg.protocol.test_size;
    rm.train_seed = tc.seed;
    rm.config_hash = training_config_hash(tc);

    const fs::path run_dir = fs::path(runs_dir) / run_dir_name(rm);
    fs::create_directories(run_dir);
    TrainOptions opts;
    opts.perceptual_weight = cfg.protocol.perceptual_weight;
    opts.checkpoint_per_epoch = cfg.checkpoint_per_epoch;
    opts.run_dir = run_dir.string();

    try {
      const auto sample = sample_training_set(split, tc);
      auto [model, tlog] = train<float>(sample, tc, phi_local, store, cfg.model, opts);
      rm.records.reserve(2 * static_cast<std::size_t>(cfg.protocol.test_size));
      auto light_metrics = evaluate(model, split.test_light, store, &rm.load_failures_light);
      auto dark_metrics = evaluate(model, split.test_dark, store, &rm.load_failures_dark);
      for (auto& m : light_metrics) rm.records.push_back(std::move(m));
      for (auto& m : dark_metrics) rm.records.push_back(std::move(m));
      persist_run(runs_dir, rm, &tlog, &model, &split, &sample, config_hash, &tc);
      {
        std::lock_guard<std::mutex> lk(log_mutex);
        log << "run " << run_dir_name(rm) << ": done in " << tlog.wall_seconds << " s, "
            << rm.records.size() << " test records\n";
      }
    } catch (const DivergenceError& e) {
      rm.failed = true;
      rm.failure_reason = e.what();
      persist_run(runs_dir, rm, nullptr, nullptr, nullptr, nullptr, config_hash, &tc);
      std::lock_guard<std::mutex> lk(log_mutex);
      log << "run " << run_dir_name(rm) << ": FAILED (" << e.what() << ")\n";
    }
    results[cell_index] = std::move(rm);
  };

  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    ImageStore store = make_store();
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i, store, phi);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&]() {
        ImageStore store = make_store();
        FeatureExtractor phi_local = phi;
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= cells.size()) break;
          run_cell(i, store, phi_local);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  AuditOutcome outcome;
  outcome.out_dir = cfg.out_dir;
  outcome.runs = std::move(results);
  for (const auto& rm : outcome.runs) outcome.failed_runs += rm.failed ? 1 : 0;
  outcome.report = write_report(outcome.runs, &records, cfg.out_dir, config_hash);

  render_reconstruction_grids(cfg, outcome.runs, records, config_hash, log);
  return outcome;
}

}  // namespace dermaudit
