// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermaudit/common.hpp"
#include "dermaudit/dataset.hpp"
#include "dermaudit/image.hpp"
#include "dermaudit/stats.hpp"
#include "dermaudit/training.hpp"
#include "dermaudit/vae.hpp"

namespace dermaudit {

// Per-image evaluation result for one trained model.
struct ImageMetric {
  std::string id;
  SkinToneGroup group = SkinToneGroup::Light;
  double mse = 0;              // mean squared error over pixels and channels
  double mean_latent_std = 0;  // mean of sigma over all latent dimensions
  std::string fine, mid, coarse;
};

// Everything one (config, repetition) run produced.
struct RunMetrics {
  std::string config_name;
  std::int64_t repetition = 0;
  std::int64_t test_size = 0;  // intended per-group test count
  std::vector<ImageMetric> records;
  std::int64_t load_failures_light = 0;
  std::int64_t load_failures_dark = 0;
  bool failed = false;
  std::string failure_reason;
  std::uint64_t train_seed = 0;
  std::string config_hash;
};

enum class Granularity { Coarse, Mid, Fine };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::Coarse: return "coarse";
    case Granularity::Mid: return "mid";
    case Granularity::Fine: return "fine";
  }
  return "?";
}

inline const std::string& label_at(const ImageRecord& rec, Granularity g) {
  switch (g) {
    case Granularity::Coarse: return rec.coarse_label;
    case Granularity::Mid: return rec.mid_label;
    default: return rec.fine_label;
  }
}

inline const std::string& label_at(const ImageMetric& m, Granularity g) {
  switch (g) {
    case Granularity::Coarse: return m.coarse;
    case Granularity::Mid: return m.mid;
    default: return m.fine;
  }
}

// Evaluates a trained model on a test set: reconstruct each image from the
// latent MEAN (no sampling) and record per-image MSE plus the mean encoder
// standard deviation. Unloadable images are skipped and counted.
template <typename Model>
std::vector<ImageMetric> evaluate(Model& model, const std::vector<ImageRecord>& test,
                                  ImageStore& store, std::int64_t* load_failures = nullptr,
                                  std::int64_t eval_batch = 32) {
  const std::int64_t side = model.config().input_side;
  std::vector<ImageMetric> out;
  out.reserve(test.size());
  std::int64_t failures = 0;

  std::vector<const ImageRecord*> loadable;
  std::vector<const Tensorf*> images;
  for (const auto& rec : test) {
    try {
      images.push_back(&store.load(rec));
      loadable.push_back(&rec);
    } catch (const LoadError&) {
      ++failures;
    }
  }

  for (std::size_t start = 0; start < loadable.size();
       start += static_cast<std::size_t>(eval_batch)) {
    const std::int64_t b =
        std::min<std::int64_t>(eval_batch, static_cast<std::int64_t>(loadable.size() - start));
    Tensorf x({b, 3, side, side});
    for (std::int64_t i = 0; i < b; ++i) {
      const Tensorf& img = *images[start + static_cast<std::size_t>(i)];
      std::copy(img.data(), img.data() + img.numel(), x.data() + i * 3 * side * side);
    }
    auto [mu, log_var] = model.encode_batch(x, /*training=*/false);
    const Tensorf x_hat = model.decode_batch(mu, /*training=*/false);
    const std::int64_t pixels = 3 * side * side;
    const std::int64_t latent_dims = mu.numel() / b;
    for (std::int64_t i = 0; i < b; ++i) {
      const ImageRecord& rec = *loadable[start + static_cast<std::size_t>(i)];
      ImageMetric m;
      m.id = rec.id;
      const auto grp = assign_group(rec.fst);
      if (!grp) throw ContractError("evaluate: ungrouped record '" + rec.id + "' in test set");
      m.group = *grp;
      m.fine = rec.fine_label;
      m.mid = rec.mid_label;
      m.coarse = rec.coarse_label;
      double sse = 0.0;
      const float* xp = x.data() + i * pixels;
      const float* hp = x_hat.data() + i * pixels;
      for (std::int64_t j = 0; j < pixels; ++j) {
        const double d = static_cast<double>(xp[j]) - static_cast<double>(hp[j]);
        sse += d * d;
      }
      m.mse = sse / static_cast<double>(pixels);
      double std_sum = 0.0;
      const float* lv = log_var.data() + i * latent_dims;
      for (std::int64_t j = 0; j < latent_dims; ++j) {
        std_sum += std::exp(0.5 * static_cast<double>(lv[j]));
      }
      m.mean_latent_std = std_sum / static_cast<double>(latent_dims);
      out.push_back(std::move(m));
    }
  }
  if (load_failures) *load_failures = failures;
  return out;
}

// The full experimental protocol: repetitions x configurations, each with a
// fresh split, a fresh training sample, a fresh model.
struct Protocol {
  std::int64_t n_reps = 10;
  std::vector<TrainingConfig::Name> configs = {TrainingConfig::Name::A_Light,
                                               TrainingConfig::Name::B_Mixed,
                                               TrainingConfig::Name::C_Dark};
  std::int64_t test_size = 500;
  std::int64_t train_size = 1668;
  std::int64_t epochs = 15;
  double learning_rate = 1e-4;
  std::int64_t batch_size = 64;
  double perceptual_weight = 1.0;
  std::uint64_t base_seed = 0;
};

struct ExperimentHooks {
  // Called with each finished run while its model is still alive.
  std::function<void(const RunMetrics&, const TrainRunLog&, VaeModel&, const DatasetSplit&,
                     const std::vector<ImageRecord>&)>
      on_run;
  // Called when a run diverged; the experiment continues.
  std::function<void(const RunMetrics&)> on_failed;
};

// Runs the protocol: for each repetition, derive seed_r = base_seed + r and
// resample both test sets; for each config, sample a training set with
// replacement, train, and evaluate on both test sets. A diverged run is
// recorded as failed and the experiment continues.
inline std::vector<RunMetrics> run_experiment(const std::vector<ImageRecord>& records,
                                              const Protocol& proto, const VaeConfig& arch,
                                              FeatureExtractor& phi, ImageStore& store,
                                              const ExperimentHooks& hooks = {},
                                              const TrainOptions& base_opts = {}) {
  std::vector<RunMetrics> results;
  results.reserve(static_cast<std::size_t>(proto.n_reps) * proto.configs.size());
  for (std::int64_t rep = 0; rep < proto.n_reps; ++rep) {
    const std::uint64_t seed_r = proto.base_seed + static_cast<std::uint64_t>(rep);
    const DatasetSplit split = make_split(records, proto.test_size, seed_r);
    for (const auto config_name : proto.configs) {
      TrainingConfig tc = TrainingConfig::canonical(config_name);
      tc.train_size = proto.train_size;
      tc.epochs = proto.epochs;
      tc.learning_rate = proto.learning_rate;
      tc.batch_size = proto.batch_size;
      tc.seed = derive_seed(seed_r, to_string(config_name));

      RunMetrics rm;
      rm.config_name = to_string(config_name);
      rm.repetition = rep;
      rm.test_size = proto.test_size;
      rm.train_seed = tc.seed;
      rm.config_hash = training_config_hash(tc);

      try {
        const auto sample = sample_training_set(split, tc);
        TrainOptions opts = base_opts;
        auto [model, log] = train<float>(sample, tc, phi, store, arch, opts);
        rm.load_failures_light = 0;
        rm.load_failures_dark = 0;
        auto light_metrics =
            evaluate(model, split.test_light, store, &rm.load_failures_light);
        auto dark_metrics = evaluate(model, split.test_dark, store, &rm.load_failures_dark);
        rm.records.reserve(light_metrics.size() + dark_metrics.size());
        for (auto& m : light_metrics) rm.records.push_back(std::move(m));
        for (auto& m : dark_metrics) rm.records.push_back(std::move(m));
        if (hooks.on_run) hooks.on_run(rm, log, model, split, sample);
      } catch (const DivergenceError& e) {
        rm.failed = true;
        rm.failure_reason = e.what();
        if (hooks.on_failed) hooks.on_failed(rm);
      }
      results.push_back(std::move(rm));
    }
  }
  return results;
}

// --- Aggregation -------------------------------------------------------------

struct CellStats {
  BoxStats mse;
  BoxStats latent_std;
  std::int64_t count = 0;     // records aggregated
  std::int64_t expected = 0;  // runs_included * test_size
  std::int64_t excluded = 0;  // logged load failures
  std::int64_t runs_included = 0;
  std::int64_t runs_failed = 0;
  bool complete() const { return !runs_failed && count + excluded == expected; }
};

struct PrevalenceEntry {
  double light = 0, dark = 0;
};
using PrevalenceTable = std::map<std::string, PrevalenceEntry>;

struct ConditionMse {
  std::optional<double> light, dark;  // absent when the condition never occurs in a group
};
using ConditionMseTable = std::map<std::string, ConditionMse>;

struct RunSummary {
  std::string config;
  std::int64_t repetition = 0;
  bool failed = false;
  std::string failure_reason;
  std::int64_t n_records = 0;
  std::int64_t load_failures = 0;
  std::uint64_t train_seed = 0;
  std::string config_hash;
};

struct AuditReport {
  // config -> group ("light"/"dark") -> distribution stats over all reps
  std::map<std::string, std::map<std::string, CellStats>> cells;
  // config -> median mse(dark) - median mse(light)
  std::map<std::string, double> mse_gap;
  // granularity -> table (attached from the dataset by the pipeline)
  std::map<std::string, PrevalenceTable> prevalence;
  // granularity -> config -> table
  std::map<std::string, std::map<std::string, ConditionMseTable>> condition_mse;
  std::vector<RunSummary> manifest;
  bool has_incomplete_cells = false;
};

// Per-condition normalized counts per group; each group's vector sums to 1.
inline PrevalenceTable condition_prevalence(const std::vector<ImageRecord>& records,
                                            Granularity granularity) {
  PrevalenceTable table;
  std::int64_t total_light = 0, total_dark = 0;
  for (const auto& rec : records) {
    const auto grp = assign_group(rec.fst);
    if (!grp || !rec.has_all_labels()) continue;
    auto& entry = table[label_at(rec, granularity)];
    if (*grp == SkinToneGroup::Light) {
      entry.light += 1.0;
      ++total_light;
    } else {
      entry.dark += 1.0;
      ++total_dark;
    }
  }
  for (auto& [label, entry] : table) {
    entry.light = total_light ? entry.light / static_cast<double>(total_light) : 0.0;
    entry.dark = total_dark ? entry.dark / static_cast<double>(total_dark) : 0.0;
  }
  return table;
}

// Group-wise mean MSE per condition over the given runs. Conditions absent
// from a group keep an empty optional, never a zero.
inline ConditionMseTable per_condition_mse(const std::vector<RunMetrics>& runs,
                                           Granularity granularity) {
  struct Acc {
    double sum = 0;
    std::int64_t n = 0;
  };
  std::map<std::string, std::pair<Acc, Acc>> acc;
  for (const auto& run : runs) {
    if (run.failed) continue;
    for (const auto& m : run.records) {
      auto& slot = acc[label_at(m, granularity)];
      Acc& a = m.group == SkinToneGroup::Light ? slot.first : slot.second;
      a.sum += m.mse;
      ++a.n;
    }
  }
  ConditionMseTable table;
  for (const auto& [label, slot] : acc) {
    ConditionMse cm;
    if (slot.first.n > 0) cm.light = slot.first.sum / static_cast<double>(slot.first.n);
    if (slot.second.n > 0) cm.dark = slot.second.sum / static_cast<double>(slot.second.n);
    table[label] = cm;
  }
  return table;
}

// Boxplot statistics per (config, group) pooled over repetitions, the
// median-MSE gap per config, per-condition MSE tables, and the run manifest.
inline AuditReport aggregate(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw ContractError("aggregate: no runs");
  AuditReport report;

  std::map<std::string, std::map<std::string, std::vector<double>>> mse_values, std_values;
  std::map<std::string, std::map<std::string, CellStats>> cells;
  std::map<std::string, std::vector<const RunMetrics*>> by_config;

  for (const auto& run : runs) {
    RunSummary rs;
    rs.config = run.config_name;
    rs.repetition = run.repetition;
    rs.failed = run.failed;
    rs.failure_reason = run.failure_reason;
    rs.n_records = static_cast<std::int64_t>(run.records.size());
    rs.load_failures = run.load_failures_light + run.load_failures_dark;
    rs.train_seed = run.train_seed;
    rs.config_hash = run.config_hash;
    report.manifest.push_back(std::move(rs));

    by_config[run.config_name].push_back(&run);
    for (const char* group : {"light", "dark"}) {
      CellStats& cell = cells[run.config_name][group];
      if (run.failed) {
        ++cell.runs_failed;
        continue;
      }
      ++cell.runs_included;
      cell.expected += run.test_size;
      cell.excluded += group == std::string("light") ? run.load_failures_light
                                                     : run.load_failures_dark;
    }
    if (run.failed) continue;
    for (const auto& m : run.records) {
      const char* group = m.group == SkinToneGroup::Light ? "light" : "dark";
      mse_values[run.config_name][group].push_back(m.mse);
      std_values[run.config_name][group].push_back(m.mean_latent_std);
      ++cells[run.config_name][group].count;
    }
  }

  for (auto& [config, groups] : cells) {
    for (auto& [group, cell] : groups) {
      auto& mses = mse_values[config][group];
      if (!mses.empty()) {
        cell.mse = BoxStats::of(mses);
        cell.latent_std = BoxStats::of(std_values[config][group]);
      }
      if (!cell.complete()) report.has_incomplete_cells = true;
    }
    const auto& light = mse_values[config]["light"];
    const auto& dark = mse_values[config]["dark"];
    if (!light.empty() && !dark.empty()) {
      report.mse_gap[config] = median(dark) - median(light);
    }
  }
  report.cells = std::move(cells);

  for (const auto g : {Granularity::Coarse, Granularity::Mid, Granularity::Fine}) {
    for (const auto& [config, run_ptrs] : by_config) {
      std::vector<RunMetrics> subset;
      subset.reserve(run_ptrs.size());
      for (const auto* r : run_ptrs) subset.push_back(*r);
      report.condition_mse[to_string(g)][config] = per_condition_mse(subset, g);
    }
  }
  return report;
}

// --- Reconstruction grids -----------------------------------------------------

// Row 0: originals; one row per supplied (label, model). Sample choice is a
// seeded deterministic draw of k records.
template <typename Model>
Tensorf reconstruction_grid(const std::vector<std::pair<std::string, Model*>>& models,
                            const std::vector<ImageRecord>& samples, std::int64_t k,
                            ImageStore& store, std::uint64_t seed) {
  const std::int64_t pad = 2;
  if (k > static_cast<std::int64_t>(samples.size())) {
    throw ContractError("reconstruction_grid: k exceeds sample count");
  }
  if (k == 0 || models.empty()) return Tensorf({3, pad, pad});
  const std::int64_t side = models.front().second->config().input_side;

  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "recon_grid"));
  rng.shuffle(idx);

  std::vector<const Tensorf*> chosen;
  for (std::size_t i = 0; i < idx.size() && static_cast<std::int64_t>(chosen.size()) < k; ++i) {
    try {
      chosen.push_back(&store.load(samples[idx[i]]));
    } catch (const LoadError&) {
      continue;
    }
  }
  const std::int64_t cols = static_cast<std::int64_t>(chosen.size());
  const std::int64_t rows = 1 + static_cast<std::int64_t>(models.size());
  Tensorf grid({3, rows * (side + pad) + pad, cols * (side + pad) + pad});
  grid.fill(1.0f);

  const auto blit = [&](const Tensorf& img, std::int64_t row, std::int64_t col) {
    const std::int64_t y0 = pad + row * (side + pad);
    const std::int64_t x0 = pad + col * (side + pad);
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t y = 0; y < side; ++y) {
        for (std::int64_t x = 0; x < side; ++x) {
          grid.at(c, y0 + y, x0 + x) = img.at(c, y, x);
        }
      }
    }
  };

  for (std::int64_t col = 0; col < cols; ++col) blit(*chosen[static_cast<std::size_t>(col)], 0, col);
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    Model& model = *models[mi].second;
    for (std::int64_t col = 0; col < cols; ++col) {
      const Tensorf& img = *chosen[static_cast<std::size_t>(col)];
      Tensorf x({1, 3, side, side});
      std::copy(img.data(), img.data() + img.numel(), x.data());
      auto [mu, log_var] = model.encode_batch(x, false);
      const Tensorf x_hat = model.decode_batch(mu, false);
      Tensorf single({3, side, side});
      std::copy(x_hat.data(), x_hat.data() + single.numel(), single.data());
      blit(single, static_cast<std::int64_t>(mi) + 1, col);
    }
  }
  return grid;
}

// --- Persistence ---------------------------------------------------------------

inline nlohmann::json to_json(const ImageMetric& m) {
  return {{"id", m.id},           {"group", to_string(m.group)},
          {"mse", m.mse},         {"mean_latent_std", m.mean_latent_std},
          {"fine", m.fine},       {"mid", m.mid},
          {"coarse", m.coarse}};
}

inline ImageMetric image_metric_from_json(const nlohmann::json& j) {
  ImageMetric m;
  m.id = j.at("id").get<std::string>();
  const auto grp = skin_tone_group_from_string(j.at("group").get<std::string>());
  if (!grp) throw SchemaError("bad group in metric record");
  m.group = *grp;
  m.mse = j.at("mse").get<double>();
  m.mean_latent_std = j.at("mean_latent_std").get<double>();
  m.fine = j.at("fine").get<std::string>();
  m.mid = j.at("mid").get<std::string>();
  m.coarse = j.at("coarse").get<std::string>();
  return m;
}

inline nlohmann::json run_header_json(const RunMetrics& rm) {
  return {{"config_name", rm.config_name},
          {"repetition", rm.repetition},
          {"test_size", rm.test_size},
          {"load_failures_light", rm.load_failures_light},
          {"load_failures_dark", rm.load_failures_dark},
          {"failed", rm.failed},
          {"failure_reason", rm.failure_reason},
          {"train_seed", rm.train_seed},
          {"config_hash", rm.config_hash}};
}

inline RunMetrics run_metrics_from_header(const nlohmann::json& j) {
  RunMetrics rm;
  rm.config_name = j.at("config_name").get<std::string>();
  rm.repetition = j.at("repetition").get<std::int64_t>();
  rm.test_size = j.at("test_size").get<std::int64_t>();
  rm.load_failures_light = j.value("load_failures_light", std::int64_t{0});
  rm.load_failures_dark = j.value("load_failures_dark", std::int64_t{0});
  rm.failed = j.value("failed", false);
  rm.failure_reason = j.value("failure_reason", "");
  rm.train_seed = j.value("train_seed", std::uint64_t{0});
  rm.config_hash = j.value("config_hash", "");
  return rm;
}

}  // namespace dermaudit
