// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/dataset.hpp"
#include "dermaudit/image.hpp"
#include "dermaudit/rng.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit {

// Parametric two-subgroup toy population: flat skin tone per group, one
// centered elliptical lesion per image, Gaussian texture noise. The light
// and dark surrogates differ only where the parameters say they differ, so
// audit gaps are attributable by construction.
struct SynthParams {
  std::int64_t side = 32;
  double luminance_light = 0.8;
  double luminance_dark = 0.3;
  double lesion_radius_min = 0.12;  // fraction of side
  double lesion_radius_max = 0.30;
  double lesion_contrast_min = 0.10;
  double lesion_contrast_max = 0.30;
  double texture_noise = 0.03;
  std::int64_t n_per_group = 600;
  std::int64_t n_conditions = 6;
  // Per-condition weights; empty means uniform. Set them differently per
  // group to reproduce a condition-mix confound.
  std::vector<double> condition_mix_light;
  std::vector<double> condition_mix_dark;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_per_group < 1) throw ContractError("n_per_group must be >= 1");
    if (side < 8) throw ContractError("side too small");
    for (double v : {luminance_light, luminance_dark, lesion_contrast_min, lesion_contrast_max}) {
      if (v < 0.0 || v > 1.0) throw ContractError("luminance/contrast must stay in [0,1]");
    }
    if (n_conditions < 1) throw ContractError("need at least one condition label");
  }
};

struct SynthDataset {
  std::vector<ImageRecord> records;
  std::unordered_map<std::string, Tensorf> images;  // keyed by record id
};

namespace detail {

inline std::string condition_fine(std::int64_t i) { return "cond_" + std::to_string(i); }
inline std::string condition_mid(std::int64_t i) { return "mid_" + std::to_string(i / 3); }
inline std::string condition_coarse(std::int64_t i) { return "coarse_" + std::to_string(i / 9); }

inline std::int64_t sample_condition(Rng& rng, const std::vector<double>& mix,
                                     std::int64_t n_conditions) {
  if (mix.empty()) return static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n_conditions)));
  double total = 0.0;
  for (double w : mix) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    u -= mix[i];
    if (u <= 0.0) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(mix.size()) - 1;
}

inline Tensorf synth_image(Rng& rng, const SynthParams& p, double base_luminance) {
  const std::int64_t s = p.side;
  const double rx = rng.uniform(p.lesion_radius_min, p.lesion_radius_max) * static_cast<double>(s);
  const double ry = rng.uniform(p.lesion_radius_min, p.lesion_radius_max) * static_cast<double>(s);
  const double contrast = rng.uniform(p.lesion_contrast_min, p.lesion_contrast_max);
  const double cx = (static_cast<double>(s) - 1.0) / 2.0;
  const double cy = (static_cast<double>(s) - 1.0) / 2.0;
  Tensorf img({3, s, s});
  for (std::int64_t y = 0; y < s; ++y) {
    for (std::int64_t x = 0; x < s; ++x) {
      const double dx = (static_cast<double>(x) - cx) / rx;
      const double dy = (static_cast<double>(y) - cy) / ry;
      double v = base_luminance;
      if (dx * dx + dy * dy <= 1.0) v -= contrast;
      v += p.texture_noise * rng.normal();
      const float c = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      img.at(0, y, x) = c;
      img.at(1, y, x) = c;
      img.at(2, y, x) = c;
    }
  }
  return img;
}

}  // namespace detail

// Fully seeded generation. Light surrogates carry FST 1, dark ones FST 6, so
// the standard group assignment applies unchanged.
inline SynthDataset generate(const SynthParams& params) {
  params.validate();
  SynthDataset ds;
  const Rng base(derive_seed(params.seed, "synth"));
  struct GroupSpec {
    const char* tag;
    int fst;
    double luminance;
    const std::vector<double>* mix;
  };
  const GroupSpec groups[2] = {
      {"light", 1, params.luminance_light, &params.condition_mix_light},
      {"dark", 6, params.luminance_dark, &params.condition_mix_dark},
  };
  for (const auto& g : groups) {
    Rng rng = base.child(std::string("group/") + g.tag);
    for (std::int64_t i = 0; i < params.n_per_group; ++i) {
      ImageRecord rec;
      rec.id = std::string("synth_") + g.tag + "_" + std::to_string(i);
      rec.source = "images/" + rec.id + ".png";
      rec.fst.value = g.fst;
      const std::int64_t cond = detail::sample_condition(rng, *g.mix, params.n_conditions);
      rec.fine_label = detail::condition_fine(cond);
      rec.mid_label = detail::condition_mid(cond);
      rec.coarse_label = detail::condition_coarse(cond);
      ds.images.emplace(rec.id, detail::synth_image(rng, params, g.luminance));
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

// Writes the dataset in exactly the shape the dataset module consumes: an
// image directory plus a metadata CSV using the default column names.
inline void materialize(const SynthDataset& ds, const std::string& out_dir,
                        const ColumnMap& columns = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  for (const auto& rec : ds.records) {
    write_image((fs::path(out_dir) / rec.source).string(), ds.images.at(rec.id));
  }
  std::ofstream csv(fs::path(out_dir) / "metadata.csv");
  if (!csv) throw std::runtime_error("cannot write metadata.csv under " + out_dir);
  csv << columns.id << "," << columns.fst << "," << columns.fine << "," << columns.mid << ","
      << columns.coarse << "," << columns.source << "\n";
  for (const auto& rec : ds.records) {
    csv << rec.id << "," << rec.fst.value << "," << rec.fine_label << "," << rec.mid_label << ","
        << rec.coarse_label << "," << rec.source << "\n";
  }
}

// In-memory image store for generated datasets (no files involved).
inline ImageStore memory_store(const SynthDataset& ds, std::int64_t side) {
  ImageStore store(ImageResolver(""), side);
  for (const auto& [id, img] : ds.images) {
    if (img.dim(1) != side) {
      throw ContractError("synthetic image side mismatch");
    }
    store.put(id, img);
  }
  return store;
}

}  // namespace dermaudit
