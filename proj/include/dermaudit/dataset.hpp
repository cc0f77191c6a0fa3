// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/rng.hpp"

namespace dermaudit {

// Fitzpatrick skin type code. -1 is the dataset's missing marker; 1..6 are
// valid tones; anything else is rejected at parse time and folded to -1.
struct FSTLabel {
  int value = -1;

  static bool is_valid_code(int v) { return v == -1 || (v >= 1 && v <= 6); }
};

enum class SkinToneGroup { Light, Dark };

inline const char* to_string(SkinToneGroup g) {
  return g == SkinToneGroup::Light ? "light" : "dark";
}

inline std::optional<SkinToneGroup> skin_tone_group_from_string(const std::string& s) {
  if (s == "light") return SkinToneGroup::Light;
  if (s == "dark") return SkinToneGroup::Dark;
  return std::nullopt;
}

// Light <=> FST 1-2, Dark <=> FST 5-6. FST 3-4 sit on the tone boundary and
// map to no group, as does missing (-1).
inline std::optional<SkinToneGroup> assign_group(FSTLabel fst) {
  if (fst.value == 1 || fst.value == 2) return SkinToneGroup::Light;
  if (fst.value == 5 || fst.value == 6) return SkinToneGroup::Dark;
  return std::nullopt;
}

struct ImageRecord {
  std::string id;            // content hash or filename stem; unique per dataset
  std::string source;        // URL or path, resolved against an image root at load time
  FSTLabel fst;
  std::string fine_label;    // specific condition
  std::string mid_label;     // one of 9 superclasses
  std::string coarse_label;  // one of 3 superclasses

  bool has_all_labels() const {
    return !fine_label.empty() && !mid_label.empty() && !coarse_label.empty();
  }
};

// Maps logical fields to CSV column names. Defaults follow the Fitzpatrick17k
// release; override via config for other tables.
struct ColumnMap {
  std::string id = "md5hash";
  std::string fst = "fitzpatrick";
  std::string fine = "label";
  std::string mid = "nine_partition_label";
  std::string coarse = "three_partition_label";
  std::string source = "url";
};

struct ParseSummary {
  std::int64_t total_rows = 0;      // data rows seen (header excluded)
  std::int64_t rejected_rows = 0;   // empty/duplicate id or malformed row
  std::int64_t invalid_fst = 0;     // parseable-but-out-of-scale or unparseable codes
  std::map<int, std::int64_t> fst_counts;  // by validated code, -1 included
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == ',' && !quoted) {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

// FST cells may carry float formatting ("2.0"); parse leniently to int.
inline std::optional<int> parse_int_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    if (pos != s.size()) return std::nullopt;
    const double r = std::nearbyint(v);
    if (std::abs(v - r) > 1e-9) return std::nullopt;
    return static_cast<int>(r);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

// Reads a delimited metadata table (comma-separated, UTF-8, header row) into
// ImageRecords. Rows with unparseable or out-of-scale FST codes keep the row
// but get fst = -1 and bump the invalid_fst counter. Rows without a usable id
// (empty or duplicate) are rejected.
inline std::vector<ImageRecord> parse_metadata(std::istream& stream, const ColumnMap& columns,
                                               ParseSummary* summary_out = nullptr) {
  std::string header_line;
  if (!std::getline(stream, header_line)) {
    throw SchemaError("metadata stream is empty (no header row)");
  }
  const auto header = detail::split_csv_line(detail::strip_cr(header_line));
  std::unordered_map<std::string, std::size_t> col_index;
  for (std::size_t i = 0; i < header.size(); ++i) col_index[header[i]] = i;

  const auto need = [&](const std::string& name) -> std::size_t {
    auto it = col_index.find(name);
    if (it == col_index.end()) {
      throw SchemaError("metadata is missing mapped column '" + name + "'");
    }
    return it->second;
  };
  const std::size_t ci_id = need(columns.id);
  const std::size_t ci_fst = need(columns.fst);
  const std::size_t ci_fine = need(columns.fine);
  const std::size_t ci_mid = need(columns.mid);
  const std::size_t ci_coarse = need(columns.coarse);
  const std::size_t ci_source = need(columns.source);

  ParseSummary summary;
  std::vector<ImageRecord> records;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  while (std::getline(stream, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    ++summary.total_rows;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      ++summary.rejected_rows;
      continue;
    }
    ImageRecord rec;
    rec.id = fields[ci_id];
    if (rec.id.empty() || !seen_ids.insert(rec.id).second) {
      ++summary.rejected_rows;
      continue;
    }
    rec.source = fields[ci_source];
    rec.fine_label = fields[ci_fine];
    rec.mid_label = fields[ci_mid];
    rec.coarse_label = fields[ci_coarse];
    const auto code = detail::parse_int_cell(fields[ci_fst]);
    if (code && FSTLabel::is_valid_code(*code)) {
      rec.fst.value = *code;
    } else {
      rec.fst.value = -1;
      ++summary.invalid_fst;
    }
    ++summary.fst_counts[rec.fst.value];
    records.push_back(std::move(rec));
  }
  if (summary_out) *summary_out = summary;
  return records;
}

// One per-run split: two fixed-size test sets plus the leftover train pools.
// Only grouped records with all three condition labels participate.
struct DatasetSplit {
  std::vector<ImageRecord> test_light;
  std::vector<ImageRecord> test_dark;
  std::vector<ImageRecord> train_pool_light;
  std::vector<ImageRecord> train_pool_dark;
};

// One of the three representation regimes, plus the optimizer knobs that ride
// along with a training run.
struct TrainingConfig {
  enum class Name { A_Light, B_Mixed, C_Dark };

  Name name = Name::B_Mixed;
  double light_fraction = 0.5;  // A -> 1.0, B -> 0.5, C -> 0.0
  std::int64_t train_size = 1668;
  std::int64_t epochs = 15;
  double learning_rate = 1e-4;
  std::int64_t batch_size = 64;
  std::uint64_t seed = 0;

  static TrainingConfig canonical(Name name) {
    TrainingConfig c;
    c.name = name;
    c.light_fraction = name == Name::A_Light ? 1.0 : (name == Name::B_Mixed ? 0.5 : 0.0);
    return c;
  }

  std::int64_t light_count() const {
    return static_cast<std::int64_t>(std::llround(light_fraction * static_cast<double>(train_size)));
  }
  std::int64_t dark_count() const { return train_size - light_count(); }
};

inline const char* to_string(TrainingConfig::Name n) {
  switch (n) {
    case TrainingConfig::Name::A_Light: return "A_Light";
    case TrainingConfig::Name::B_Mixed: return "B_Mixed";
    case TrainingConfig::Name::C_Dark: return "C_Dark";
  }
  return "?";
}

inline std::optional<TrainingConfig::Name> training_config_name_from_string(const std::string& s) {
  if (s == "A_Light" || s == "A") return TrainingConfig::Name::A_Light;
  if (s == "B_Mixed" || s == "B") return TrainingConfig::Name::B_Mixed;
  if (s == "C_Dark" || s == "C") return TrainingConfig::Name::C_Dark;
  return std::nullopt;
}

namespace detail {

// Without-replacement selection: partial Fisher-Yates over the index range.
// Returns k drawn indices in draw order; `rest` gets the complement in
// original order.
inline std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, Rng& rng,
                                                         std::vector<std::size_t>* rest) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::size_t> drawn(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  if (rest) {
    rest->assign(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
    std::sort(rest->begin(), rest->end());
  }
  return drawn;
}

}  // namespace detail

// Samples the two test sets (without replacement, uniformly, deterministic in
// seed) and leaves the remainder as the train pools. Ungrouped records and
// records with missing condition labels are dropped.
inline DatasetSplit make_split(const std::vector<ImageRecord>& records,
                               std::int64_t test_size_per_group, std::uint64_t seed) {
  std::vector<ImageRecord> light, dark;
  for (const auto& rec : records) {
    const auto group = assign_group(rec.fst);
    if (!group || !rec.has_all_labels()) continue;
    (*group == SkinToneGroup::Light ? light : dark).push_back(rec);
  }
  const auto k = static_cast<std::size_t>(test_size_per_group);
  if (light.size() < k) {
    throw SizingError("light group smaller than requested test size", test_size_per_group,
                      static_cast<std::int64_t>(light.size()));
  }
  if (dark.size() < k) {
    throw SizingError("dark group smaller than requested test size", test_size_per_group,
                      static_cast<std::int64_t>(dark.size()));
  }

  DatasetSplit split;
  const Rng base(seed);
  {
    Rng r = base.child("split/light");
    std::vector<std::size_t> rest;
    for (auto i : detail::draw_without_replacement(light.size(), k, r, &rest))
      split.test_light.push_back(light[i]);
    for (auto i : rest) split.train_pool_light.push_back(light[i]);
  }
  {
    Rng r = base.child("split/dark");
    std::vector<std::size_t> rest;
    for (auto i : detail::draw_without_replacement(dark.size(), k, r, &rest))
      split.test_dark.push_back(dark[i]);
    for (auto i : rest) split.train_pool_dark.push_back(dark[i]);
  }
  return split;
}

// Draws the training sample for one config: round(light_fraction * train_size)
// records from the light pool and the remainder from the dark pool, each
// uniformly WITH replacement. Output order is the draw order (light then dark).
inline std::vector<ImageRecord> sample_training_set(const DatasetSplit& split,
                                                    const TrainingConfig& config) {
  const std::int64_t n_light = config.light_count();
  const std::int64_t n_dark = config.dark_count();
  if (n_light > 0 && split.train_pool_light.empty()) {
    throw SizingError("light train pool is empty but config requests light samples", n_light, 0);
  }
  if (n_dark > 0 && split.train_pool_dark.empty()) {
    throw SizingError("dark train pool is empty but config requests dark samples", n_dark, 0);
  }
  const Rng base(config.seed);
  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(config.train_size));
  {
    Rng r = base.child("train/light");
    for (std::int64_t i = 0; i < n_light; ++i)
      out.push_back(split.train_pool_light[static_cast<std::size_t>(
          r.below(split.train_pool_light.size()))]);
  }
  {
    Rng r = base.child("train/dark");
    for (std::int64_t i = 0; i < n_dark; ++i)
      out.push_back(split.train_pool_dark[static_cast<std::size_t>(
          r.below(split.train_pool_dark.size()))]);
  }
  return out;
}

}  // namespace dermaudit
