// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "dermaudit/dataset.hpp"

using namespace dermaudit;

namespace {

std::vector<ImageRecord> make_population(std::int64_t n_light, std::int64_t n_dark) {
  std::vector<ImageRecord> records;
  for (std::int64_t i = 0; i < n_light; ++i) {
    ImageRecord r;
    r.id = "L" + std::to_string(i);
    r.fst.value = i % 2 == 0 ? 1 : 2;
    r.fine_label = "f";
    r.mid_label = "m";
    r.coarse_label = "c";
    records.push_back(r);
  }
  for (std::int64_t i = 0; i < n_dark; ++i) {
    ImageRecord r;
    r.id = "D" + std::to_string(i);
    r.fst.value = i % 2 == 0 ? 5 : 6;
    r.fine_label = "f";
    r.mid_label = "m";
    r.coarse_label = "c";
    records.push_back(r);
  }
  return records;
}

std::vector<std::string> ids_of(const std::vector<ImageRecord>& recs) {
  std::vector<std::string> ids;
  for (const auto& r : recs) ids.push_back(r.id);
  return ids;
}

}  // namespace

TEST_CASE("parse_metadata reads the default column layout") {
  std::istringstream csv(
      "md5hash,fitzpatrick,label,nine_partition_label,three_partition_label,url\n"
      "abc,2,eczema,inflammatory,non-neoplastic,http://x/1.jpg\n"
      "def,-1,psoriasis,inflammatory,non-neoplastic,http://x/2.jpg\n"
      "ghi,9,acne,inflammatory,non-neoplastic,http://x/3.jpg\n");
  ParseSummary summary;
  const auto records = parse_metadata(csv, ColumnMap{}, &summary);

  REQUIRE(records.size() == 3);
  CHECK(records[0].fst.value == 2);
  CHECK(records[1].fst.value == -1);
  CHECK(records[2].fst.value == -1);  // 9 is outside the 1..6 scale
  CHECK(summary.invalid_fst == 1);
  CHECK(summary.total_rows == 3);
  CHECK(summary.rejected_rows == 0);
  CHECK(summary.fst_counts.at(-1) == 2);
  CHECK(summary.fst_counts.at(2) == 1);
  CHECK(records[0].fine_label == "eczema");
  CHECK(records[0].source == "http://x/1.jpg");
}

TEST_CASE("parse_metadata header-only stream yields empty list") {
  std::istringstream csv("md5hash,fitzpatrick,label,nine_partition_label,three_partition_label,url\n");
  ParseSummary summary;
  const auto records = parse_metadata(csv, ColumnMap{}, &summary);
  CHECK(records.empty());
  CHECK(summary.total_rows == 0);
}

TEST_CASE("parse_metadata errors name the missing column") {
  std::istringstream csv("md5hash,label,nine_partition_label,three_partition_label,url\nx,a,b,c,u\n");
  try {
    parse_metadata(csv, ColumnMap{});
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("fitzpatrick") != std::string::npos);
  }
}

TEST_CASE("parse_metadata rejects an empty stream") {
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_metadata(empty, ColumnMap{}), SchemaError);
}

TEST_CASE("parse_metadata handles custom mapping, quotes and duplicates") {
  ColumnMap columns;
  columns.id = "img";
  columns.fst = "tone";
  columns.fine = "dx";
  columns.mid = "dx9";
  columns.coarse = "dx3";
  columns.source = "file";
  std::istringstream csv(
      "img,tone,dx,dx9,dx3,file\n"
      "a,1,\"basal, cell\",benign,neoplastic,a.png\n"
      "a,2,x,y,z,b.png\n"
      "b,3.0,melanoma,malignant,neoplastic,b.png\n");
  ParseSummary summary;
  const auto records = parse_metadata(csv, columns, &summary);
  REQUIRE(records.size() == 2);  // duplicate id "a" rejected
  CHECK(summary.rejected_rows == 1);
  CHECK(records[0].fine_label == "basal, cell");
  CHECK(records[1].fst.value == 3);  // float-formatted code parses
}

TEST_CASE("assign_group implements the FST partition") {
  CHECK(assign_group({1}) == SkinToneGroup::Light);
  CHECK(assign_group({2}) == SkinToneGroup::Light);
  CHECK_FALSE(assign_group({3}).has_value());
  CHECK_FALSE(assign_group({4}).has_value());
  CHECK(assign_group({5}) == SkinToneGroup::Dark);
  CHECK(assign_group({6}) == SkinToneGroup::Dark);
  CHECK_FALSE(assign_group({-1}).has_value());

  // Never Light for fst >= 3, never Dark for fst <= 4.
  for (int code : {-1, 1, 2, 3, 4, 5, 6}) {
    const auto g = assign_group({code});
    if (code >= 3) CHECK(g != SkinToneGroup::Light);
    if (code <= 4) CHECK(g != SkinToneGroup::Dark);
  }
}

TEST_CASE("make_split sizes and pools") {
  const auto records = make_population(600, 600);
  const DatasetSplit split = make_split(records, 500, 42);
  CHECK(split.test_light.size() == 500);
  CHECK(split.test_dark.size() == 500);
  CHECK(split.train_pool_light.size() == 100);
  CHECK(split.train_pool_dark.size() == 100);
  for (const auto& r : split.test_light) CHECK(assign_group(r.fst) == SkinToneGroup::Light);
  for (const auto& r : split.test_dark) CHECK(assign_group(r.fst) == SkinToneGroup::Dark);
}

TEST_CASE("make_split is deterministic in the seed") {
  const auto records = make_population(40, 40);
  const auto a = make_split(records, 10, 7);
  const auto b = make_split(records, 10, 7);
  CHECK(ids_of(a.test_light) == ids_of(b.test_light));
  CHECK(ids_of(a.test_dark) == ids_of(b.test_dark));
  CHECK(ids_of(a.train_pool_light) == ids_of(b.train_pool_light));

  const auto c = make_split(records, 10, 8);
  CHECK(ids_of(a.test_light) != ids_of(c.test_light));
}

TEST_CASE("make_split across many seeds keeps test and pool disjoint") {
  const auto records = make_population(80, 70);
  std::set<std::vector<std::string>> distinct;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto split = make_split(records, 30, seed);
    REQUIRE(split.test_light.size() == 30);
    REQUIRE(split.test_dark.size() == 30);
    REQUIRE(split.train_pool_light.size() == 50);
    REQUIRE(split.train_pool_dark.size() == 40);
    std::set<std::string> test_ids;
    for (const auto& r : split.test_light) test_ids.insert(r.id);
    for (const auto& r : split.test_dark) test_ids.insert(r.id);
    REQUIRE(test_ids.size() == 60);  // no duplicates inside the test sets
    for (const auto& r : split.train_pool_light) CHECK(test_ids.count(r.id) == 0);
    for (const auto& r : split.train_pool_dark) CHECK(test_ids.count(r.id) == 0);
    distinct.insert(ids_of(split.test_light));
  }
  CHECK(distinct.size() == 10);  // seeds give distinct draws
}

TEST_CASE("make_split reports insufficient populations") {
  const auto records = make_population(20, 600);
  try {
    make_split(records, 500, 0);
    FAIL("expected SizingError");
  } catch (const SizingError& e) {
    CHECK(e.requested == 500);
    CHECK(e.available == 20);
  }
}

TEST_CASE("make_split drops ungrouped and unlabeled records") {
  auto records = make_population(30, 30);
  ImageRecord boundary;
  boundary.id = "mid";
  boundary.fst.value = 3;
  boundary.fine_label = "f";
  boundary.mid_label = "m";
  boundary.coarse_label = "c";
  records.push_back(boundary);
  ImageRecord unlabeled;
  unlabeled.id = "nolabel";
  unlabeled.fst.value = 1;
  records.push_back(unlabeled);

  const auto split = make_split(records, 10, 1);
  CHECK(split.test_light.size() + split.train_pool_light.size() == 30);
  CHECK(split.test_dark.size() + split.train_pool_dark.size() == 30);
}

TEST_CASE("sample_training_set draws the exact canonical compositions") {
  const auto records = make_population(600, 600);
  const auto split = make_split(records, 500, 3);

  const auto count_groups = [](const std::vector<ImageRecord>& recs) {
    std::pair<std::int64_t, std::int64_t> counts{0, 0};
    for (const auto& r : recs) {
      (assign_group(r.fst) == SkinToneGroup::Light ? counts.first : counts.second) += 1;
    }
    return counts;
  };

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto a = TrainingConfig::canonical(TrainingConfig::Name::A_Light);
    a.seed = seed;
    const auto sa = sample_training_set(split, a);
    REQUIRE(sa.size() == 1668);
    CHECK(count_groups(sa) == std::pair<std::int64_t, std::int64_t>{1668, 0});

    auto b = TrainingConfig::canonical(TrainingConfig::Name::B_Mixed);
    b.seed = seed;
    const auto sb = sample_training_set(split, b);
    CHECK(count_groups(sb) == std::pair<std::int64_t, std::int64_t>{834, 834});

    auto c = TrainingConfig::canonical(TrainingConfig::Name::C_Dark);
    c.seed = seed;
    const auto sc = sample_training_set(split, c);
    CHECK(count_groups(sc) == std::pair<std::int64_t, std::int64_t>{0, 1668});
  }
}

TEST_CASE("sample_training_set with tiny pool produces duplicates") {
  const auto records = make_population(20, 20);
  const auto split = make_split(records, 10, 1);  // pools of 10 per group
  auto cfg = TrainingConfig::canonical(TrainingConfig::Name::A_Light);
  cfg.seed = 5;
  const auto sample = sample_training_set(split, cfg);
  REQUIRE(sample.size() == 1668);
  std::set<std::string> unique;
  for (const auto& r : sample) unique.insert(r.id);
  CHECK(unique.size() <= 10);  // pigeonhole under with-replacement draws
}

TEST_CASE("sample_training_set composition matches round(light_fraction * train_size)") {
  const auto records = make_population(50, 50);
  const auto split = make_split(records, 10, 2);
  for (const double frac : {0.0, 0.1, 0.25, 0.5, 0.63, 1.0}) {
    for (const std::int64_t size : {7LL, 64LL, 417LL}) {
      TrainingConfig cfg;
      cfg.light_fraction = frac;
      cfg.train_size = size;
      cfg.seed = 11;
      const auto sample = sample_training_set(split, cfg);
      REQUIRE(static_cast<std::int64_t>(sample.size()) == size);
      std::int64_t light = 0;
      for (const auto& r : sample) {
        if (assign_group(r.fst) == SkinToneGroup::Light) ++light;
      }
      CHECK(light == std::llround(frac * static_cast<double>(size)));
    }
  }
}

TEST_CASE("sample_training_set is deterministic and errors on empty pools") {
  const auto records = make_population(30, 30);
  const auto split = make_split(records, 10, 4);
  auto cfg = TrainingConfig::canonical(TrainingConfig::Name::B_Mixed);
  cfg.train_size = 100;
  cfg.seed = 9;
  CHECK(ids_of(sample_training_set(split, cfg)) == ids_of(sample_training_set(split, cfg)));

  DatasetSplit empty_dark = split;
  empty_dark.train_pool_dark.clear();
  CHECK_THROWS_AS(sample_training_set(empty_dark, cfg), SizingError);
  auto light_only = TrainingConfig::canonical(TrainingConfig::Name::A_Light);
  light_only.train_size = 10;
  light_only.seed = 1;
  CHECK_NOTHROW(sample_training_set(empty_dark, light_only));
}

TEST_CASE("full Fitzpatrick17k metadata parses to 16,577 records") {
  const char* path = std::getenv("DERMAUDIT_FITZ17K_CSV");
  if (path == nullptr) {
    SUCCEED("set DERMAUDIT_FITZ17K_CSV to a local fitzpatrick17k.csv to run this check");
    return;
  }
  std::ifstream in(path);
  REQUIRE(in.good());
  ParseSummary summary;
  const auto records = parse_metadata(in, ColumnMap{}, &summary);
  CHECK(records.size() == 16577);
}

TEST_CASE("mixed halves round away from zero on odd sizes") {
  TrainingConfig cfg = TrainingConfig::canonical(TrainingConfig::Name::B_Mixed);
  cfg.train_size = 417;
  CHECK(cfg.light_count() == 209);
  CHECK(cfg.dark_count() == 208);
  cfg.train_size = 1668;
  CHECK(cfg.light_count() == 834);
}
