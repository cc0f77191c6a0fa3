// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dermaudit/common.hpp"
#include "dermaudit/dataset.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit {

// Decoded image as CHW float tensor with values in [0, 1], RGB channel order.
inline Tensorf decode_image_file(const std::string& path, std::int64_t side,
                                 const std::string& record_id) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) {
    throw LoadError("cannot decode image '" + path + "'", record_id);
  }
  cv::Mat resized;
  if (bgr.rows == side && bgr.cols == side) {
    resized = bgr;
  } else {
    cv::resize(bgr, resized, cv::Size(static_cast<int>(side), static_cast<int>(side)), 0, 0,
               cv::INTER_LINEAR);
  }
  Tensorf out({3, side, side});
  for (std::int64_t y = 0; y < side; ++y) {
    const auto* row = resized.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < side; ++x) {
      const cv::Vec3b px = row[x];
      out.at(0, y, x) = static_cast<float>(px[2]) / 255.0f;  // R
      out.at(1, y, x) = static_cast<float>(px[1]) / 255.0f;  // G
      out.at(2, y, x) = static_cast<float>(px[0]) / 255.0f;  // B
    }
  }
  return out;
}

// Writes a CHW [0,1] tensor as an 8-bit PNG (or whatever the extension says).
inline void write_image(const std::string& path, const Tensorf& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ContractError("write_image expects a (3,H,W) tensor, got " + img.shape_str());
  }
  const auto h = static_cast<int>(img.dim(1));
  const auto w = static_cast<int>(img.dim(2));
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const auto to_u8 = [](float v) {
        const float c = std::min(1.0f, std::max(0.0f, v));
        return static_cast<unsigned char>(std::lround(c * 255.0f));
      };
      row[x] = cv::Vec3b(to_u8(img.at(2, y, x)), to_u8(img.at(1, y, x)), to_u8(img.at(0, y, x)));
    }
  }
  if (!cv::imwrite(path, bgr)) {
    throw std::runtime_error("cannot write image '" + path + "'");
  }
}

// Resolves a record to a decodable file. The record's source wins when it is
// an existing path; otherwise the id is looked up under the image root with
// common extensions. No downloading happens here.
class ImageResolver {
 public:
  explicit ImageResolver(std::filesystem::path images_root) : root_(std::move(images_root)) {}

  std::string resolve(const ImageRecord& rec) const {
    namespace fs = std::filesystem;
    if (!rec.source.empty()) {
      const fs::path src(rec.source);
      if (fs::exists(src)) return src.string();
      if (!root_.empty() && fs::exists(root_ / src)) return (root_ / src).string();
    }
    if (!root_.empty()) {
      for (const char* ext : {".png", ".jpg", ".jpeg", ".bmp"}) {
        const fs::path candidate = root_ / (rec.id + ext);
        if (fs::exists(candidate)) return candidate.string();
      }
    }
    throw LoadError("no decodable file for record (source='" + rec.source + "')", rec.id);
  }

 private:
  std::filesystem::path root_;
};

// Serves decoded tensors by record, caching by id. Training samples repeat
// ids (with-replacement draws), so the cache bounds decode work by the pool
// size rather than the draw count.
class ImageStore {
 public:
  ImageStore(ImageResolver resolver, std::int64_t side, bool cache = true)
      : resolver_(std::move(resolver)), side_(side), cache_enabled_(cache) {}

  std::int64_t side() const { return side_; }

  const Tensorf& load(const ImageRecord& rec) {
    if (cache_enabled_) {
      auto it = cache_.find(rec.id);
      if (it != cache_.end()) return it->second;
    }
    Tensorf img = decode_image_file(resolver_.resolve(rec), side_, rec.id);
    if (!cache_enabled_) {
      scratch_ = std::move(img);
      return scratch_;
    }
    return cache_.emplace(rec.id, std::move(img)).first->second;
  }

  // Pre-decoded entries (used by the synthetic testbed and tests).
  void put(const std::string& id, Tensorf img) { cache_[id] = std::move(img); }

 private:
  ImageResolver resolver_;
  std::int64_t side_;
  bool cache_enabled_;
  std::unordered_map<std::string, Tensorf> cache_;
  Tensorf scratch_;
};

// load_image per the dataset contract: decode, bilinear-resize to side x side,
// scale into [0,1].
inline Tensorf load_image(const ImageRecord& rec, std::int64_t side,
                          const std::string& images_root = "") {
  return decode_image_file(ImageResolver(images_root).resolve(rec), side, rec.id);
}

}  // namespace dermaudit
