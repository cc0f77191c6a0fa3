// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermaudit/common.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit {

// Self-describing tensor container: magic, a JSON header describing metadata
// and the tensor table, then raw little-endian float32 payloads. Used for
// model checkpoints and feature-extractor weights.
//
//   [ "DMTA1\n" ][ u64 header_bytes ][ header JSON ][ tensor data ... ]
class TensorArchive {
 public:
  nlohmann::json meta;

  void put(const std::string& name, const Tensorf& t) {
    names_.push_back(name);
    tensors_.push_back(t);
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put(name, t.template cast<float>());
  }

  bool contains(const std::string& name) const {
    for (const auto& n : names_) {
      if (n == name) return true;
    }
    return false;
  }

  const Tensorf& get(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return tensors_[i];
    }
    throw SchemaError("archive has no tensor named '" + name + "'");
  }

  const std::vector<std::string>& names() const { return names_; }

  void save(const std::string& path) const {
    nlohmann::json header;
    header["format"] = "dermaudit-tensor-archive";
    header["version"] = 1;
    header["meta"] = meta;
    auto& table = header["tensors"];
    table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto nbytes = static_cast<std::uint64_t>(tensors_[i].numel()) * sizeof(float);
      table.push_back({{"name", names_[i]},
                       {"dtype", "f32"},
                       {"shape", tensors_[i].shape()},
                       {"offset", offset},
                       {"nbytes", nbytes}});
      offset += nbytes;
    }
    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(kMagic, 6);
    const std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& t : tensors_) {
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(float))));
    }
    if (!out) throw std::runtime_error("failed writing archive '" + path + "'");
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open archive '" + path + "'");
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0) {
      throw SchemaError("'" + path + "' is not a dermaudit tensor archive");
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw SchemaError("truncated archive header in '" + path + "'");
    const auto header = nlohmann::json::parse(header_str);
    TensorArchive arc;
    arc.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      const std::vector<std::int64_t> shape = entry.at("shape").get<std::vector<std::int64_t>>();
      Tensorf t(shape);
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(float))));
      if (!in) throw SchemaError("truncated tensor data in '" + path + "'");
      arc.put(entry.at("name").get<std::string>(), std::move(t));
    }
    return arc;
  }

  // Content fingerprint over names, shapes and payload bytes.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      h = fnv1a64(names_[i], h);
      for (auto d : tensors_[i].shape()) h = fnv1a64(&d, sizeof(d), h);
      h = fnv1a64(tensors_[i].data(),
                  static_cast<std::size_t>(tensors_[i].numel()) * sizeof(float), h);
    }
    return h;
  }

 private:
  static constexpr const char* kMagic = "DMTA1\n";
  std::vector<std::string> names_;
  std::vector<Tensorf> tensors_;
};

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash missing file '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    if (!in) break;
  }
  return h;
}

}  // namespace dermaudit
