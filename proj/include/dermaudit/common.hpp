// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dermaudit {

inline constexpr const char* kVersion = "0.1.0";

// Input data did not match the declared schema (missing column, bad header).
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

// A requested sample size cannot be satisfied by the available population.
class SizingError : public std::runtime_error {
 public:
  SizingError(const std::string& what, std::int64_t requested, std::int64_t available)
      : std::runtime_error(what), requested(requested), available(available) {}
  std::int64_t requested;
  std::int64_t available;
};

// An image file could not be decoded; carries the offending record id.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& what, std::string record_id)
      : std::runtime_error(what), record_id(std::move(record_id)) {}
  std::string record_id;
};

// Shape or precondition violation on an operation's inputs.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Training produced a non-finite loss; carries the global step index.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what), step(step) {}
  std::int64_t step;
};

// FNV-1a 64-bit. Used for config hashes, seed derivation and file fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Combines an integer seed with a textual tag into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t h = fnv1a64(&base, sizeof(base));
  return fnv1a64(tag, h);
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace dermaudit
