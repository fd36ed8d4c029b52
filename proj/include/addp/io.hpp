#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace addp::io {

enum class Dtype { kF32, kF64 };

/// An n-dimensional array as read from or written to disk. Values are always
/// held as double in memory; `dtype` is the on-disk element type.
struct NdArray {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  Dtype dtype = Dtype::kF64;

  std::size_t numel() const;
};

/// NumPy .npy (format 1.0, little-endian, C order).
void write_npy(const std::filesystem::path& path, const NdArray& arr);
NdArray read_npy(const std::filesystem::path& path);

std::string encode_npy(const NdArray& arr);
NdArray decode_npy(const std::string& bytes);

/// Single-file archive of named arrays plus a JSON metadata document.
///
/// Layout: "ADDPARC1", u64 header length, JSON header, then the npy-encoded
/// arrays back to back. The header lists every array as
/// {"name", "offset", "size", "meta"} and carries the caller's metadata under "meta".
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> order;
  std::map<std::string, NdArray> arrays;
  std::map<std::string, nlohmann::json> array_meta;

  void put(const std::string& name, NdArray arr, nlohmann::json meta_for_array = nullptr);
  const NdArray& get(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& ar);
Archive read_archive(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// FNV-1a 64-bit digest, used for config hashes and checksums in reports.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

}  // namespace addp::io
