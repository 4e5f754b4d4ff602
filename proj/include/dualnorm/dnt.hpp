#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

/// One named float32 array of arbitrary rank, as stored in a DNT1 file.
struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  static NamedArray from_tensor(std::string name, const Tensor& t);
  /// Rank-4 view; rank < 4 arrays are left-padded with 1s.
  Tensor to_tensor() const;
  bool operator==(const NamedArray&) const = default;
};

/// DNT1 layout (all integers little-endian):
///   "DNT1" | u32 count | count x { u32 name_len | name | u32 dtype (0 = f32) |
///   u32 rank | rank x u64 dim | row-major f32 payload }
std::vector<std::uint8_t> encode_dnt(const std::vector<NamedArray>& arrays);
/// Throws IntegrityError on bad magic, unknown dtype, truncation or trailing bytes.
std::vector<NamedArray> decode_dnt(const std::vector<std::uint8_t>& bytes);

void write_dnt(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_dnt(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
/// FNV-1a 64 of a byte string, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes);

}  // namespace dualnorm
