#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imask/tensor.hpp"

namespace imask {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Binary layout (all integers little-endian):
//   "IMASKCKP"  u32 version  u32 record_count
//   per record: u32 name_len, name bytes, u32 rank, u64 extents[rank],
//               f64 values[prod(extents)] (IEEE-754 binary64, little-endian)
inline constexpr std::string_view kCheckpointMagic = "IMASKCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(std::span<const NamedTensor> records);
std::vector<NamedTensor> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies values from `source` into the identically named tensors of `target`.
/// Every target name must be present with the same shape; extra source records
/// are ignored only when allow_extra is set. Mismatches raise ArchitectureError.
void assign_state(std::span<NamedTensor> target, std::span<const NamedTensor> source,
                  bool allow_extra = false);

}  // namespace imask
