#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "m2fn/fusion.hpp"

namespace m2fn {

// Binary parameter checkpoint, little-endian:
//   "M2FNCKPT" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   | u64 count | count x (u32 name_len | name | u32 rank | u64 dims[rank]
//   | f64 values[prod(dims)]) | u64 FNV-1a of all preceding bytes
// Values are stored as raw IEEE-754 doubles, so a save/load cycle is
// bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string metadata;  // free-form JSON, e.g. the model config
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                     const std::string& metadata);
std::string encode_checkpoint(const NamedTensors& tensors, const std::string& metadata);

// Throws DataError on bad magic, version, checksum or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(const std::string& bytes);

// Copies checkpoint values into `targets` in place. Every target path must be
// present with an identical shape, and the checkpoint may not carry extras.
void restore_tensors(const Checkpoint& checkpoint, NamedTensors& targets);

}  // namespace m2fn
