#pragma once

// Binary named-array archive for one ParameterSet plus JSON metadata.
//
//   "SPCKPT01"  u64 meta_len  meta (UTF-8 JSON)
//   u64 count, then per entry:
//     u32 name_len  name  u32 ndim  i32 dims[ndim]  u64 numel  f64 values[numel]
//
// Integers and doubles are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "spinecobb/core.hpp"

namespace spinecobb {

struct CheckpointMeta {
  std::string config_hash;
  int stage = 0;
  int epoch = 0;
  std::uint64_t seed = 0;
  bool gate_active = false;
  nlohmann::json config;  // resolved run configuration
};

std::string encode_checkpoint(const ParameterSet& params, const CheckpointMeta& meta);
ParameterSet decode_checkpoint(std::string_view bytes, CheckpointMeta* meta = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const CheckpointMeta& meta);
ParameterSet load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace spinecobb
