#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "rvit/model.hpp"

// Single-file weight container:
//   "RVIT" | u32 version | u32 json length | json {"model": ..., "meta": ...}
//   then per tensor, in declaration order:
//   u32 name length | name | u32 rank | u64 extents[rank] | f64 values
// Everything little-endian.
namespace rvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Params params;
  nlohmann::json meta;

  Network network() const { return Network(config, params); }
};

std::string encode_checkpoint(const Network& net, const nlohmann::json& meta = nlohmann::json::object());
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::string& path, const Network& net,
                      const nlohmann::json& meta = nlohmann::json::object());
Checkpoint read_checkpoint(const std::string& path);

}  // namespace rvit
