#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lqseg/tensor.hpp"

namespace lqseg {

// On-disk layout (integers little-endian):
//   [4B magic "LQSG"][u16 version][u64 header_len][header JSON][payload]
// The header carries {config, iteration, opt_step, tensors: {name -> {shape,
// offset, length, crc32}}}; offsets are relative to the payload start and the
// payload holds each tensor as f32 row-major.
inline constexpr char kCheckpointMagic[4] = {'L', 'Q', 'S', 'G'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json config;
  std::int64_t iteration = 0;
  std::int64_t opt_step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);

// Validates magic, version, directory extents and per-tensor CRCs; throws
// ParseError carrying the byte offset of the first inconsistency.
CheckpointData load_checkpoint(const std::string& path);

// Rounds a tensor's payload through f32, in place. Training applies this at
// every checkpoint write so a resumed run continues from exactly the state a
// fresh process would load.
void round_to_f32(Tensor& t);

}  // namespace lqseg
