#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcmae/trainer.hpp"

namespace lcmae {

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Binary layout: "LCMAE1", u8 version, u32 record count, records, u32 CRC32
/// of everything before it. A record is u16 name length, name, u8 kind
/// (0 = f64 tensor, 1 = text, 2 = u64), the kind's payload (tensor: u8 rank,
/// u64 extents, little-endian f64 values; text: u64 length, bytes; u64: 8
/// bytes), then the CRC32 of the record's preceding bytes. All integers are
/// little-endian.
struct Checkpoint {
    TrainConfig config;
    std::uint64_t epoch = 0;
    ModelState state;
    AdamW optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const TrainConfig& config, std::uint64_t epoch, ModelState& state,
                                            const AdamW& optimizer);
/// Parses and verifies the whole buffer before building any state.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const TrainConfig& config, std::uint64_t epoch, ModelState& state,
                     const AdamW& optimizer);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lcmae
