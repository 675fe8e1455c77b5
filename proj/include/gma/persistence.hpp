#pragma once

#include "gma/avatar.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gma {

/// GMA1 container: "GMA1", then chunks of (4-byte tag, u32 LE payload length,
/// payload), then the CRC32 (u32 LE) of every preceding byte.
///
/// META  UTF-8 JSON: body config, canonical params, constants, offset mode,
///       activations, fit metadata
/// FGEO  FTEX  u32 rows, u32 cols, rows * cols f32 LE, row-major
/// W_FC  W_FF  W_TC  W_TS  four such arrays each: w1, b1, w2, b2 (biases as n x 1)
///
/// Values are stored as 32-bit floats; a checkpoint that went through
/// quantize_to_float round-trips bit-exactly.
std::vector<std::uint8_t> serialize_checkpoint(const AvatarCheckpoint& ckpt);

/// Throws BadMagicError, ChecksumError, DimensionError or CheckpointError.
AvatarCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const AvatarCheckpoint& ckpt, const std::filesystem::path& path);
AvatarCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gma
