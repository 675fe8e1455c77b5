#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gma {

/// 8-bit interleaved image, row-major.
struct Image8 {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> data;
};

/// round(clamp(x, 0, 1) * 255) per sample.
std::vector<std::uint8_t> quantize8(std::span<const double> values);
std::vector<double> dequantize8(std::span<const std::uint8_t> values);

/// Writes a gray (1) or RGB (3) PNG. Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const Image8& image);
std::vector<std::uint8_t> encode_png(const Image8& image);
/// Gray or RGB input; palette, 16-bit and alpha inputs are converted to 8-bit
/// gray or RGB. Throws IoError naming the path.
Image8 read_png(const std::filesystem::path& path);
Image8 decode_png(std::span<const std::uint8_t> bytes);

}  // namespace gma
