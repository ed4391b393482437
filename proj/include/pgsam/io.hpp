#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "pgsam/data.hpp"
#include "pgsam/grid.hpp"

namespace pgsam::io {

// channels.bin layout, little-endian:
//   bytes 0-3   magic "MSEQ"
//   bytes 4-5   version (u16, currently 1)
//   bytes 6-7   channel count c (u16)
//   bytes 8-11  rows H (u32)
//   bytes 12-15 cols W (u32)
//   then c*H*W float32 values, channel-major then row-major.
inline constexpr std::uint16_t kChannelFileVersion = 1;
inline constexpr std::size_t kChannelHeaderBytes = 16;

void write_channels(const std::filesystem::path& path, const std::vector<Image>& channels);
std::vector<Image> read_channels(const std::filesystem::path& path);

/// 8-bit grayscale PNG; mask pixels are stored as {0,255}.
void write_mask_png(const std::filesystem::path& path, const BinaryGrid& mask);
BinaryGrid read_mask_png(const std::filesystem::path& path);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};
using RgbImage = Grid<Rgb>;
void write_rgb_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_rgb_png(const std::filesystem::path& path);

void write_report_json(const std::filesystem::path& path, const data::ExpertReport& report,
                       const std::string& slice_id);
data::ExpertReport read_report_json(const std::filesystem::path& path, std::string* slice_id = nullptr);

/// Little-endian float32 helpers shared by the weight formats.
void write_f32(std::ostream& os, const float* values, std::size_t n);
void read_f32(std::istream& is, float* values, std::size_t n);

}  // namespace pgsam::io
