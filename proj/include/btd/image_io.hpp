#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace btd {

/// 8-bit binary PNM raster: P5 (grey, 1 channel) or P6 (RGB, 3 channels),
/// pixels interleaved row-major as stored on disk.
struct PnmImage {
	std::size_t channels = 0;
	std::size_t width = 0;
	std::size_t height = 0;
	std::vector<std::uint8_t> pixels;

	bool operator==(const PnmImage&) const = default;
};

/// Throws FormatError naming `path` on any malformed header or short payload.
PnmImage read_pnm(const std::string& path);
void write_pnm(const std::string& path, const PnmImage& image);

/// Planar [0,1] image (C x H x W) <-> interleaved bytes.
PnmImage to_pnm(const std::vector<double>& planar, std::size_t channels, std::size_t height, std::size_t width);
std::vector<double> from_pnm(const PnmImage& image);

} // namespace btd
