#pragma once

#include "btd/bsc.hpp"
#include "btd/config.hpp"
#include "btd/image_io.hpp"
#include "btd/synthdata.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace btd {

/// Binary mask as a P5 image with values {0, 255}.
PnmImage mask_to_pnm(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);

/// Predicted mask blended in red at 50% over a planar [0,1] RGB image.
PnmImage overlay(const std::vector<double>& planar_rgb, const std::vector<std::uint8_t>& mask, std::size_t height,
                 std::size_t width);

/// One PGM per (enabled stage, k): each pixel's vision-path affinity mass on
/// the token span [span.first, span.second), min-max scaled to 0..255. An
/// empty span falls back to the [cls] column. Returns the written paths.
std::vector<std::string> dump_affinity_maps(const std::string& dir, const std::vector<BscTrace>& traces,
                                            const ModelConfig& config, TokenSpan span);

} // namespace btd
