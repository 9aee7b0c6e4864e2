#include "btd/viz.hpp"

#include "btd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace btd {

PnmImage mask_to_pnm(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
	if (mask.size() != height * width) throw DimensionError("mask_to_pnm: mask size does not match extent");
	PnmImage img{1, width, height, std::vector<std::uint8_t>(mask.size())};
	for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
	return img;
}

PnmImage overlay(const std::vector<double>& planar_rgb, const std::vector<std::uint8_t>& mask, std::size_t height,
                 std::size_t width) {
	const std::size_t hw = height * width;
	if (planar_rgb.size() != 3 * hw || mask.size() != hw) throw DimensionError("overlay: image and mask disagree");
	std::vector<double> blended = planar_rgb;
	const double tint[3] = {1.0, 0.0, 0.0};
	for (std::size_t c = 0; c < 3; ++c)
		for (std::size_t i = 0; i < hw; ++i)
			if (mask[i]) blended[c * hw + i] = 0.5 * planar_rgb[c * hw + i] + 0.5 * tint[c];
	return to_pnm(blended, 3, height, width);
}

std::vector<std::string> dump_affinity_maps(const std::string& dir, const std::vector<BscTrace>& traces,
                                            const ModelConfig& config, TokenSpan span) {
	std::vector<std::size_t> stages;
	for (std::size_t i = 1; i <= 4; ++i)
		if (config.bsc_stages[i - 1]) stages.push_back(i);
	if (traces.size() != stages.size()) throw UsageError("dump_affinity_maps: one trace per enabled stage expected");
	std::filesystem::create_directories(dir);
	std::vector<std::string> written;
	for (std::size_t s = 0; s < traces.size(); ++s) {
		const std::size_t h = config.stage_extent(stages[s]);
		for (std::size_t b = 0; b < traces[s].vision_affinity.size(); ++b) {
			const Tensor& a = traces[s].vision_affinity[b]; // HW x N
			const std::size_t n = a.dim(1);
			auto d = a.data();
			std::size_t lo = span.first, hi = span.second;
			if (lo >= hi || hi > n) lo = 0, hi = 1;
			std::vector<double> mass(h * h, 0.0);
			for (std::size_t p = 0; p < h * h; ++p)
				for (std::size_t t = lo; t < hi; ++t) mass[p] += d[p * n + t];
			const auto [mn, mx] = std::minmax_element(mass.begin(), mass.end());
			const double range = *mx - *mn;
			PnmImage img{1, h, h, std::vector<std::uint8_t>(h * h)};
			for (std::size_t p = 0; p < h * h; ++p)
				img.pixels[p] = static_cast<std::uint8_t>(range > 0 ? std::lround(255.0 * (mass[p] - *mn) / range) : 0);
			const std::string path = (std::filesystem::path(dir) / ("stage" + std::to_string(stages[s]) + "_k" +
			                                                         std::to_string(config.k_vision.at(b)) + ".pgm"))
			                             .string();
			write_pnm(path, img);
			written.push_back(path);
		}
	}
	return written;
}

} // namespace btd
