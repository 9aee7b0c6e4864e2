#include "btd/image_io.hpp"

#include "btd/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace btd {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(const std::vector<std::uint8_t>& buf, std::size_t& pos) {
	for (;;) {
		while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
		if (pos < buf.size() && buf[pos] == '#') {
			while (pos < buf.size() && buf[pos] != '\n') ++pos;
			continue;
		}
		break;
	}
	std::string tok;
	while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok.push_back(static_cast<char>(buf[pos++]));
	return tok;
}

std::size_t parse_extent(const std::string& tok, const std::string& path, const char* what) {
	if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
		throw FormatError(path + ": bad " + what + " '" + tok + "'");
	return static_cast<std::size_t>(std::stoul(tok));
}

} // namespace

PnmImage read_pnm(const std::string& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw FormatError(path + ": cannot open");
	std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
	std::size_t pos = 0;
	const std::string magic = header_token(buf, pos);
	PnmImage img;
	if (magic == "P5")
		img.channels = 1;
	else if (magic == "P6")
		img.channels = 3;
	else
		throw FormatError(path + ": unsupported magic number '" + magic + "' (expected P5 or P6)");
	img.width = parse_extent(header_token(buf, pos), path, "width");
	img.height = parse_extent(header_token(buf, pos), path, "height");
	const std::size_t maxval = parse_extent(header_token(buf, pos), path, "maxval");
	if (maxval != 255) throw FormatError(path + ": maxval must be 255, got " + std::to_string(maxval));
	if (img.width == 0 || img.height == 0) throw FormatError(path + ": zero extent");
	if (pos >= buf.size() || !std::isspace(buf[pos])) throw FormatError(path + ": missing header terminator");
	++pos;
	const std::size_t need = img.channels * img.width * img.height;
	if (buf.size() - pos != need)
		throw FormatError(path + ": payload has " + std::to_string(buf.size() - pos) + " bytes, expected " +
		                  std::to_string(need));
	img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
	return img;
}

void write_pnm(const std::string& path, const PnmImage& image) {
	if (image.channels != 1 && image.channels != 3) throw UsageError("write_pnm: channels must be 1 or 3");
	if (image.pixels.size() != image.channels * image.width * image.height)
		throw UsageError("write_pnm: pixel buffer does not match extents");
	std::ofstream out(path, std::ios::binary);
	if (!out) throw FormatError(path + ": cannot write");
	out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
	out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
	if (!out) throw FormatError(path + ": write failed");
}

PnmImage to_pnm(const std::vector<double>& planar, std::size_t channels, std::size_t height, std::size_t width) {
	if (planar.size() != channels * height * width) throw UsageError("to_pnm: buffer does not match extents");
	PnmImage img{channels, width, height, std::vector<std::uint8_t>(planar.size())};
	for (std::size_t c = 0; c < channels; ++c)
		for (std::size_t i = 0; i < height * width; ++i) {
			const double v = std::clamp(planar[c * height * width + i], 0.0, 1.0);
			img.pixels[i * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
		}
	return img;
}

std::vector<double> from_pnm(const PnmImage& image) {
	const std::size_t plane = image.width * image.height;
	std::vector<double> out(image.channels * plane);
	for (std::size_t c = 0; c < image.channels; ++c)
		for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = image.pixels[i * image.channels + c] / 255.0;
	return out;
}

} // namespace btd
