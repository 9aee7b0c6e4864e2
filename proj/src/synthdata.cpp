#include "btd/synthdata.hpp"

#include "btd/errors.hpp"
#include "btd/image_io.hpp"
#include "btd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace btd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary and tokens

Vocabulary::Vocabulary(const std::vector<std::string>& words) : words_(words) {
	for (std::size_t i = 0; i < words_.size(); ++i)
		if (!ids_.emplace(words_[i], static_cast<int>(i)).second) throw UsageError("duplicate vocabulary word " + words_[i]);
}

const Vocabulary& Vocabulary::standard() {
	static const Vocabulary vocab = [] {
		std::vector<std::string> w{"[pad]", "[cls]", "[unk]", "the", "in", "of", "left", "right", "above", "below",
		                           "top",   "bottom", "center"};
		for (auto c : kColorNames) w.emplace_back(c);
		for (auto s : kSizeNames) w.emplace_back(s);
		for (auto s : kShapeNames) w.emplace_back(s);
		return Vocabulary(w);
	}();
	return vocab;
}

int Vocabulary::id(std::string_view word) const {
	auto it = ids_.find(std::string(word));
	return it == ids_.end() ? unk : it->second;
}

const std::string& Vocabulary::word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t length) {
	std::vector<int> ids(length, Vocabulary::pad);
	if (length == 0) return ids;
	ids[0] = Vocabulary::cls;
	std::istringstream words{std::string(text)};
	std::string w;
	std::size_t pos = 1;
	while (pos < length && words >> w) ids[pos++] = vocab.id(w);
	return ids;
}

std::vector<int> mask_key_object(std::span<const int> tokens, TokenSpan span) {
	if (span.first > span.second || span.second > tokens.size())
		throw UsageError("mask_key_object: span [" + std::to_string(span.first) + ", " + std::to_string(span.second) +
		                 ") outside sequence of length " + std::to_string(tokens.size()));
	if (span.first < span.second && span.first == 0) throw UsageError("mask_key_object: span may not cover [cls]");
	std::vector<int> out(tokens.begin(), tokens.end());
	for (std::size_t i = span.first; i < span.second; ++i) out[i] = Vocabulary::pad;
	return out;
}

TokenSpan find_key_object_span(std::span<const int> tokens, const Vocabulary& vocab) {
	auto in_list = [&](int id, auto const& names) {
		for (auto n : names)
			if (vocab.id(n) == id) return true;
		return false;
	};
	auto is_shape = [&](int id) { return in_list(id, kShapeNames); };
	auto is_modifier = [&](int id) { return in_list(id, kColorNames) || in_list(id, kSizeNames); };
	for (std::size_t i = 1; i < tokens.size(); ++i) {
		if (!is_shape(tokens[i]) && !is_modifier(tokens[i])) continue;
		std::size_t j = i;
		while (j < tokens.size() && is_modifier(tokens[j])) ++j;
		if (j < tokens.size() && is_shape(tokens[j])) return {i, j + 1};
		i = j;
	}
	return {0, 0};
}

// ---------------------------------------------------------------------------
// Expressions

namespace {

bool relation_holds(Relation rel, const SceneObject& a, const SceneObject& b) {
	switch (rel) {
	case Relation::left_of: return a.col() < b.col();
	case Relation::right_of: return a.col() > b.col();
	case Relation::above: return a.row() < b.row();
	case Relation::below: return a.row() > b.row();
	case Relation::none: return true;
	}
	return false;
}

std::string_view relation_words(Relation rel) {
	switch (rel) {
	case Relation::left_of: return "left of";
	case Relation::right_of: return "right of";
	case Relation::above: return "above";
	case Relation::below: return "below";
	case Relation::none: break;
	}
	return "";
}

} // namespace

bool satisfies(const Expression& expr, const SceneSpec& scene, std::size_t index) {
	const SceneObject& o = scene.objects.at(index);
	if (o.shape != expr.shape) return false;
	if (expr.color && o.color != *expr.color) return false;
	if (expr.size && o.size != *expr.size) return false;
	if (expr.cell && o.cell != *expr.cell) return false;
	if (expr.relation == Relation::none) return true;
	for (std::size_t j = 0; j < scene.objects.size(); ++j) {
		if (j == index) continue;
		const SceneObject& a = scene.objects[j];
		if (a.shape != expr.anchor_shape) continue;
		if (expr.anchor_color && a.color != *expr.anchor_color) continue;
		if (relation_holds(expr.relation, o, a)) return true;
	}
	return false;
}

std::vector<std::size_t> referents(const Expression& expr, const SceneSpec& scene) {
	std::vector<std::size_t> out;
	for (std::size_t i = 0; i < scene.objects.size(); ++i)
		if (satisfies(expr, scene, i)) out.push_back(i);
	return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

constexpr std::array<std::array<double, 3>, 8> kColorRgb{{{0.90, 0.10, 0.10},
                                                          {0.10, 0.80, 0.20},
                                                          {0.15, 0.25, 0.95},
                                                          {0.95, 0.90, 0.10},
                                                          {0.10, 0.85, 0.90},
                                                          {0.85, 0.15, 0.85},
                                                          {0.97, 0.97, 0.97},
                                                          {1.00, 0.55, 0.05}}};
constexpr std::array<double, 3> kGround{0.30, 0.32, 0.28};

double object_extent(const SceneObject& o, std::size_t image_size) {
	const double frac = o.size == 0 ? 0.19 : 0.28;
	return std::round(frac * static_cast<double>(image_size));
}

double quantize(double v) { return static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0; }

} // namespace

std::vector<std::uint8_t> render_footprint(const SceneObject& o, std::size_t image_size) {
	const double cell = static_cast<double>(image_size) / 3.0;
	const double cx = (o.col() + 0.5) * cell + o.jitter_x;
	const double cy = (o.row() + 0.5) * cell + o.jitter_y;
	const double half = object_extent(o, image_size) / 2.0;
	std::vector<std::uint8_t> m(image_size * image_size, 0);
	for (std::size_t y = 0; y < image_size; ++y)
		for (std::size_t x = 0; x < image_size; ++x) {
			const double dx = static_cast<double>(x) + 0.5 - cx;
			const double dy = static_cast<double>(y) + 0.5 - cy;
			bool in = false;
			switch (o.shape) {
			case 0: in = dx >= -half && dx < half && dy >= -half && dy < half; break;
			case 1: in = dx * dx + dy * dy < half * half; break;
			case 2: in = dy >= -half && dy < half && std::abs(dx) <= (dy + half) / 2.0; break;
			case 3: in = dx >= -half && dx < half && dy >= -half / 3.0 && dy < half / 3.0; break;
			default: break;
			}
			m[y * image_size + x] = in ? 1 : 0;
		}
	return m;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

SceneObject random_object(Rng& rng, int shape, std::size_t image_size) {
	SceneObject o;
	o.shape = shape;
	o.color = static_cast<int>(rng.index(kColorNames.size()));
	o.size = static_cast<int>(rng.index(kSizeNames.size()));
	const int j = static_cast<int>(image_size / 64);
	o.jitter_x = j ? static_cast<int>(rng.index(2 * j + 1)) - j : 0;
	o.jitter_y = j ? static_cast<int>(rng.index(2 * j + 1)) - j : 0;
	return o;
}

Expression describe(Template kind, const SceneSpec& scene, std::size_t target, Rng& rng) {
	const SceneObject& t = scene.objects[target];
	Expression e;
	e.kind = kind;
	e.shape = t.shape;
	const std::string shape{kShapeNames[t.shape]};
	const std::string color{kColorNames[t.color]};
	switch (kind) {
	case Template::color_shape:
		e.color = t.color;
		e.text = "the " + color + " " + shape;
		e.noun_words = {1, 3};
		break;
	case Template::size_color_shape:
		e.color = t.color;
		e.size = t.size;
		e.text = "the " + std::string(kSizeNames[t.size]) + " " + color + " " + shape;
		e.noun_words = {1, 4};
		break;
	case Template::color_shape_position:
		e.color = t.color;
		e.cell = t.cell;
		e.text = "the " + color + " " + shape + " in the " + std::string(kCellNames[t.cell]);
		e.noun_words = {1, 3};
		break;
	case Template::shape_position:
		e.cell = t.cell;
		e.text = "the " + shape + " in the " + std::string(kCellNames[t.cell]);
		e.noun_words = {1, 2};
		break;
	case Template::shape_relation: {
		std::size_t anchor = rng.index(scene.objects.size() - 1);
		if (anchor >= target) ++anchor;
		const SceneObject& a = scene.objects[anchor];
		std::vector<Relation> options;
		for (Relation r : {Relation::left_of, Relation::right_of, Relation::above, Relation::below})
			if (relation_holds(r, t, a)) options.push_back(r);
		e.relation = options[rng.index(options.size())];
		e.anchor_color = a.color;
		e.anchor_shape = a.shape;
		e.text = "the " + shape + " " + std::string(relation_words(e.relation)) + " the " +
		         std::string(kColorNames[a.color]) + " " + std::string(kShapeNames[a.shape]);
		e.noun_words = {1, 2};
		break;
	}
	}
	return e;
}

} // namespace

GeneratedSample generate_sample(const GenConfig& config, std::size_t index) {
	if (config.image_size < 16) throw ConfigError("generate: image_size must be >= 16");
	if (config.templates.empty()) throw ConfigError("generate: no templates enabled");
	if (config.max_distractors < 1 || config.max_distractors > 8) throw ConfigError("generate: max_distractors in [1, 8]");
	Rng rng(config.seed, index);
	const std::size_t size = config.image_size;
	const int target_shape = static_cast<int>(index % kShapeNames.size());

	GeneratedSample out;
	for (int attempt = 0;; ++attempt) {
		if (attempt == 10000) throw UsageError("generate: could not build an unambiguous scene");
		SceneSpec scene;
		scene.seed = config.seed;
		scene.distractors = 1 + rng.index(config.max_distractors);
		std::array<int, 9> cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
		rng.shuffle(cells.begin(), cells.end());
		scene.objects.push_back(random_object(rng, target_shape, size));
		for (std::size_t d = 0; d < scene.distractors; ++d) {
			// Distractors often share an attribute with the target so that
			// expressions must combine cues.
			int shape = rng.uniform() < 0.5 ? target_shape : static_cast<int>(rng.index(kShapeNames.size()));
			SceneObject o = random_object(rng, shape, size);
			if (rng.uniform() < 0.5) o.color = scene.objects[0].color;
			scene.objects.push_back(o);
		}
		for (std::size_t i = 0; i < scene.objects.size(); ++i) scene.objects[i].cell = cells[i];

		const Template kind = config.templates[rng.index(config.templates.size())];
		Expression expr = describe(kind, scene, 0, rng);
		const auto who = referents(expr, scene);
		if (who.size() != 1 || who[0] != 0) continue;

		std::vector<std::vector<std::uint8_t>> feet;
		bool empty = false;
		for (const auto& o : scene.objects) {
			feet.push_back(render_footprint(o, size));
			if (std::none_of(feet.back().begin(), feet.back().end(), [](auto v) { return v != 0; })) empty = true;
		}
		if (empty) continue;

		Sample& s = out.sample;
		char id[64];
		std::snprintf(id, sizeof id, "s%llu_%05zu", static_cast<unsigned long long>(config.seed), index);
		s.id = id;
		s.height = s.width = size;
		s.image.assign(3 * size * size, 0.0);
		for (std::size_t c = 0; c < 3; ++c)
			for (std::size_t i = 0; i < size * size; ++i)
				s.image[c * size * size + i] = kGround[c] + rng.uniform(-0.06, 0.06);
		for (std::size_t k = 0; k < scene.objects.size(); ++k) {
			const auto& rgb = kColorRgb[static_cast<std::size_t>(scene.objects[k].color)];
			for (std::size_t i = 0; i < size * size; ++i)
				if (feet[k][i])
					for (std::size_t c = 0; c < 3; ++c) s.image[c * size * size + i] = rgb[c] + rng.uniform(-0.04, 0.04);
		}
		for (auto& v : s.image) v = quantize(v);
		s.gt_mask = feet[0];
		s.expression = expr.text;
		s.tokens = tokenize(expr.text, Vocabulary::standard(), config.n_tokens);
		const std::size_t n = config.n_tokens;
		s.noun_span = {std::min(expr.noun_words.first + 1, n), std::min(expr.noun_words.second + 1, n)};
		s.masked_tokens = mask_key_object(s.tokens, s.noun_span);
		s.category = target_shape;
		out.scene = std::move(scene);
		out.expression = std::move(expr);
		out.target = 0;
		return out;
	}
}

std::vector<Sample> generate_corpus(const GenConfig& config) {
	std::vector<Sample> out;
	out.reserve(config.count);
	for (std::size_t i = 0; i < config.count; ++i) out.push_back(generate_sample(config, i).sample);
	return out;
}

Tensor Sample::image_tensor() const { return Tensor({3, height, width}, image); }

Tensor Sample::mask_tensor() const {
	std::vector<double> v(gt_mask.begin(), gt_mask.end());
	return Tensor({height, width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Persistence

void save_corpus(const std::string& dir, const std::vector<Sample>& samples) {
	const fs::path root(dir);
	fs::create_directories(root / "images");
	fs::create_directories(root / "masks");
	std::ostringstream index;
	for (const auto& s : samples) {
		const std::string image_rel = "images/" + s.id + ".ppm";
		const std::string mask_rel = "masks/" + s.id + ".pgm";
		write_pnm((root / image_rel).string(), to_pnm(s.image, 3, s.height, s.width));
		PnmImage mask{1, s.width, s.height, std::vector<std::uint8_t>(s.gt_mask.size())};
		for (std::size_t i = 0; i < s.gt_mask.size(); ++i) mask.pixels[i] = s.gt_mask[i] ? 255 : 0;
		write_pnm((root / mask_rel).string(), mask);
		json line;
		line["id"] = s.id;
		line["expression"] = s.expression;
		line["tokens"] = s.tokens;
		line["masked_tokens"] = s.masked_tokens;
		line["noun_span"] = {s.noun_span.first, s.noun_span.second};
		line["category"] = s.category;
		line["image_path"] = image_rel;
		line["mask_path"] = mask_rel;
		index << line.dump() << '\n';
	}
	std::ofstream out(root / "index.jsonl", std::ios::binary);
	if (!out) throw FormatError((root / "index.jsonl").string() + ": cannot write");
	out << index.str();
}

std::vector<Sample> load_corpus(const std::string& dir) {
	const fs::path root(dir);
	const fs::path index_path = root / "index.jsonl";
	std::ifstream in(index_path);
	if (!in) throw FormatError(index_path.string() + ": cannot open");
	std::vector<Sample> out;
	std::string text;
	std::size_t line_no = 0;
	while (std::getline(in, text)) {
		++line_no;
		if (text.empty()) continue;
		const std::string where = index_path.string() + ":" + std::to_string(line_no);
		Sample s;
		std::string image_rel, mask_rel;
		try {
			json line = json::parse(text);
			s.id = line.at("id").get<std::string>();
			s.expression = line.at("expression").get<std::string>();
			s.tokens = line.at("tokens").get<std::vector<int>>();
			s.masked_tokens = line.at("masked_tokens").get<std::vector<int>>();
			auto span = line.at("noun_span").get<std::vector<std::size_t>>();
			if (span.size() != 2) throw FormatError(where + ": noun_span must have two entries");
			s.noun_span = {span[0], span[1]};
			s.category = line.at("category").get<int>();
			image_rel = line.at("image_path").get<std::string>();
			mask_rel = line.at("mask_path").get<std::string>();
		} catch (const json::exception& e) {
			throw FormatError(where + ": " + e.what());
		}
		if (s.tokens.size() != s.masked_tokens.size() || s.tokens.empty())
			throw FormatError(where + ": token and masked-token lengths differ");
		const std::string image_path = (root / image_rel).string();
		const std::string mask_path = (root / mask_rel).string();
		PnmImage image = read_pnm(image_path);
		if (image.channels != 3) throw FormatError(image_path + ": expected an RGB (P6) image");
		PnmImage mask = read_pnm(mask_path);
		if (mask.channels != 1) throw FormatError(mask_path + ": expected a greyscale (P5) mask");
		if (mask.width != image.width || mask.height != image.height)
			throw FormatError(mask_path + ": size does not match " + image_path);
		if (!out.empty() && (image.width != out.front().width || image.height != out.front().height))
			throw FormatError(image_path + ": size differs from the rest of the corpus");
		s.width = image.width;
		s.height = image.height;
		s.image = from_pnm(image);
		s.gt_mask.resize(mask.pixels.size());
		for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
			if (mask.pixels[i] != 0 && mask.pixels[i] != 255) throw FormatError(mask_path + ": mask pixels must be 0 or 255");
			s.gt_mask[i] = mask.pixels[i] ? 1 : 0;
		}
		out.push_back(std::move(s));
	}
	return out;
}

} // namespace btd
