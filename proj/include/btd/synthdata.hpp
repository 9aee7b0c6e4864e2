#pragma once

// Synthetic referring-segmentation corpus: rendered shape scenes, templated
// referring expressions with a recorded key-object span, tokenization and
// key-object masking, and PGM/PPM + JSON-lines persistence.

#include "btd/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace btd {

inline constexpr std::array<std::string_view, 4> kShapeNames{"square", "circle", "triangle", "bar"};
inline constexpr std::array<std::string_view, 8> kColorNames{"red",  "green",   "blue",  "yellow",
                                                             "cyan", "magenta", "white", "orange"};
inline constexpr std::array<std::string_view, 2> kSizeNames{"small", "large"};
inline constexpr std::array<std::string_view, 9> kCellNames{"top left", "top",    "top right",
                                                            "left",     "center", "right",
                                                            "bottom left", "bottom", "bottom right"};

class Vocabulary {
public:
	static constexpr int pad = 0;
	static constexpr int cls = 1;
	static constexpr int unk = 2;

	/// Fixed vocabulary covering every template word.
	static const Vocabulary& standard();

	explicit Vocabulary(const std::vector<std::string>& words);

	int id(std::string_view word) const;
	const std::string& word(int id) const;
	std::size_t size() const { return words_.size(); }

private:
	std::vector<std::string> words_;
	std::unordered_map<std::string, int> ids_;
};

/// [cls] followed by word ids, padded with pad / truncated to `length`.
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t length = 20);

using TokenSpan = std::pair<std::size_t, std::size_t>; // [begin, end)

/// Replaces positions in `span` with the pad id. Throws UsageError if the
/// span touches position 0 ([cls]) or runs past the end.
std::vector<int> mask_key_object(std::span<const int> tokens, TokenSpan span);

/// First run of attribute/shape words ending in a shape noun; the stand-in
/// for part-of-speech tagging when only a free-form expression is available.
TokenSpan find_key_object_span(std::span<const int> tokens, const Vocabulary& vocab);

struct SceneObject {
	int shape = 0; // index into kShapeNames; doubles as the category id
	int color = 0;
	int size = 0;
	int cell = 0; // 3x3 grid, row-major
	int jitter_x = 0;
	int jitter_y = 0;

	int row() const { return cell / 3; }
	int col() const { return cell % 3; }
};

struct SceneSpec {
	std::vector<SceneObject> objects;
	std::size_t distractors = 0;
	std::uint64_t seed = 0;
};

enum class Template { color_shape, size_color_shape, color_shape_position, shape_position, shape_relation };
enum class Relation { none, left_of, right_of, above, below };

/// Structured referring expression; `text` is its surface form.
struct Expression {
	Template kind = Template::color_shape;
	int shape = 0;
	std::optional<int> color;
	std::optional<int> size;
	std::optional<int> cell;
	Relation relation = Relation::none;
	std::optional<int> anchor_color;
	int anchor_shape = 0;
	std::string text;
	TokenSpan noun_words{0, 0}; // word indices of the referent phrase
};

/// Does object `index` of the scene satisfy the expression?
bool satisfies(const Expression& expr, const SceneSpec& scene, std::size_t index);
/// All objects satisfying the expression (brute force).
std::vector<std::size_t> referents(const Expression& expr, const SceneSpec& scene);

struct Sample {
	std::string id;
	std::size_t height = 0;
	std::size_t width = 0;
	std::vector<double> image; // 3 x H x W, values k/255
	std::string expression;
	std::vector<int> tokens;
	std::vector<int> masked_tokens;
	TokenSpan noun_span{0, 0};
	std::vector<std::uint8_t> gt_mask; // H x W, {0,1}
	int category = 0;

	Tensor image_tensor() const;
	Tensor mask_tensor() const;
	bool operator==(const Sample&) const = default;
};

struct GenConfig {
	std::size_t image_size = 64;
	std::size_t count = 32;
	std::uint64_t seed = 0;
	std::size_t n_tokens = 20;
	std::size_t max_distractors = 3;
	std::vector<Template> templates{Template::color_shape, Template::size_color_shape, Template::color_shape_position,
	                                Template::shape_position, Template::shape_relation};
};

/// One generated sample together with the scene and expression behind it.
struct GeneratedSample {
	Sample sample;
	SceneSpec scene;
	Expression expression;
	std::size_t target = 0;
};

/// Pure function of (config, index).
GeneratedSample generate_sample(const GenConfig& config, std::size_t index);
std::vector<Sample> generate_corpus(const GenConfig& config);

/// Footprint of one object in an image of the given size, H x W in {0,1}.
std::vector<std::uint8_t> render_footprint(const SceneObject& object, std::size_t image_size);

/// Writes images/, masks/ and index.jsonl (last) under `dir`.
void save_corpus(const std::string& dir, const std::vector<Sample>& samples);
/// Throws FormatError naming the offending file.
std::vector<Sample> load_corpus(const std::string& dir);

} // namespace btd
