#include "btd/encoders.hpp"

#include "btd/errors.hpp"

namespace btd {

std::vector<bool> token_validity(std::span<const int> tokens) {
	std::vector<bool> valid(tokens.size());
	for (std::size_t i = 0; i < tokens.size(); ++i) valid[i] = tokens[i] != 0;
	return valid;
}

namespace {

Tensor padding_mask(std::span<const int> tokens) {
	return key_padding_mask(tokens.size(), token_validity(tokens));
}

} // namespace

VisionEncoder::VisionEncoder(ParamBuilder pb, const ModelConfig& config) : cfg_(config) {
	const std::size_t p = cfg_.patch_size;
	const std::size_t h1 = cfg_.stage_extent(1);
	patch_embed_ = Linear::make(pb, "patch_embed", 3 * p * p, cfg_.c1);
	pos_ = pb.normal("pos_embed", {cfg_.c1, h1 * h1}, 0.02, false);
	for (std::size_t i = 1; i <= 4; ++i) {
		const std::size_t c = cfg_.stage_channels(i);
		ParamBuilder sp = pb.sub("stage" + std::to_string(i));
		if (i > 1) {
			merge_norm_.push_back(LayerNorm::make(sp, "merge_norm", 2 * c));
			merge_.push_back(Linear::make(sp, "merge", 2 * c, c));
		}
		blocks_.push_back(TransformerBlock::make(sp, "block", c, cfg_.heads, c * cfg_.mlp_ratio));
	}
}

Tensor VisionEncoder::embed(Frame& f, const Tensor& image) const {
	if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
		throw DimensionError("vision encoder: expected image [3x" + std::to_string(cfg_.image_size) + "x" +
		                     std::to_string(cfg_.image_size) + "], got " + to_string(image.shape()));
	const std::size_t h1 = cfg_.stage_extent(1);
	Tensor patches = reshape(space_to_depth(image, cfg_.patch_size), {3 * cfg_.patch_size * cfg_.patch_size, h1 * h1});
	Tensor tokens = add(patch_embed_(f, patches), f[pos_]);
	return reshape(tokens, {cfg_.c1, h1, h1});
}

Tensor VisionEncoder::stage(Frame& f, std::size_t i, const Tensor& input) const {
	if (i < 1 || i > 4) throw UsageError("vision encoder: stage must be 1..4");
	const std::size_t c = cfg_.stage_channels(i);
	const std::size_t h = cfg_.stage_extent(i);
	Tensor x;
	if (i == 1) {
		if (input.shape() != Shape{c, h, h}) throw DimensionError("vision stage 1: bad input " + to_string(input.shape()));
		x = reshape(input, {c, h * h});
	} else {
		const std::size_t prev_c = cfg_.stage_channels(i - 1);
		if (input.rank() != 3 || input.dim(0) != prev_c)
			throw DimensionError("vision stage " + std::to_string(i) + ": bad input " + to_string(input.shape()));
		if (input.dim(1) % 2 != 0 || input.dim(2) % 2 != 0)
			throw ConfigError("vision stage " + std::to_string(i) + ": extent " + to_string(input.shape()) +
			                  " not divisible by 2 for patch merging");
		Tensor merged = reshape(space_to_depth(input, 2), {4 * prev_c, h * h});
		x = merge_[i - 2](f, merge_norm_[i - 2](f, merged));
	}
	x = blocks_[i - 1](f, x);
	return reshape(x, {c, h, h});
}

TextEncoder::TextEncoder(ParamBuilder pb, const ModelConfig& config) : cfg_(config) {
	const std::size_t d = cfg_.d_model;
	table_ = pb.normal("token_embed", {cfg_.resolved_vocab_size(), d}, 1.0, false);
	pos_ = pb.normal("pos_embed", {d, cfg_.n_tokens}, 0.02, false);
	for (std::size_t i = 1; i <= 4; ++i) {
		ParamBuilder sp = pb.sub("stage" + std::to_string(i));
		std::vector<TransformerBlock> stage;
		for (std::size_t l = 0; l < cfg_.text_layers_per_stage; ++l)
			stage.push_back(TransformerBlock::make(sp, "layer" + std::to_string(l), d, cfg_.heads, d * cfg_.mlp_ratio));
		layers_.push_back(std::move(stage));
	}
}

Tensor TextEncoder::embed(Frame& f, std::span<const int> tokens) const {
	if (tokens.size() != cfg_.n_tokens)
		throw DimensionError("text encoder: expected " + std::to_string(cfg_.n_tokens) + " tokens, got " +
		                     std::to_string(tokens.size()));
	return add(embedding(f[table_], tokens), f[pos_]);
}

Tensor TextEncoder::stage(Frame& f, std::size_t i, const Tensor& input, std::span<const int> tokens,
                          std::vector<Tensor>* weights) const {
	if (i < 1 || i > 4) throw UsageError("text encoder: stage must be 1..4");
	if (input.shape() != Shape{cfg_.d_model, cfg_.n_tokens})
		throw DimensionError("text stage " + std::to_string(i) + ": bad input " + to_string(input.shape()));
	const Tensor mask = padding_mask(tokens);
	Tensor x = input;
	for (const auto& layer : layers_[i - 1]) x = layer(f, x, &mask, weights);
	return x;
}

Tensor TextEncoder::encode(Frame& f, std::span<const int> tokens) const {
	Tensor x = embed(f, tokens);
	for (std::size_t i = 1; i <= 4; ++i) x = stage(f, i, x, tokens);
	return x;
}

} // namespace btd
