#pragma once

// Four-stage vision and text encoders. Each stage consumes the previous
// stage's (possibly cross-modally enhanced) output, so the fusion module can
// be interleaved between stages.

#include "btd/config.hpp"
#include "btd/nn.hpp"

#include <span>
#include <vector>

namespace btd {

struct StageFeatures {
	Tensor vision; // C_i x H_i x W_i
	Tensor text;   // D x N
	std::size_t stage = 1;
};

/// Which token positions are real words (anything but the pad id).
std::vector<bool> token_validity(std::span<const int> tokens);

class VisionEncoder {
public:
	VisionEncoder(ParamBuilder pb, const ModelConfig& config);

	/// image[3 x H x W] -> patch embedding plus absolute position, C_1 x H_1 x W_1.
	Tensor embed(Frame& f, const Tensor& image) const;
	/// Stage `i` (1-based). Stages 2-4 merge 2x2 patches first, doubling channels.
	Tensor stage(Frame& f, std::size_t i, const Tensor& input) const;

	ParamId position() const { return pos_; }

private:
	ModelConfig cfg_;
	Linear patch_embed_;
	ParamId pos_ = 0;
	std::vector<LayerNorm> merge_norm_;
	std::vector<Linear> merge_;
	std::vector<TransformerBlock> blocks_;
};

class TextEncoder {
public:
	TextEncoder(ParamBuilder pb, const ModelConfig& config);

	/// Token embedding plus learned positions, D x N.
	Tensor embed(Frame& f, std::span<const int> tokens) const;
	/// One text stage; pad keys are excluded from attention. `weights`
	/// receives the per-head attention matrices of every layer.
	Tensor stage(Frame& f, std::size_t i, const Tensor& input, std::span<const int> tokens,
	             std::vector<Tensor>* weights = nullptr) const;
	/// All four stages with no cross-modal injection.
	Tensor encode(Frame& f, std::span<const int> tokens) const;

	ParamId position() const { return pos_; }
	ParamId table() const { return table_; }

private:
	ModelConfig cfg_;
	ParamId table_ = 0;
	ParamId pos_ = 0;
	std::vector<std::vector<TransformerBlock>> layers_;
};

} // namespace btd
