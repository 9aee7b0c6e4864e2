#pragma once

// Dual-modal object learning: rebuild the features of the unmasked
// expression from the masked-text features and the fused multimodal state.

#include "btd/config.hpp"
#include "btd/nn.hpp"

#include <vector>

namespace btd {

class Reconstructor {
public:
	Reconstructor(ParamBuilder pb, const ModelConfig& config);

	/// Inner fusion F = V* + CA(LN(V*), L*) over the S axis, pad tokens of L* masked.
	Tensor fuse(Frame& f, const Tensor& v_star, const Tensor& l_star, const std::vector<bool>& token_valid) const;
	/// L_rec from L_m (D x N) attending over F (D x S), followed by a feed-forward block.
	Tensor reconstruct(Frame& f, const Tensor& masked_text, const Tensor& v_star, const Tensor& l_star,
	                   const std::vector<bool>& token_valid) const;

private:
	ModelConfig cfg_;
	LayerNorm inner_norm_, outer_norm_, ffn_norm_;
	Attention inner_, outer_;
	Mlp ffn_;
};

/// Mean over tokens and channels of (L_rec - L_0)^2. The target is detached.
Tensor reconstruction_loss(const Tensor& reconstructed, const Tensor& target);

/// L_ce + eta * L_re.
Tensor total_loss(const Tensor& l_ce, const Tensor& l_re, double eta);

} // namespace btd
