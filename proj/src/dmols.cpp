#include "btd/dmols.hpp"

#include "btd/errors.hpp"

namespace btd {

Reconstructor::Reconstructor(ParamBuilder pb, const ModelConfig& config) : cfg_(config) {
	const std::size_t d = cfg_.d_model;
	inner_norm_ = LayerNorm::make(pb, "inner_norm", d);
	inner_ = Attention::make(pb, "inner", d, d, d, cfg_.heads);
	outer_norm_ = LayerNorm::make(pb, "outer_norm", d);
	outer_ = Attention::make(pb, "outer", d, d, d, cfg_.heads);
	ffn_norm_ = LayerNorm::make(pb, "ffn_norm", d);
	ffn_ = Mlp::make(pb, "ffn", d, d * cfg_.mlp_ratio);
}

Tensor Reconstructor::fuse(Frame& f, const Tensor& v_star, const Tensor& l_star,
                           const std::vector<bool>& token_valid) const {
	const std::size_t d = cfg_.d_model;
	if (v_star.rank() != 2 || v_star.dim(0) != d) throw DimensionError("dmols: V* has shape " + to_string(v_star.shape()));
	if (l_star.rank() != 2 || l_star.dim(0) != d || l_star.dim(1) != token_valid.size())
		throw DimensionError("dmols: L* has shape " + to_string(l_star.shape()));
	const Tensor pad = key_padding_mask(v_star.dim(1), token_valid);
	return add(v_star, inner_(f, inner_norm_(f, v_star), l_star, &pad));
}

Tensor Reconstructor::reconstruct(Frame& f, const Tensor& masked_text, const Tensor& v_star, const Tensor& l_star,
                                  const std::vector<bool>& token_valid) const {
	if (masked_text.shape() != l_star.shape())
		throw DimensionError("dmols: L_m has shape " + to_string(masked_text.shape()) + ", L* has " +
		                     to_string(l_star.shape()));
	Tensor fused = fuse(f, v_star, l_star, token_valid);
	Tensor r = add(masked_text, outer_(f, outer_norm_(f, masked_text), fused));
	return add(r, ffn_(f, ffn_norm_(f, r)));
}

Tensor reconstruction_loss(const Tensor& reconstructed, const Tensor& target) {
	if (reconstructed.shape() != target.shape())
		throw DimensionError("reconstruction_loss: " + to_string(reconstructed.shape()) + " vs " +
		                     to_string(target.shape()));
	return mse(reconstructed, stop_gradient(target));
}

Tensor total_loss(const Tensor& l_ce, const Tensor& l_re, double eta) { return add(l_ce, scale(l_re, eta)); }

} // namespace btd
