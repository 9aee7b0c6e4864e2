#pragma once

// Target-background twin-stream decoder: multi-scale context integration
// over stages 2-4, the learnable background prompt built from masked-text
// features, and the joint foreground/background mask logits.

#include "btd/config.hpp"
#include "btd/nn.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace btd {

/// Foreground and background logit maps at image resolution (H x W).
struct MaskLogits {
	Tensor fg;
	Tensor bg;
};

struct MciTrace {
	std::vector<Tensor> segment_attention; // per iteration and head: S x S
};

/// Mean over the valid columns of x[D x N], binned as adaptive average
/// pooling over the compacted sequence. When fewer valid columns than bins
/// remain, bin j takes column floor(j * n_valid / r).
Tensor masked_adaptive_pool(const Tensor& x, const std::vector<bool>& valid, std::size_t r);

class Decoder {
public:
	Decoder(ParamBuilder pb, const ModelConfig& config);

	/// Flattened 1x1-projected stage 2-4 maps, concatenated along space: D x S.
	Tensor build_vcon(Frame& f, std::span<const Tensor> stages_2_to_4) const;

	/// T rounds of text<-vision then vision<-text cross-attention; returns (L*, V*).
	std::pair<Tensor, Tensor> mci(Frame& f, const Tensor& vcon, const Tensor& text, const std::vector<bool>& token_valid,
	                              MciTrace* trace = nullptr) const;
	/// One round; exposed so the iteration wiring can be checked.
	std::pair<Tensor, Tensor> mci_round(Frame& f, const Tensor& vision, const Tensor& text,
	                                    const std::vector<bool>& token_valid, MciTrace* trace = nullptr) const;

	/// Concat_r(pool_r(L_m)) + Delta: D x B.
	Tensor bg_prompt(Frame& f, const Tensor& masked_text, const std::vector<bool>& masked_valid) const;

	/// Pixel features V_pred (D x H_1 x W_1) from the stage-2 segment of V* and V'_1.
	Tensor pixel_features(Frame& f, const Tensor& v1, const Tensor& v_star) const;
	/// I_proj applied to the normalized V_pred: D x (H_1 W_1).
	Tensor project_pixels(Frame& f, const Tensor& v_pred) const;
	/// R_proj applied to a normalized prototype column: D x 1.
	Tensor project_prototype(Frame& f, const Tensor& prototype) const;
	/// Per-pixel dot product scaled by 1/sqrt(D), upsampled to image size: H x W.
	Tensor prototype_logits(const Tensor& projected_pixels, const Tensor& projected_prototype) const;

	MaskLogits predict(Frame& f, const Tensor& v1, const Tensor& v_star, const Tensor& l_star,
	                   const Tensor& bg_prompt) const;

	const std::vector<std::size_t>& segments() const { return segments_; }
	ParamId delta() const { return delta_; }

private:
	ModelConfig cfg_;
	std::vector<std::size_t> segments_;
	std::vector<Linear> phi_;
	LayerNorm l_norm_, l_ffn_norm_, v_norm_, v_ms_norm_;
	Attention l_cross_, v_cross_, v_msattn_;
	Mlp l_ffn_;
	Linear l_proj_, v_proj_;
	ParamId delta_ = 0;
	Linear v1_proj_;
	LayerNorm pixel_norm_, proto_norm_;
	Linear i_proj1_, i_proj2_, r_proj_;
};

struct TwinStreamLoss {
	Tensor fg;    // BCE(O_fg, G)
	Tensor bg;    // BCE(O_bg, 1 - G)
	Tensor total; // lambda * fg + (1 - lambda) * bg
};

/// Throws UsageError if gt is not binary or shapes differ. With
/// `use_bg == false` the total is the foreground term alone.
TwinStreamLoss twinstream_loss(const MaskLogits& logits, const Tensor& gt, double lambda, bool use_bg = true);

/// Pixel is foreground iff O_fg > O_bg; ties are background.
std::vector<std::uint8_t> infer_mask(const MaskLogits& logits);
std::vector<std::uint8_t> infer_mask(std::span<const double> fg, std::span<const double> bg);

} // namespace btd
