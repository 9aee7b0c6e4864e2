#include "btd/tbtd.hpp"

#include "btd/errors.hpp"

#include <cmath>

namespace btd {

Tensor masked_adaptive_pool(const Tensor& x, const std::vector<bool>& valid, std::size_t r) {
	if (x.rank() != 2 || x.dim(1) != valid.size())
		throw DimensionError("masked_adaptive_pool: " + to_string(x.shape()) + " with " + std::to_string(valid.size()) +
		                     " validity flags");
	std::vector<std::size_t> cols;
	for (std::size_t i = 0; i < valid.size(); ++i)
		if (valid[i]) cols.push_back(i);
	if (cols.empty()) throw UsageError("masked_adaptive_pool: no valid columns");
	if (r == 0) throw ConfigError("masked_adaptive_pool: bins must be >= 1");
	Tensor compact = gather_columns(x, cols);
	if (r <= cols.size()) return adaptive_avg_pool1d(compact, r);
	std::vector<std::size_t> pick(r);
	for (std::size_t j = 0; j < r; ++j) pick[j] = j * cols.size() / r;
	return gather_columns(compact, pick);
}

Decoder::Decoder(ParamBuilder pb, const ModelConfig& config) : cfg_(config) {
	const std::size_t d = cfg_.d_model;
	for (std::size_t i = 2; i <= 4; ++i) {
		const std::size_t h = cfg_.stage_extent(i);
		segments_.push_back(h * h);
		phi_.push_back(Linear::make(pb, "phi" + std::to_string(i), cfg_.stage_channels(i), d));
	}
	ParamBuilder mci = pb.sub("mci");
	l_norm_ = LayerNorm::make(mci, "text_norm", d);
	l_cross_ = Attention::make(mci, "text_cross", d, d, d, cfg_.heads);
	l_ffn_norm_ = LayerNorm::make(mci, "text_ffn_norm", d);
	l_ffn_ = Mlp::make(mci, "text_ffn", d, d * cfg_.mlp_ratio);
	l_proj_ = Linear::make(mci, "text_proj", d, d);
	v_norm_ = LayerNorm::make(mci, "vision_norm", d);
	v_cross_ = Attention::make(mci, "vision_cross", d, d, d, cfg_.heads);
	v_ms_norm_ = LayerNorm::make(mci, "vision_ms_norm", d);
	v_msattn_ = Attention::make(mci, "vision_msattn", d, d, d, cfg_.heads);
	v_proj_ = Linear::make(mci, "vision_proj", d, d);

	ParamBuilder pred = pb.sub("predictor");
	delta_ = pred.normal("delta", {d, cfg_.bg_tokens()}, 0.02, false);
	v1_proj_ = Linear::make(pred, "v1_proj", cfg_.c1, d);
	pixel_norm_ = LayerNorm::make(pred, "pixel_norm", d);
	proto_norm_ = LayerNorm::make(pred, "proto_norm", d);
	i_proj1_ = Linear::make(pred, "i_proj1", d, d);
	i_proj2_ = Linear::make(pred, "i_proj2", d, d);
	r_proj_ = Linear::make(pred, "r_proj", d, d);
}

Tensor Decoder::build_vcon(Frame& f, std::span<const Tensor> stages) const {
	if (stages.size() != 3) throw UsageError("build_vcon: expects the stage 2, 3 and 4 maps");
	std::vector<Tensor> flat;
	for (std::size_t s = 0; s < 3; ++s) {
		const Tensor& v = stages[s];
		const std::size_t c = cfg_.stage_channels(s + 2);
		const std::size_t h = cfg_.stage_extent(s + 2);
		if (v.shape() != Shape{c, h, h})
			throw DimensionError("build_vcon: stage " + std::to_string(s + 2) + " map has shape " + to_string(v.shape()));
		flat.push_back(phi_[s](f, reshape(v, {c, h * h})));
	}
	return concat(flat, 1);
}

std::pair<Tensor, Tensor> Decoder::mci_round(Frame& f, const Tensor& vision, const Tensor& text,
                                             const std::vector<bool>& token_valid, MciTrace* trace) const {
	// Text queries gather multi-scale visual context.
	Tensor lq = l_norm_(f, text);
	Tensor l = add(text, l_cross_(f, lq, vision));
	l = add(l, l_ffn_(f, l_ffn_norm_(f, l)));
	Tensor l_star = l_proj_(f, l);

	// Visual queries read the updated text, then attend within each scale.
	const std::size_t s_len = vision.dim(1);
	const Tensor pad = key_padding_mask(s_len, token_valid);
	Tensor v = add(vision, v_cross_(f, v_norm_(f, vision), l_star, &pad));
	const Tensor block = block_diagonal_mask(segments_);
	Tensor vn = v_ms_norm_(f, v);
	v = add(v, v_msattn_(f, vn, vn, &block, trace ? &trace->segment_attention : nullptr));
	Tensor v_star = v_proj_(f, v);
	return {l_star, v_star};
}

std::pair<Tensor, Tensor> Decoder::mci(Frame& f, const Tensor& vcon, const Tensor& text,
                                       const std::vector<bool>& token_valid, MciTrace* trace) const {
	if (cfg_.mci_iters < 1) throw ConfigError("mci: iteration count must be >= 1");
	if (vcon.rank() != 2 || vcon.dim(0) != cfg_.d_model)
		throw DimensionError("mci: V_con has shape " + to_string(vcon.shape()));
	if (text.rank() != 2 || text.dim(0) != cfg_.d_model || text.dim(1) != token_valid.size())
		throw DimensionError("mci: text has shape " + to_string(text.shape()));
	Tensor l = text, v = vcon;
	for (std::size_t t = 0; t < cfg_.mci_iters; ++t) std::tie(l, v) = mci_round(f, v, l, token_valid, trace);
	return {l, v};
}

Tensor Decoder::bg_prompt(Frame& f, const Tensor& masked_text, const std::vector<bool>& masked_valid) const {
	if (cfg_.bg_tokens() != f.store()[delta_].value.dim(1))
		throw ConfigError("bg_prompt: pooled token count does not match Delta");
	std::vector<Tensor> pooled;
	for (auto r : cfg_.bg_pool) pooled.push_back(masked_adaptive_pool(masked_text, masked_valid, r));
	Tensor cat = pooled.size() == 1 ? pooled[0] : concat(pooled, 1);
	return add(cat, f[delta_]);
}

Tensor Decoder::pixel_features(Frame& f, const Tensor& v1, const Tensor& v_star) const {
	const std::size_t d = cfg_.d_model;
	const std::size_t h1 = cfg_.stage_extent(1), h2 = cfg_.stage_extent(2);
	if (v1.shape() != Shape{cfg_.c1, h1, h1}) throw DimensionError("predict: V'_1 has shape " + to_string(v1.shape()));
	Tensor seg2 = reshape(slice(v_star, 1, 0, h2 * h2), {d, h2, h2});
	Tensor up = bilinear_resize(seg2, h1, h1);
	return add(up, conv1x1(v1, f[v1_proj_.w], f[v1_proj_.b]));
}

Tensor Decoder::project_pixels(Frame& f, const Tensor& v_pred) const {
	const std::size_t d = cfg_.d_model;
	Tensor flat = reshape(v_pred, {d, v_pred.numel() / d});
	return i_proj2_(f, gelu(i_proj1_(f, pixel_norm_(f, flat))));
}

Tensor Decoder::project_prototype(Frame& f, const Tensor& prototype) const {
	return r_proj_(f, proto_norm_(f, prototype));
}

Tensor Decoder::prototype_logits(const Tensor& pixels, const Tensor& proto) const {
	const std::size_t h1 = cfg_.stage_extent(1);
	const double temperature = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
	Tensor low = reshape(scale(matmul(transpose(proto), pixels), temperature), {1, h1, h1});
	return reshape(bilinear_resize(low, cfg_.image_size, cfg_.image_size), {cfg_.image_size, cfg_.image_size});
}

MaskLogits Decoder::predict(Frame& f, const Tensor& v1, const Tensor& v_star, const Tensor& l_star,
                            const Tensor& bg_prompt) const {
	Tensor pixels = project_pixels(f, pixel_features(f, v1, v_star));
	Tensor l_fg = slice(l_star, 1, 0, 1); // [cls]
	MaskLogits out;
	out.fg = prototype_logits(pixels, project_prototype(f, l_fg));
	if (cfg_.use_bg_branch) {
		Tensor l_bg = mean_columns(bg_prompt);
		out.bg = prototype_logits(pixels, project_prototype(f, l_bg));
	} else {
		out.bg = Tensor::zeros({cfg_.image_size, cfg_.image_size});
	}
	return out;
}

TwinStreamLoss twinstream_loss(const MaskLogits& logits, const Tensor& gt, double lambda, bool use_bg) {
	if (gt.shape() != logits.fg.shape() || gt.shape() != logits.bg.shape())
		throw DimensionError("twinstream_loss: ground truth " + to_string(gt.shape()) + " vs logits " +
		                     to_string(logits.fg.shape()));
	std::vector<double> complement(gt.numel());
	auto g = gt.data();
	for (std::size_t i = 0; i < g.size(); ++i) {
		if (g[i] != 0.0 && g[i] != 1.0) throw UsageError("twinstream_loss: ground truth must be binary");
		complement[i] = 1.0 - g[i];
	}
	TwinStreamLoss loss;
	loss.fg = bce_with_logits(logits.fg, gt);
	loss.bg = bce_with_logits(logits.bg, Tensor(gt.shape(), std::move(complement)));
	loss.total = use_bg ? add(scale(loss.fg, lambda), scale(loss.bg, 1.0 - lambda)) : loss.fg;
	return loss;
}

std::vector<std::uint8_t> infer_mask(std::span<const double> fg, std::span<const double> bg) {
	if (fg.size() != bg.size()) throw DimensionError("infer_mask: logit maps differ in size");
	std::vector<std::uint8_t> out(fg.size());
	for (std::size_t i = 0; i < fg.size(); ++i) out[i] = fg[i] > bg[i] ? 1 : 0;
	return out;
}

std::vector<std::uint8_t> infer_mask(const MaskLogits& logits) { return infer_mask(logits.fg.data(), logits.bg.data()); }

} // namespace btd
