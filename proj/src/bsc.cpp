#include "btd/bsc.hpp"

#include "btd/errors.hpp"

#include <cmath>

namespace btd {

Bsc::Bsc(ParamBuilder pb, const ModelConfig& config) : cfg_(config) {
	const std::size_t d = cfg_.d_model;
	for (std::size_t i = 1; i <= 4; ++i) {
		const std::size_t c = cfg_.stage_channels(i);
		ParamBuilder sp = pb.sub("stage" + std::to_string(i));
		BscStageParams s;
		for (auto k : cfg_.k_vision) s.vision_proj.push_back(Linear::make(sp, "vision_proj.k" + std::to_string(k), k * k * c, d));
		for (auto k : cfg_.k_text) s.text_proj.push_back(Linear::make(sp, "text_proj.k" + std::to_string(k), k * d, d));
		s.alpha = sp.constant("alpha", {cfg_.k_vision.size()}, 1.0 / static_cast<double>(cfg_.k_vision.size()));
		s.beta = sp.constant("beta", {cfg_.k_text.size()}, 1.0 / static_cast<double>(cfg_.k_text.size()));
		s.pixel_proj = Linear::make(sp, "pixel_proj", c, d);
		s.vision_gate = Linear::make(sp, "vision_gate", d, c);
		s.text_gate = Linear::make(sp, "text_gate", d, d);
		s.vision_gate_scale = sp.constant("vision_gate.scale", {1}, cfg_.gate_init);
		s.text_gate_scale = sp.constant("text_gate.scale", {1}, cfg_.gate_init);
		stages_.push_back(std::move(s));
	}
}

namespace {

// sum_k w_k * branch_k where w = softmax(logits).
Tensor mix(const Tensor& logits, const std::vector<Tensor>& branches) {
	Tensor w = softmax(logits, 0);
	Tensor acc;
	for (std::size_t k = 0; k < branches.size(); ++k) {
		Tensor term = mul_scalar(branches[k], slice(w, 0, k, 1));
		acc = k == 0 ? term : add(acc, term);
	}
	return acc;
}

// conv1x1 -> instance norm over positions -> learnable scale. x is D x P.
Tensor gate(Frame& f, const Linear& conv, ParamId scale_id, const Tensor& x) {
	return mul_scalar(instance_norm(conv(f, x)), f[scale_id]);
}

} // namespace

std::pair<Tensor, Tensor> Bsc::forward(Frame& f, std::size_t stage_index, const Tensor& vision, const Tensor& text,
                                       const std::vector<bool>& token_valid, BscTrace* trace) const {
	const BscStageParams& s = stage(stage_index);
	const std::size_t d = cfg_.d_model;
	const std::size_t c = cfg_.stage_channels(stage_index);
	if (vision.rank() != 3 || vision.dim(0) != c)
		throw DimensionError("bsc stage " + std::to_string(stage_index) + ": vision input " + to_string(vision.shape()));
	if (text.rank() != 2 || text.dim(0) != d || text.dim(1) != token_valid.size())
		throw DimensionError("bsc stage " + std::to_string(stage_index) + ": text input " + to_string(text.shape()));
	const std::size_t h = vision.dim(1), w = vision.dim(2), hw = h * w;
	const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

	// Vision-oriented path: every pixel's local window attends over tokens.
	const Tensor pad_mask = key_padding_mask(hw, token_valid);
	const Tensor text_t = transpose(text); // N x D
	std::vector<Tensor> v_branches;
	for (std::size_t b = 0; b < cfg_.k_vision.size(); ++b) {
		const Linear& proj = s.vision_proj[b];
		Tensor local = unfold2d(vision, cfg_.k_vision[b]);                    // HW x k^2 C
		Tensor p = add_row_vector(matmul(local, transpose(f[proj.w])), f[proj.b]); // HW x D
		Tensor affinity = softmax(add(scale(matmul(p, text), inv_sqrt_d), pad_mask), 1);
		if (trace) trace->vision_affinity.push_back(affinity);
		v_branches.push_back(matmul(affinity, text_t)); // HW x D
	}
	Tensor t_ctx = mix(f[s.alpha], v_branches);
	Tensor v_gate = reshape(gate(f, s.vision_gate, s.vision_gate_scale, transpose(t_ctx)), {c, h, w});
	Tensor v_out = add(mul(v_gate, vision), vision);

	// Text-oriented path: every token's local window attends over pixels.
	Tensor v_flat = s.pixel_proj(f, reshape(vision, {c, hw})); // D x HW
	Tensor v_flat_t = transpose(v_flat);                        // HW x D
	std::vector<Tensor> l_branches;
	for (std::size_t b = 0; b < cfg_.k_text.size(); ++b) {
		const Linear& proj = s.text_proj[b];
		Tensor local = unfold1d(text, cfg_.k_text[b]);                        // N x kD
		Tensor p = add_row_vector(matmul(local, transpose(f[proj.w])), f[proj.b]); // N x D
		Tensor affinity = softmax(scale(matmul(p, v_flat), inv_sqrt_d), 1);  // N x HW
		if (trace) trace->text_affinity.push_back(affinity);
		l_branches.push_back(matmul(affinity, v_flat_t)); // N x D
	}
	Tensor u_ctx = mix(f[s.beta], l_branches);
	Tensor l_gate = gate(f, s.text_gate, s.text_gate_scale, transpose(u_ctx)); // D x N
	Tensor l_out = add(mul(l_gate, text), text);

	if (trace) {
		trace->vision_context = t_ctx;
		trace->text_context = u_ctx;
	}
	return {v_out, l_out};
}

} // namespace btd
