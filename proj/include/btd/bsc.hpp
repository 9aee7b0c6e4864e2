#pragma once

// Bidirectional spatial correlation: per-stage exchange between the vision
// map V_i and the text matrix L_i through multi-receptive-field local
// affinities, followed by a gated residual injection into each modality.
//
// Vision side, for every window k in k_vision:
//   P^k = unfold2d(V_i, k) W^k + b^k                      (H_i W_i) x D
//   A^k = softmax_rows(P^k L_i / sqrt(D)), pad tokens -> 0  (H_i W_i) x N
//   T^k = A^k L_i^T                                       (H_i W_i) x D
//   T   = sum_k softmax(alpha)_k T^k
//   V'_i = Gate_v(T) * V_i + V_i
// Text side mirrors it with unfold1d(L_i, k) against the flattened,
// channel-projected vision map, mixed by softmax(beta), gated into L_i.
// Gate = 1x1 conv -> instance norm -> learnable scale (starts at gate_init).

#include "btd/config.hpp"
#include "btd/nn.hpp"

#include <utility>
#include <vector>

namespace btd {

struct BscStageParams {
	std::vector<Linear> vision_proj; // per k_vision: k^2 C_i -> D
	std::vector<Linear> text_proj;   // per k_text: k D -> D
	ParamId alpha = 0;               // [|k_vision|]
	ParamId beta = 0;                // [|k_text|]
	Linear pixel_proj;               // C_i -> D
	Linear vision_gate;              // D -> C_i
	Linear text_gate;                // D -> D
	ParamId vision_gate_scale = 0;   // [1]
	ParamId text_gate_scale = 0;     // [1]
};

/// Intermediate values exposed for inspection and heat-map dumps.
struct BscTrace {
	std::vector<Tensor> vision_affinity; // per k: (H W) x N
	std::vector<Tensor> text_affinity;   // per k: N x (H W)
	Tensor vision_context;               // T, (H W) x D
	Tensor text_context;                 // U, N x D
};

class Bsc {
public:
	Bsc(ParamBuilder pb, const ModelConfig& config);

	/// (V_i, L_i) -> (V'_i, L'_i). `token_valid` marks non-pad tokens.
	std::pair<Tensor, Tensor> forward(Frame& f, std::size_t stage, const Tensor& vision, const Tensor& text,
	                                  const std::vector<bool>& token_valid, BscTrace* trace = nullptr) const;

	const BscStageParams& stage(std::size_t i) const { return stages_.at(i - 1); }

private:
	ModelConfig cfg_;
	std::vector<BscStageParams> stages_;
};

} // namespace btd
