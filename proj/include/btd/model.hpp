#pragma once

// The full network: interleaved vision/text encoders with per-stage
// bidirectional correlation, the twin-stream decoder and the reconstruction
// head, plus the loss assembly for one sample.

#include "btd/bsc.hpp"
#include "btd/config.hpp"
#include "btd/dmols.hpp"
#include "btd/encoders.hpp"
#include "btd/nn.hpp"
#include "btd/rng.hpp"
#include "btd/synthdata.hpp"
#include "btd/tbtd.hpp"

#include <cstdint>
#include <vector>

namespace btd {

struct ModelInput {
	Tensor image; // 3 x H x W
	std::vector<int> tokens;
	std::vector<int> masked_tokens;
	Tensor gt; // H x W in {0,1}; may be undefined for inference
	/// When defined, used as L_0 instead of encoding `tokens`. Holding it fixed
	/// is what the gradient stop means for a finite-difference check.
	Tensor reconstruction_target;

	static ModelInput from_sample(const Sample& sample);
};

struct Losses {
	Tensor fg, bg, ce, re, total;
};

struct ForwardResult {
	std::vector<Tensor> vision_stages; // V'_1..V'_4
	std::vector<Tensor> text_stages;   // L'_1..L'_4
	Tensor vcon;
	Tensor l_star, v_star;
	Tensor l_masked;   // L_m
	Tensor l_original; // L_0 before the gradient stop
	Tensor bg_prompt;  // L*_m
	Tensor l_rec;
	MaskLogits logits;
	Losses losses; // only when a ground truth was supplied
};

struct ForwardTrace {
	std::vector<BscTrace> bsc; // per enabled stage
	MciTrace mci;
};

class BtdNet {
public:
	/// Parameters are created in a fixed order from `config.seed`.
	explicit BtdNet(const ModelConfig& config);
	BtdNet(const BtdNet&) = delete;
	BtdNet& operator=(const BtdNet&) = delete;

	ForwardResult forward(Frame& f, const ModelInput& input, ForwardTrace* trace = nullptr) const;
	/// Inference-only pass: logits and the binary mask.
	std::vector<std::uint8_t> predict(const ModelInput& input, MaskLogits* logits = nullptr) const;

	const ModelConfig& config() const { return cfg_; }
	ParameterStore& params() { return store_; }
	const ParameterStore& params() const { return store_; }
	const VisionEncoder& vision() const { return vision_; }
	const TextEncoder& text() const { return text_; }
	const Bsc& bsc() const { return bsc_; }
	const Decoder& decoder() const { return decoder_; }
	const Reconstructor& reconstructor() const { return recon_; }

private:
	ModelConfig cfg_;
	ParameterStore store_;
	Rng init_rng_;
	VisionEncoder vision_;
	TextEncoder text_;
	Bsc bsc_;
	Decoder decoder_;
	Reconstructor recon_;
};

} // namespace btd
