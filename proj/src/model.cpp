#include "btd/model.hpp"

#include "btd/errors.hpp"

namespace btd {

ModelInput ModelInput::from_sample(const Sample& sample) {
	return ModelInput{sample.image_tensor(), sample.tokens, sample.masked_tokens, sample.mask_tensor(), Tensor()};
}

namespace {

const ModelConfig& validated(const ModelConfig& config) {
	config.validate();
	return config;
}

} // namespace

BtdNet::BtdNet(const ModelConfig& config)
    : cfg_(validated(config)), init_rng_(cfg_.seed),
      vision_(ParamBuilder(store_, init_rng_, ParamGroup::encoder, "vision"), cfg_),
      text_(ParamBuilder(store_, init_rng_, ParamGroup::encoder, "text"), cfg_),
      bsc_(ParamBuilder(store_, init_rng_, ParamGroup::other, "bsc"), cfg_),
      decoder_(ParamBuilder(store_, init_rng_, ParamGroup::other, "decoder"), cfg_),
      recon_(ParamBuilder(store_, init_rng_, ParamGroup::other, "dmols"), cfg_) {}

ForwardResult BtdNet::forward(Frame& f, const ModelInput& in, ForwardTrace* trace) const {
	if (in.tokens.size() != cfg_.n_tokens || in.masked_tokens.size() != cfg_.n_tokens)
		throw DimensionError("forward: token sequences must have length " + std::to_string(cfg_.n_tokens));
	const std::vector<bool> valid = token_validity(in.tokens);
	const std::vector<bool> masked_valid = token_validity(in.masked_tokens);

	ForwardResult r;
	Tensor v = vision_.embed(f, in.image);
	Tensor l = text_.embed(f, in.tokens);
	for (std::size_t i = 1; i <= 4; ++i) {
		v = vision_.stage(f, i, v);
		l = text_.stage(f, i, l, in.tokens);
		if (cfg_.bsc_stages[i - 1]) {
			BscTrace* bt = nullptr;
			if (trace) bt = &trace->bsc.emplace_back();
			std::tie(v, l) = bsc_.forward(f, i, v, l, valid, bt);
		}
		r.vision_stages.push_back(v);
		r.text_stages.push_back(l);
	}

	r.vcon = decoder_.build_vcon(f, std::span<const Tensor>(r.vision_stages).subspan(1, 3));
	std::tie(r.l_star, r.v_star) = decoder_.mci(f, r.vcon, r.text_stages[3], valid, trace ? &trace->mci : nullptr);

	r.l_masked = text_.encode(f, in.masked_tokens);
	r.bg_prompt = decoder_.bg_prompt(f, r.l_masked, masked_valid);
	r.logits = decoder_.predict(f, r.vision_stages[0], r.v_star, r.l_star, r.bg_prompt);

	if (!in.gt.defined()) return r;
	r.l_original = in.reconstruction_target.defined() ? in.reconstruction_target : text_.encode(f, in.tokens);
	r.l_rec = recon_.reconstruct(f, r.l_masked, r.v_star, r.l_star, valid);

	TwinStreamLoss ce = twinstream_loss(r.logits, in.gt, cfg_.lambda, cfg_.use_bg_branch);
	r.losses.fg = ce.fg;
	r.losses.bg = ce.bg;
	r.losses.ce = ce.total;
	r.losses.re = reconstruction_loss(r.l_rec, r.l_original);
	r.losses.total = total_loss(r.losses.ce, r.losses.re, cfg_.eta);
	return r;
}

std::vector<std::uint8_t> BtdNet::predict(const ModelInput& input, MaskLogits* logits) const {
	Frame f(store_);
	ModelInput in = input;
	in.gt = Tensor();
	ForwardResult r = forward(f, in);
	if (logits) *logits = r.logits;
	return infer_mask(r.logits);
}

} // namespace btd
