#include "btd/encoders.hpp"
#include "btd/errors.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace btd;
using btd::testing::random_tensor;
using btd::testing::values;

namespace {

struct Encoders {
	ParameterStore store;
	Rng rng{3};
	VisionEncoder vision;
	TextEncoder text;
	explicit Encoders(const ModelConfig& cfg)
	    : vision(ParamBuilder(store, rng, ParamGroup::encoder, "vision"), cfg),
	      text(ParamBuilder(store, rng, ParamGroup::encoder, "text"), cfg) {}
};

std::vector<int> sentence(const std::string& text, std::size_t n = 20) { return tokenize(text, Vocabulary::standard(), n); }

Tensor column(const Tensor& x, std::size_t j) { return slice(x, 1, j, 1); }

} // namespace

TEST(VisionEncoder, StageShapeLadder) {
	ModelConfig cfg;
	Encoders e(cfg);
	Frame f(e.store);
	Rng rng(1);
	Tensor x = e.vision.embed(f, random_tensor(rng, {3, 64, 64}, 0, 1));
	const Shape expect[] = {{32, 16, 16}, {64, 8, 8}, {128, 4, 4}, {256, 2, 2}};
	for (std::size_t i = 1; i <= 4; ++i) {
		x = e.vision.stage(f, i, x);
		EXPECT_EQ(x.shape(), expect[i - 1]);
		EXPECT_EQ(x.shape(), (Shape{cfg.stage_channels(i), cfg.stage_extent(i), cfg.stage_extent(i)}));
		for (double v : x.data()) ASSERT_TRUE(std::isfinite(v));
	}
}

TEST(VisionEncoder, ZeroImageGivesInputIndependentConstants) {
	ModelConfig cfg;
	Encoders e(cfg);
	auto run = [&] {
		Frame f(e.store);
		Tensor x = e.vision.embed(f, Tensor::zeros({3, 64, 64}));
		for (std::size_t i = 1; i <= 4; ++i) x = e.vision.stage(f, i, x);
		return values(x);
	};
	EXPECT_EQ(run(), run());
}

TEST(VisionEncoder, RejectsBadShapes) {
	ModelConfig cfg;
	Encoders e(cfg);
	Frame f(e.store);
	EXPECT_THROW(e.vision.embed(f, Tensor::zeros({3, 32, 32})), DimensionError);
	EXPECT_THROW(e.vision.stage(f, 2, Tensor::zeros({32, 5, 5})), ConfigError);
	EXPECT_THROW(e.vision.stage(f, 5, Tensor::zeros({32, 16, 16})), UsageError);
	ModelConfig bad = cfg;
	bad.image_size = 60;
	EXPECT_THROW(bad.validate(), ConfigError);
	bad = cfg;
	bad.heads = 3;
	EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TextEncoder, ShapeAtEveryStageAndPadAttentionIsZero) {
	ModelConfig cfg;
	Encoders e(cfg);
	Frame f(e.store);
	const auto tokens = sentence("the red square in the top left");
	const auto valid = token_validity(tokens);
	Tensor x = e.text.embed(f, tokens);
	for (std::size_t i = 1; i <= 4; ++i) {
		std::vector<Tensor> weights;
		x = e.text.stage(f, i, x, tokens, &weights);
		EXPECT_EQ(x.shape(), (Shape{cfg.d_model, cfg.n_tokens}));
		ASSERT_EQ(weights.size(), cfg.heads * cfg.text_layers_per_stage);
		for (const auto& w : weights)
			for (std::size_t q = 0; q < cfg.n_tokens; ++q) {
				double row = 0;
				for (std::size_t k = 0; k < cfg.n_tokens; ++k) {
					if (!valid[k]) EXPECT_EQ(w.at({q, k}), 0.0);
					row += w.at({q, k});
				}
				EXPECT_NEAR(row, 1.0, 1e-9);
			}
	}
}

TEST(TextEncoder, PermutationEquivariantWithoutPositions) {
	ModelConfig cfg;
	Encoders e(cfg);
	for (auto& v : e.store[e.text.position()].value.mutable_data()) v = 0.0;
	const auto tokens = sentence("red blue square");
	auto swapped = tokens;
	std::swap(swapped[1], swapped[3]);
	Frame f(e.store);
	Tensor a = e.text.encode(f, tokens);
	Tensor b = e.text.encode(f, swapped);
	const std::size_t perm[] = {0, 3, 2, 1};
	for (std::size_t j = 0; j < cfg.n_tokens; ++j) {
		const std::size_t pj = j < 4 ? perm[j] : j;
		auto ca = values(column(a, j)), cb = values(column(b, pj));
		for (std::size_t d = 0; d < ca.size(); ++d) EXPECT_NEAR(ca[d], cb[d], 1e-12) << "column " << j;
	}
}

TEST(TextEncoder, MaskedPassMatchesPlainEncodingForEmptySpan) {
	ModelConfig cfg;
	Encoders e(cfg);
	Frame f(e.store);
	const auto tokens = sentence("the small green circle");
	const auto masked = mask_key_object(tokens, {2, 2});
	EXPECT_EQ(values(e.text.encode(f, masked)), values(e.text.encode(f, tokens)));

	const auto real_mask = mask_key_object(tokens, {2, 5});
	Tensor lm = e.text.encode(f, real_mask);
	Tensor l0 = e.text.encode(f, tokens);
	EXPECT_EQ(lm.shape(), (Shape{cfg.d_model, cfg.n_tokens}));
	for (std::size_t j = 2; j < 5; ++j) EXPECT_NE(values(column(lm, j)), values(column(l0, j)));
}

TEST(TextEncoder, RejectsWrongTokenCount) {
	ModelConfig cfg;
	Encoders e(cfg);
	Frame f(e.store);
	EXPECT_THROW(e.text.embed(f, std::vector<int>(7, 1)), DimensionError);
}

TEST(Encoders, EveryParameterReceivesGradient) {
	ModelConfig cfg;
	cfg.gate_init = 0.1; // a zero gate scale would block the path through the gate convolutions
	for (const char* prefix : {"vision.", "text."}) {
		const auto dead = btd::testing::dead_parameters(cfg, prefix);
		EXPECT_TRUE(dead.empty()) << prefix << " first dead parameter: " << (dead.empty() ? "" : dead[0]);
	}
}

TEST(Encoders, UsedEmbeddingRowsReceiveGradient) {
	ModelConfig cfg;
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	const Sample s = generate_corpus(g)[0];
	Frame f(net.params());
	net.forward(f, ModelInput::from_sample(s)).losses.total.backward();
	auto grad = f.grad(net.text().table());
	for (int t : s.tokens) {
		bool any = false;
		for (std::size_t d = 0; d < cfg.d_model; ++d) any |= grad[static_cast<std::size_t>(t) * cfg.d_model + d] != 0.0;
		EXPECT_TRUE(any) << Vocabulary::standard().word(t);
	}
}
