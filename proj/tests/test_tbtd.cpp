#include "btd/errors.hpp"
#include "btd/tbtd.hpp"
#include "btd/train.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace btd;
using namespace btd::testing;

namespace {

struct DecoderFixture {
	ModelConfig cfg;
	ParameterStore store;
	Rng rng{17};
	Decoder dec;
	explicit DecoderFixture(const ModelConfig& c) : cfg(c), dec(ParamBuilder(store, rng, ParamGroup::other, "decoder"), c) {}

	std::vector<Tensor> stage_maps(Rng& r) const {
		std::vector<Tensor> maps;
		for (std::size_t i = 2; i <= 4; ++i)
			maps.push_back(random_tensor(r, {cfg.stage_channels(i), cfg.stage_extent(i), cfg.stage_extent(i)}));
		return maps;
	}
};

std::vector<bool> first_valid(std::size_t n, std::size_t valid) {
	std::vector<bool> v(n, false);
	for (std::size_t i = 0; i < valid; ++i) v[i] = true;
	return v;
}

MaskLogits logits_2x2(std::vector<double> fg, std::vector<double> bg) {
	return {Tensor({2, 2}, std::move(fg)), Tensor({2, 2}, std::move(bg))};
}

double bce(double x, double t) {
	const double p = 1.0 / (1.0 + std::exp(-x));
	return -(t * std::log(p) + (1 - t) * std::log(1 - p));
}

} // namespace

TEST(BuildVcon, ShapeAndLosslessSegments) {
	DecoderFixture fx{ModelConfig{}};
	Rng r(1);
	auto maps = fx.stage_maps(r);
	Frame f(fx.store);
	Tensor vcon = fx.dec.build_vcon(f, maps);
	EXPECT_EQ(vcon.shape(), (Shape{64, 84}));
	EXPECT_EQ(fx.dec.segments(), (std::vector<std::size_t>{64, 16, 4}));

	// Stage 2 has C_2 = D; with phi2 set to the identity the segment is the input itself.
	auto w = fx.store[*fx.store.find("decoder.phi2.weight")].value.mutable_data();
	std::fill(w.begin(), w.end(), 0.0);
	for (std::size_t i = 0; i < 64; ++i) w[i * 64 + i] = 1.0;
	Frame g(fx.store);
	Tensor seg = reshape(slice(fx.dec.build_vcon(g, maps), 1, 0, 64), {64, 8, 8});
	EXPECT_EQ(values(seg), values(maps[0]));

	std::size_t offset = 0;
	for (std::size_t s = 0; s < 3; ++s) {
		const std::size_t h = fx.cfg.stage_extent(s + 2);
		Tensor piece = slice(vcon, 1, offset, h * h);
		Tensor expect = hand_linear(fx.store, "decoder.phi" + std::to_string(s + 2),
		                            reshape(maps[s], {fx.cfg.stage_channels(s + 2), h * h}));
		offset += h * h;
		EXPECT_EQ(reshape(reshape(piece, {64, h, h}), {64, h * h}).shape(), piece.shape());
		if (s > 0) expect_close(piece, expect, 1e-12, "segment " + std::to_string(s));
	}
	Frame bad(fx.store);
	EXPECT_THROW(fx.dec.build_vcon(bad, std::span<const Tensor>(maps).subspan(0, 2)), UsageError);
	maps[1] = Tensor::zeros({128, 3, 3});
	EXPECT_THROW(fx.dec.build_vcon(bad, maps), DimensionError);
}

TEST(Mci, SingleIterationMatchesHandComposition) {
	ModelConfig cfg;
	cfg.mci_iters = 1;
	DecoderFixture fx(cfg);
	Rng r(2);
	Tensor vcon = random_tensor(r, {64, 84});
	Tensor text = random_tensor(r, {64, 20});
	const auto valid = first_valid(20, 6);
	Frame f(fx.store);
	auto [l_star, v_star] = fx.dec.mci(f, vcon, text, valid);

	const ParameterStore& s = fx.store;
	const std::string p = "decoder.mci.";
	Tensor l = add(text, hand_attention(s, p + "text_cross", cfg.heads, hand_layer_norm(s, p + "text_norm", text), vcon));
	l = add(l, hand_mlp(s, p + "text_ffn", hand_layer_norm(s, p + "text_ffn_norm", l)));
	Tensor l_expect = hand_linear(s, p + "text_proj", l);
	Tensor pad = key_padding_mask(84, valid);
	Tensor v = add(vcon, hand_attention(s, p + "vision_cross", cfg.heads, hand_layer_norm(s, p + "vision_norm", vcon),
	                                    l_expect, &pad));
	const std::size_t seg[] = {64, 16, 4};
	Tensor block = block_diagonal_mask(seg);
	Tensor vn = hand_layer_norm(s, p + "vision_ms_norm", v);
	v = add(v, hand_attention(s, p + "vision_msattn", cfg.heads, vn, vn, &block));
	Tensor v_expect = hand_linear(s, p + "vision_proj", v);

	EXPECT_EQ(l_star.shape(), (Shape{64, 20}));
	EXPECT_EQ(v_star.shape(), (Shape{64, 84}));
	expect_close(l_star, l_expect, 1e-12, "L*");
	expect_close(v_star, v_expect, 1e-12, "V*");
}

TEST(Mci, IterationsChainRoundsAndRejectZero) {
	ModelConfig cfg;
	cfg.mci_iters = 3;
	DecoderFixture fx(cfg);
	Rng r(3);
	Tensor vcon = random_tensor(r, {64, 84});
	Tensor text = random_tensor(r, {64, 20});
	const auto valid = first_valid(20, 4);
	Frame f(fx.store);
	auto [l3, v3] = fx.dec.mci(f, vcon, text, valid);
	Tensor l = text, v = vcon;
	for (int t = 0; t < 3; ++t) std::tie(l, v) = fx.dec.mci_round(f, v, l, valid);
	EXPECT_EQ(values(l3), values(l));
	EXPECT_EQ(values(v3), values(v));

	ModelConfig zero = cfg;
	zero.mci_iters = 0;
	EXPECT_THROW(zero.validate(), ConfigError);
	DecoderFixture fz(zero);
	Frame g(fz.store);
	EXPECT_THROW(fz.dec.mci(g, vcon, text, valid), ConfigError);
}

TEST(Mci, CrossSegmentAttentionIsExactlyZero) {
	ModelConfig cfg;
	DecoderFixture fx(cfg);
	Rng r(4);
	Frame f(fx.store);
	MciTrace trace;
	fx.dec.mci(f, random_tensor(r, {64, 84}), random_tensor(r, {64, 20}), first_valid(20, 5), &trace);
	ASSERT_EQ(trace.segment_attention.size(), cfg.mci_iters * cfg.heads);
	std::vector<std::size_t> seg_of;
	for (std::size_t s = 0; s < 3; ++s) seg_of.insert(seg_of.end(), fx.dec.segments()[s], s);
	for (const auto& a : trace.segment_attention)
		for (std::size_t i = 0; i < 84; ++i) {
			double row = 0;
			for (std::size_t j = 0; j < 84; ++j) {
				if (seg_of[i] != seg_of[j]) ASSERT_EQ(a.at({i, j}), 0.0);
				row += a.at({i, j});
			}
			EXPECT_NEAR(row, 1.0, 1e-9);
		}
}

TEST(BgPrompt, HandPoolingAndPadExclusion) {
	Tensor l({2, 4}, {1, 2, 3, 4, 10, 20, 30, 40});
	const std::vector<bool> all(4, true);
	EXPECT_EQ(values(masked_adaptive_pool(l, all, 1)), (std::vector<double>{2.5, 25}));
	EXPECT_EQ(values(masked_adaptive_pool(l, all, 4)), values(l));
	const std::vector<bool> holes{true, true, false, true};
	auto pooled = values(masked_adaptive_pool(l, holes, 1));
	EXPECT_NEAR(pooled[0], 7.0 / 3.0, 1e-15);
	EXPECT_NEAR(pooled[1], 70.0 / 3.0, 1e-13);
	// More bins than valid columns: bin j takes column floor(j * n / r).
	EXPECT_EQ(values(masked_adaptive_pool(l, holes, 4)), (std::vector<double>{1, 1, 2, 4, 10, 10, 20, 40}));
	EXPECT_THROW(masked_adaptive_pool(l, std::vector<bool>(4, false), 1), UsageError);
	EXPECT_THROW(masked_adaptive_pool(l, all, 0), ConfigError);
}

TEST(BgPrompt, DefaultBinsAndIdentityPooling) {
	ModelConfig cfg;
	DecoderFixture fx(cfg);
	EXPECT_EQ(cfg.bg_tokens(), 5u);
	Rng r(5);
	Tensor lm = random_tensor(r, {64, 20});
	const auto valid = first_valid(20, 20);
	for (auto& v : fx.store[fx.dec.delta()].value.mutable_data()) v = 0.0;
	Frame f(fx.store);
	Tensor prompt = fx.dec.bg_prompt(f, lm, valid);
	EXPECT_EQ(prompt.shape(), (Shape{64, 5}));
	expect_close(slice(prompt, 1, 0, 1), mean_columns(lm), 1e-12);
	expect_close(slice(prompt, 1, 1, 4), adaptive_avg_pool1d(lm, 4), 1e-15);

	ModelConfig ident = cfg;
	ident.bg_pool = {20};
	DecoderFixture fi(ident);
	for (auto& v : fi.store[fi.dec.delta()].value.mutable_data()) v = 0.0;
	Frame g(fi.store);
	EXPECT_EQ(values(fi.dec.bg_prompt(g, lm, valid)), values(lm));

	ModelConfig bad = cfg;
	bad.bg_pool = {};
	EXPECT_THROW(bad.validate(), ConfigError);
	bad.bg_pool = {30};
	EXPECT_THROW(bad.validate(), ConfigError);
	// A Delta whose token count disagrees with the pooled bins is rejected.
	fx.store[fx.dec.delta()].value = Tensor::zeros({64, 4}, true);
	Frame h(fx.store);
	EXPECT_THROW(fx.dec.bg_prompt(h, lm, valid), ConfigError);
}

TEST(BgPrompt, DeltaReceivesGradientFromBackgroundLoss) {
	ModelConfig cfg;
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	Frame f(net.params());
	net.forward(f, ModelInput::from_sample(generate_corpus(g)[0])).losses.bg.backward();
	auto grad = f.grad(net.decoder().delta());
	ASSERT_FALSE(grad.empty());
	EXPECT_TRUE(std::any_of(grad.begin(), grad.end(), [](double x) { return x != 0.0; }));
}

TEST(Predict, ShapesSymmetryAndBilinearity) {
	ModelConfig cfg;
	DecoderFixture fx(cfg);
	Rng r(6);
	Frame f(fx.store);
	Tensor v1 = random_tensor(r, {32, 16, 16});
	Tensor v_star = random_tensor(r, {64, 84});
	Tensor l_star = random_tensor(r, {64, 20});
	Tensor prompt = random_tensor(r, {64, 5});
	MaskLogits out = fx.dec.predict(f, v1, v_star, l_star, prompt);
	EXPECT_EQ(out.fg.shape(), (Shape{64, 64}));
	EXPECT_EQ(out.bg.shape(), (Shape{64, 64}));
	for (double x : out.fg.data()) ASSERT_TRUE(std::isfinite(x));

	Tensor pixels = fx.dec.project_pixels(f, fx.dec.pixel_features(f, v1, v_star));
	Tensor proto = fx.dec.project_prototype(f, slice(l_star, 1, 0, 1));
	Tensor a = fx.dec.prototype_logits(pixels, proto);
	Tensor b = fx.dec.prototype_logits(pixels, proto);
	EXPECT_EQ(values(a), values(b));
	EXPECT_EQ(values(a), values(out.fg));
	Tensor doubled = fx.dec.prototype_logits(pixels, scale(proto, 2.0));
	for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(doubled.data()[i], 2.0 * a.data()[i]);

	// Equal prototypes: background built from a prompt whose column mean equals [cls].
	Tensor cls_prompt = concat({slice(l_star, 1, 0, 1), slice(l_star, 1, 0, 1), slice(l_star, 1, 0, 1),
	                            slice(l_star, 1, 0, 1), slice(l_star, 1, 0, 1)},
	                           1);
	MaskLogits same = fx.dec.predict(f, v1, v_star, l_star, cls_prompt);
	// The column mean of five equal columns may differ from the column in the last bit.
	expect_close(same.fg, same.bg, 1e-12);
}

TEST(Predict, FiniteDifferencesOverDecoderParameters) {
	ModelConfig cfg = ModelConfig::micro();
	DecoderFixture fx(cfg);
	Rng r(7);
	std::vector<Tensor> maps = fx.stage_maps(r);
	Tensor v1 = random_tensor(r, {cfg.c1, cfg.stage_extent(1), cfg.stage_extent(1)});
	Tensor text = random_tensor(r, {cfg.d_model, cfg.n_tokens});
	Tensor lm = random_tensor(r, {cfg.d_model, cfg.n_tokens});
	const auto valid = first_valid(cfg.n_tokens, 4);
	const auto masked_valid = std::vector<bool>{true, true, false, false, true};
	std::vector<double> g(cfg.image_size * cfg.image_size);
	for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i / cfg.image_size + i % cfg.image_size) % 3 == 0 ? 1.0 : 0.0;
	Tensor gt({cfg.image_size, cfg.image_size}, g);
	auto loss = [&](Frame& f) {
		Tensor vcon = fx.dec.build_vcon(f, maps);
		auto [l_star, v_star] = fx.dec.mci(f, vcon, text, valid);
		MaskLogits lo = fx.dec.predict(f, v1, v_star, l_star, fx.dec.bg_prompt(f, lm, masked_valid));
		return add(twinstream_loss(lo, gt, cfg.lambda).total, scale(weighted_sum(v_star, 3), 0.05));
	};
	std::vector<ParamId> ids(fx.store.size());
	std::iota(ids.begin(), ids.end(), 0);
	auto fd = param_finite_difference(fx.store, ids, loss);
	EXPECT_LE(fd.max_rel_err, 1e-6) << fd.worst;
	EXPECT_GT(fd.checked, 1000u);
}

TEST(TwinstreamLoss, HandBceSaturationAndComposition) {
	Tensor gt({2, 2}, {1, 0, 1, 0});
	MaskLogits lo = logits_2x2({0.5, -1.0, 2.0, 0.0}, {-0.3, 0.7, 0.1, -2.0});
	auto fg_only = twinstream_loss(lo, gt, 1.0);
	const double hand = (bce(0.5, 1) + bce(-1.0, 0) + bce(2.0, 1) + bce(0.0, 0)) / 4;
	EXPECT_NEAR(fg_only.total.item(), hand, 1e-14);
	const double hand_bg = (bce(-0.3, 0) + bce(0.7, 1) + bce(0.1, 0) + bce(-2.0, 1)) / 4;
	EXPECT_NEAR(fg_only.bg.item(), hand_bg, 1e-14);

	auto mixed = twinstream_loss(lo, gt, 0.6);
	EXPECT_NEAR(mixed.total.item(), 0.6 * mixed.fg.item() + 0.4 * mixed.bg.item(), 1e-12);
	EXPECT_EQ(ModelConfig{}.lambda, 0.6);

	MaskLogits perfect = logits_2x2({50, -50, 50, -50}, {-50, 50, -50, 50});
	EXPECT_LT(twinstream_loss(perfect, gt, 0.6).total.item(), 1e-3);

	auto no_bg = twinstream_loss(lo, gt, 0.6, false);
	EXPECT_EQ(no_bg.total.item(), no_bg.fg.item());

	EXPECT_THROW(twinstream_loss(lo, Tensor({2, 2}, {1, 0, 0.5, 0}), 0.6), UsageError);
	EXPECT_THROW(twinstream_loss(lo, Tensor({1, 4}, {1, 0, 1, 0}), 0.6), DimensionError);
}

TEST(InferMask, TieBreakDominanceOracleAndShiftInvariance) {
	MaskLogits tie = logits_2x2({1, 2, 3, 4}, {1, 2, 3, 4});
	EXPECT_EQ(infer_mask(tie), (std::vector<std::uint8_t>{0, 0, 0, 0}));
	MaskLogits dom = logits_2x2({2, 3, 4, 5}, {1, 2, 3, 4});
	EXPECT_EQ(infer_mask(dom), (std::vector<std::uint8_t>{1, 1, 1, 1}));

	Rng r(8);
	for (int trial = 0; trial < 20; ++trial) {
		// Dyadic values keep the shifted comparison exact.
		std::vector<double> fg(64), bg(64);
		for (std::size_t i = 0; i < 64; ++i) {
			fg[i] = static_cast<double>(r.index(16)) / 8.0 - 1.0;
			bg[i] = static_cast<double>(r.index(16)) / 8.0 - 1.0;
		}
		auto mask = infer_mask(fg, bg);
		for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(mask[i], fg[i] > bg[i] ? 1 : 0);
		const double c = static_cast<double>(r.index(64)) - 32.0;
		std::vector<double> fs = fg, bs = bg;
		for (auto& x : fs) x += c;
		for (auto& x : bs) x += c;
		EXPECT_EQ(infer_mask(fs, bs), mask);
	}
}

TEST(TwinstreamLoss, DecreasesMonotonicallyWhenOverfittingOneSample) {
	ModelConfig cfg;
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	g.seed = 2;
	const auto data = generate_corpus(g);
	AdamW opt(net.params(), cfg);
	std::vector<double> history;
	for (int step = 0; step < 50; ++step) {
		BatchGradient bg = batch_gradient(net, {&data[0]}, 1);
		history.push_back(bg.losses[0].ce.item());
		opt.step(net.params(), bg.grads, cfg.lr_encoder, cfg.lr_other);
	}
	for (std::size_t i = 1; i < history.size(); ++i) EXPECT_LT(history[i], history[i - 1]) << "step " << i;
}
