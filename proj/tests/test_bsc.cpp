#include "btd/bsc.hpp"
#include "btd/errors.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace btd;
using btd::testing::random_tensor;
using btd::testing::values;

namespace {

ModelConfig tiny_config() {
	ModelConfig cfg;
	cfg.c1 = 4;
	cfg.d_model = 8;
	cfg.n_tokens = 5;
	cfg.heads = 2;
	cfg.gate_init = 0.5;
	return cfg;
}

struct BscFixture {
	ParameterStore store;
	Rng rng;
	Bsc bsc;
	explicit BscFixture(const ModelConfig& cfg, std::uint64_t seed = 9)
	    : rng(seed), bsc(ParamBuilder(store, rng, ParamGroup::other, "bsc"), cfg) {}

	void set(ParamId id, std::vector<double> v) {
		auto d = store[id].value.mutable_data();
		ASSERT_EQ(d.size(), v.size());
		std::copy(v.begin(), v.end(), d.begin());
	}
	/// Copies every same-named, same-shaped parameter from `other`.
	void copy_from(const BscFixture& other) {
		for (ParamId id = 0; id < store.size(); ++id) {
			auto src = other.store.find(store[id].name);
			if (!src || other.store[*src].value.shape() != store[id].value.shape()) continue;
			auto s = other.store[*src].value.data();
			std::copy(s.begin(), s.end(), store[id].value.mutable_data().begin());
		}
	}
};

struct Inputs {
	Tensor vision, text;
	std::vector<bool> valid;
};

Inputs tiny_inputs(std::uint64_t seed, std::size_t valid_count = 3) {
	Rng rng(seed);
	Inputs in{random_tensor(rng, {4, 4, 4}), random_tensor(rng, {8, 5}), std::vector<bool>(5, false)};
	for (std::size_t i = 0; i < valid_count; ++i) in.valid[i] = true;
	return in;
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
	ASSERT_EQ(a.shape(), b.shape());
	for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data()[i], b.data()[i], tol) << "element " << i;
}

} // namespace

TEST(Bsc, ZeroGateIsExactResidualIdentityAtEveryStage) {
	ModelConfig cfg; // gate_init defaults to 0
	BscFixture fx(cfg);
	Rng rng(2);
	std::vector<bool> valid(cfg.n_tokens, true);
	valid[15] = valid[19] = false;
	for (std::size_t i = 1; i <= 4; ++i) {
		Frame f(fx.store);
		const std::size_t c = cfg.stage_channels(i), h = cfg.stage_extent(i);
		Tensor v = random_tensor(rng, {c, h, h}, -3, 3);
		Tensor l = random_tensor(rng, {cfg.d_model, cfg.n_tokens}, -3, 3);
		auto [v2, l2] = fx.bsc.forward(f, i, v, l, valid);
		EXPECT_EQ(values(v2), values(v)) << "stage " << i;
		EXPECT_EQ(values(l2), values(l)) << "stage " << i;
	}
}

TEST(Bsc, SingleValidTokenMakesAffinityDegenerate) {
	BscFixture fx(tiny_config());
	Inputs in = tiny_inputs(4, 1);
	Frame f(fx.store);
	BscTrace trace;
	fx.bsc.forward(f, 1, in.vision, in.text, in.valid, &trace);
	for (const auto& a : trace.vision_affinity)
		for (std::size_t p = 0; p < 16; ++p) {
			EXPECT_EQ(a.at({p, 0}), 1.0);
			for (std::size_t j = 1; j < 5; ++j) EXPECT_EQ(a.at({p, j}), 0.0);
		}
	for (std::size_t p = 0; p < 16; ++p)
		for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(trace.vision_context.at({p, d}), in.text.at({d, 0}), 1e-12);
}

TEST(Bsc, AffinityRowsSumToOneAndPadColumnsAreZero) {
	BscFixture fx(tiny_config());
	Inputs in = tiny_inputs(5, 3);
	Frame f(fx.store);
	BscTrace trace;
	fx.bsc.forward(f, 1, in.vision, in.text, in.valid, &trace);
	ASSERT_EQ(trace.vision_affinity.size(), 3u);
	ASSERT_EQ(trace.text_affinity.size(), 3u);
	for (const auto& a : trace.vision_affinity)
		for (std::size_t p = 0; p < a.dim(0); ++p) {
			double row = 0;
			for (std::size_t j = 0; j < a.dim(1); ++j) {
				row += a.at({p, j});
				if (!in.valid[j]) EXPECT_EQ(a.at({p, j}), 0.0);
			}
			EXPECT_NEAR(row, 1.0, 1e-9);
		}
	for (const auto& b : trace.text_affinity)
		for (std::size_t n = 0; n < b.dim(0); ++n) {
			double row = 0;
			for (std::size_t p = 0; p < b.dim(1); ++p) row += b.at({n, p});
			EXPECT_NEAR(row, 1.0, 1e-9);
		}
}

TEST(Bsc, OneHotMixtureEqualsSingleWindowPipeline) {
	ModelConfig full = tiny_config();
	ModelConfig single = full;
	single.k_vision = {1};
	single.k_text = {1};
	BscFixture a(full), b(single);
	b.copy_from(a);
	a.set(a.bsc.stage(1).alpha, {0, -1000, -1000});
	a.set(a.bsc.stage(1).beta, {0, -1000, -1000});
	Inputs in = tiny_inputs(6);
	Frame fa(a.store), fb(b.store);
	auto [va, la] = a.bsc.forward(fa, 1, in.vision, in.text, in.valid);
	auto [vb, lb] = b.bsc.forward(fb, 1, in.vision, in.text, in.valid);
	expect_near(va, vb, 1e-12);
	expect_near(la, lb, 1e-12);
	EXPECT_NE(values(va), values(in.vision));
}

TEST(Bsc, PermutingBranchesWithTheirWeightsIsCovariant) {
	ModelConfig base = tiny_config();
	ModelConfig perm = base;
	perm.k_vision = {5, 1, 3};
	perm.k_text = {3, 1, 2};
	BscFixture a(base), b(perm);
	b.copy_from(a);
	a.set(a.bsc.stage(1).alpha, {0.2, -0.4, 0.9});
	a.set(a.bsc.stage(1).beta, {-0.3, 0.5, 0.1});
	b.set(b.bsc.stage(1).alpha, {0.9, 0.2, -0.4});
	b.set(b.bsc.stage(1).beta, {0.1, -0.3, 0.5});
	Inputs in = tiny_inputs(7);
	Frame fa(a.store), fb(b.store);
	auto [va, la] = a.bsc.forward(fa, 1, in.vision, in.text, in.valid);
	auto [vb, lb] = b.bsc.forward(fb, 1, in.vision, in.text, in.valid);
	expect_near(va, vb, 1e-12);
	expect_near(la, lb, 1e-12);
}

TEST(Bsc, FiniteDifferencesOnTinyStage) {
	BscFixture fx(tiny_config());
	Inputs in = tiny_inputs(8);
	std::vector<ParamId> ids;
	for (ParamId id = 0; id < fx.store.size(); ++id)
		if (fx.store[id].name.rfind("bsc.stage1.", 0) == 0) ids.push_back(id);
	Rng wr(10);
	Tensor wv = random_tensor(wr, {4, 4, 4});
	Tensor wl = random_tensor(wr, {8, 5});
	auto loss_of = [&](Frame& f, const Tensor& v, const Tensor& l) {
		auto [v2, l2] = fx.bsc.forward(f, 1, v, l, in.valid);
		return add(sum(mul(v2, wv)), sum(mul(l2, wl)));
	};
	auto params = btd::testing::param_finite_difference(fx.store, ids, [&](Frame& f) { return loss_of(f, in.vision, in.text); });
	EXPECT_LE(params.max_rel_err, 1e-6) << params.worst;
	EXPECT_GT(params.checked, 1000u);
	auto inputs = btd::testing::finite_difference(
	    [&](const std::vector<Tensor>& x) {
		    Frame f(fx.store);
		    return loss_of(f, x[0], x[1]);
	    },
	    {in.vision, in.text});
	EXPECT_LE(inputs.max_rel_err, 1e-6) << inputs.worst;
}

TEST(Bsc, ShapeGuards) {
	BscFixture fx(tiny_config());
	Inputs in = tiny_inputs(1);
	Frame f(fx.store);
	EXPECT_THROW(fx.bsc.forward(f, 1, Tensor::zeros({5, 4, 4}), in.text, in.valid), DimensionError);
	EXPECT_THROW(fx.bsc.forward(f, 1, in.vision, Tensor::zeros({8, 4}), in.valid), DimensionError);
}

TEST(Bsc, MixtureWeightsReceiveGradientAtEveryStage) {
	ModelConfig cfg;
	cfg.gate_init = 0.1;
	const auto dead = btd::testing::dead_parameters(cfg, "bsc.");
	EXPECT_TRUE(dead.empty()) << "first dead parameter: " << (dead.empty() ? "" : dead[0]);
}

TEST(Bsc, ZeroGateStillTrainsTheGateScale) {
	ModelConfig cfg;
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	Frame f(net.params());
	net.forward(f, ModelInput::from_sample(generate_corpus(g)[0])).losses.total.backward();
	for (std::size_t i = 1; i <= 4; ++i) {
		EXPECT_NE(f.grad(net.bsc().stage(i).vision_gate_scale)[0], 0.0);
		EXPECT_NE(f.grad(net.bsc().stage(i).text_gate_scale)[0], 0.0);
	}
}

TEST(Bsc, DisablingLaterStagesLeavesOnlyStageOneInteraction) {
	ModelConfig cfg;
	cfg.bsc_stages = {true, false, false, false};
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	ForwardTrace trace;
	Frame f(net.params());
	auto r = net.forward(f, ModelInput::from_sample(generate_corpus(g)[0]), &trace);
	EXPECT_EQ(trace.bsc.size(), 1u);
	ASSERT_EQ(r.vision_stages.size(), 4u);
	for (std::size_t i = 1; i <= 4; ++i)
		EXPECT_EQ(r.vision_stages[i - 1].shape(), (Shape{cfg.stage_channels(i), cfg.stage_extent(i), cfg.stage_extent(i)}));
}
