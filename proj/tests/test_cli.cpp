#include "btd/checkpoint.hpp"
#include "btd/commands.hpp"
#include "btd/errors.hpp"
#include "btd/gradcheck.hpp"
#include "btd/image_io.hpp"
#include "btd/train.hpp"
#include "metric_oracle.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace btd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
	fs::path p = fs::temp_directory_path() / ("btd_cli_" + name + "_" + std::to_string(::getpid()));
	fs::remove_all(p);
	return p;
}

std::string bytes(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	std::ostringstream os;
	os << in.rdbuf();
	return os.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
	std::map<std::string, std::string> out;
	for (const auto& e : fs::recursive_directory_iterator(root))
		if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = bytes(e.path());
	return out;
}

ModelConfig small_config() {
	ModelConfig c;
	c.image_size = 32;
	c.patch_size = 2;
	c.c1 = 8;
	c.d_model = 16;
	c.heads = 2;
	c.batch_size = 4;
	c.epochs = 2;
	c.lr_encoder = 1e-4;
	c.lr_other = 1e-3;
	return c;
}

std::vector<Sample> small_corpus(std::size_t n = 8) {
	GenConfig g;
	g.image_size = 32;
	g.count = n;
	g.seed = 4;
	return generate_corpus(g);
}

} // namespace

TEST(Config, RoundTripAndUnknownKeys) {
	ModelConfig c = small_config();
	c.k_vision = {1, 5};
	c.bsc_stages = {true, false, true, false};
	c.use_bg_branch = false;
	c.eta = 0.25;
	c.seed = 1234567;
	EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
	auto j = nlohmann::json::parse(c.to_json());
	j["surprise"] = 1;
	EXPECT_THROW(ModelConfig::from_json(j.dump()), ConfigError);

	const ModelConfig d;
	EXPECT_EQ(d.lambda, 0.6);
	EXPECT_EQ(d.eta, 0.1);
	EXPECT_EQ(d.mci_iters, 2u);
	EXPECT_EQ(d.bg_tokens(), 5u);
	EXPECT_EQ(d.n_tokens, 20u);
	EXPECT_EQ(d.lr_encoder, 1e-5);
	EXPECT_EQ(d.lr_other, 1e-4);
	EXPECT_EQ(d.poly_power, 0.9);
	EXPECT_EQ(d.batch_size, 8u);
	EXPECT_EQ(d.epochs, 300u);
	EXPECT_EQ(d.k_vision, (std::vector<std::size_t>{1, 3, 5}));
	EXPECT_EQ(d.k_text, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Parameters, GroupPartitionIsTotal) {
	BtdNet net(ModelConfig{});
	std::size_t enc = 0, other = 0;
	for (const auto& p : net.params()) {
		const bool encoder_name = p.name.rfind("vision.", 0) == 0 || p.name.rfind("text.", 0) == 0;
		EXPECT_EQ(p.group == ParamGroup::encoder, encoder_name) << p.name;
		(p.group == ParamGroup::encoder ? enc : other)++;
	}
	EXPECT_EQ(enc + other, net.params().size());
	EXPECT_GT(enc, 0u);
	EXPECT_GT(other, 0u);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
	const fs::path dir = scratch("ckpt");
	fs::create_directories(dir);
	BtdNet net(small_config());
	OptimizerState opt;
	opt.step = 3;
	for (const auto& p : net.params()) {
		opt.m.emplace_back(p.value.numel(), 0.125);
		opt.v.emplace_back(p.value.numel(), 0.5);
	}
	save_checkpoint((dir / "a.json").string(), snapshot(net.config(), net.params(), 17, 2, &opt));
	Checkpoint loaded = load_checkpoint((dir / "a.json").string());
	EXPECT_EQ(loaded.global_step, 17u);
	EXPECT_EQ(loaded.epoch, 2u);
	ASSERT_TRUE(loaded.optimizer.has_value());
	EXPECT_EQ(loaded.optimizer->step, 3u);
	save_checkpoint((dir / "b.json").string(), loaded);
	EXPECT_EQ(bytes(dir / "a.bin"), bytes(dir / "b.bin"));
	auto ja = nlohmann::json::parse(bytes(dir / "a.json"));
	auto jb = nlohmann::json::parse(bytes(dir / "b.json"));
	EXPECT_EQ(ja["format"], kCheckpointFormat);
	ja.erase("payload");
	jb.erase("payload");
	EXPECT_EQ(ja, jb);

	BtdNet other(small_config());
	for (auto& v : other.params()[0].value.mutable_data()) v = 42.0;
	apply_checkpoint(loaded, other.params());
	for (ParamId id = 0; id < net.params().size(); ++id)
		EXPECT_EQ(btd::testing::values(other.params()[id].value), btd::testing::values(net.params()[id].value));

	Checkpoint missing = loaded;
	missing.params.pop_back();
	EXPECT_THROW(apply_checkpoint(missing, other.params()), FormatError);
	Checkpoint dup = loaded;
	dup.params.push_back(dup.params.front());
	EXPECT_THROW(apply_checkpoint(dup, other.params()), FormatError);

	std::ofstream(dir / "a.bin", std::ios::binary | std::ios::trunc) << "short";
	EXPECT_THROW(load_checkpoint((dir / "a.json").string()), FormatError);
	fs::remove_all(dir);
}

TEST(Schedule, PolyEndpoints) {
	EXPECT_EQ(poly_lr(1e-4, 0, 100, 0.9), 1e-4);
	EXPECT_EQ(poly_lr(1e-4, 100, 100, 0.9), 0.0);
	EXPECT_NEAR(poly_lr(1e-4, 50, 100, 0.9), 1e-4 * std::pow(0.5, 0.9), 1e-18);
	for (std::size_t s = 1; s <= 100; ++s) EXPECT_LT(poly_lr(1.0, s, 100, 0.9), poly_lr(1.0, s - 1, 100, 0.9));
}

TEST(Training, TotalLossStrictlyDecreasesOnOneSample) {
	ModelConfig cfg;
	BtdNet net(cfg);
	GenConfig g;
	g.count = 1;
	g.seed = 9;
	const auto data = generate_corpus(g);
	AdamW opt(net.params(), cfg);
	double prev = 0;
	for (int step = 0; step < 20; ++step) {
		BatchGradient bg = batch_gradient(net, {&data[0]}, 1);
		const double loss = bg.losses[0].total.item();
		if (step > 0) EXPECT_LT(loss, prev) << "step " << step;
		prev = loss;
		opt.step(net.params(), bg.grads, cfg.lr_encoder, cfg.lr_other);
	}
}

TEST(Training, ThreadedGradientEqualsSequential) {
	BtdNet net(small_config());
	const auto data = small_corpus(4);
	std::vector<const Sample*> batch;
	for (const auto& s : data) batch.push_back(&s);
	auto a = batch_gradient(net, batch, 1);
	auto b = batch_gradient(net, batch, 3);
	EXPECT_EQ(a.grads, b.grads);
}

TEST(Training, ResumeReproducesTheNextEpochBitExactly) {
	const fs::path full = scratch("full"), part = scratch("part");
	const auto data = small_corpus();
	ModelConfig cfg = small_config();
	cfg.epochs = 3;

	BtdNet a(cfg);
	TrainOptions oa;
	oa.out_dir = full.string();
	auto ra = train(a, data, oa);
	ASSERT_EQ(ra.log.size(), 3u);

	BtdNet b(cfg);
	TrainOptions ob;
	ob.out_dir = part.string();
	ob.stop_after = 2;
	train(b, data, ob);
	BtdNet c(cfg);
	TrainOptions oc;
	oc.out_dir = part.string();
	oc.resume = (part / "checkpoint.json").string();
	auto rc = train(c, data, oc);
	ASSERT_EQ(rc.log.size(), 3u);
	EXPECT_EQ(rc.log[2].to_json(), ra.log[2].to_json());
	EXPECT_EQ(bytes(full / "checkpoint.bin"), bytes(part / "checkpoint.bin"));
	EXPECT_EQ(bytes(full / "train_log.jsonl"), bytes(part / "train_log.jsonl"));

	// The log is JSON lines with the documented fields.
	std::ifstream log(full / "train_log.jsonl");
	std::string line;
	std::size_t lines = 0;
	while (std::getline(log, line)) {
		auto j = nlohmann::json::parse(line);
		for (const char* k : {"epoch", "l_fg", "l_bg", "l_re", "l_total", "train_miou"}) EXPECT_TRUE(j.contains(k)) << k;
		++lines;
	}
	EXPECT_EQ(lines, 3u);

	ModelConfig changed = cfg;
	changed.eta = 0.2;
	BtdNet d(changed);
	EXPECT_THROW(train(d, data, oc), ConfigError);
	fs::remove_all(full);
	fs::remove_all(part);
}

TEST(Training, NonFiniteLossAbortsWithGradientDump) {
	const fs::path dir = scratch("nan");
	BtdNet net(small_config());
	for (auto& v : net.params()[0].value.mutable_data()) v = std::numeric_limits<double>::quiet_NaN();
	TrainOptions o;
	o.out_dir = dir.string();
	EXPECT_THROW(train(net, small_corpus(4), o), TrainingError);
	EXPECT_TRUE(fs::exists(dir / "nan_dump.json"));
	fs::remove_all(dir);
}

TEST(GenData, DeterministicCountedAndGuarded) {
	const fs::path a = scratch("gen_a"), b = scratch("gen_b");
	std::ostringstream sink;
	GenDataArgs args;
	args.n = 64;
	args.seed = 1;
	args.out = a.string();
	EXPECT_EQ(cmd_gen_data(args, sink), 0);
	args.out = b.string();
	EXPECT_EQ(cmd_gen_data(args, sink), 0);
	EXPECT_EQ(tree(a), tree(b));
	std::ifstream idx(a / "index.jsonl");
	std::size_t lines = 0;
	for (std::string l; std::getline(idx, l);) ++lines;
	EXPECT_EQ(lines, 64u);
	for (std::size_t i = 0; i < 64; ++i) {
		GenConfig g;
		g.count = 64;
		g.seed = 1;
		const auto gs = generate_sample(g, i);
		EXPECT_EQ(referents(gs.expression, gs.scene).size(), 1u);
	}
	EXPECT_EQ(load_corpus(a.string()).size(), 64u);

	EXPECT_THROW(cmd_gen_data(args, sink), UsageError);
	args.force = true;
	args.n = 3;
	EXPECT_EQ(cmd_gen_data(args, sink), 0);
	EXPECT_EQ(load_corpus(b.string()).size(), 3u);
	fs::remove_all(a);
	fs::remove_all(b);
}

TEST(Eval, GroundTruthScoresPerfectlyAndReportMatchesOracle) {
	const fs::path root = scratch("eval");
	const fs::path data = root / "data", run = root / "run";
	const auto corpus = small_corpus(6);
	save_corpus(data.string(), corpus);
	std::ostringstream sink;

	EvalArgs gt;
	gt.data = data.string();
	gt.gt_as_prediction = true;
	gt.report = (root / "gt.json").string();
	EXPECT_EQ(cmd_eval(gt, sink), 0);
	auto j = nlohmann::json::parse(bytes(root / "gt.json"));
	for (const char* k : {"pr50", "pr60", "pr70", "pr80", "pr90", "oiou", "miou"}) EXPECT_EQ(j[k].get<double>(), 1.0) << k;
	std::set<std::string> keys;
	for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
	EXPECT_EQ(keys, (std::set<std::string>{"pr50", "pr60", "pr70", "pr80", "pr90", "oiou", "miou", "per_category"}));

	// A model checkpoint: predicted masks written to disk agree with the report via the oracle.
	BtdNet net(small_config());
	fs::create_directories(run);
	save_checkpoint((run / "checkpoint.json").string(), snapshot(net.config(), net.params(), 0, 0));
	EvalArgs ev;
	ev.data = data.string();
	ev.checkpoint = (run / "checkpoint.json").string();
	ev.report = (root / "model.json").string();
	ev.masks = (root / "masks").string();
	EXPECT_EQ(cmd_eval(ev, sink), 0);
	std::vector<btd::testing::OracleSample> samples;
	for (const auto& s : corpus) {
		PnmImage m = read_pnm((root / "masks" / (s.id + ".pgm")).string());
		btd::testing::OracleSample o;
		for (auto px : m.pixels) o.pred.push_back(px ? 1 : 0);
		o.gt = s.gt_mask;
		o.category = std::string(kShapeNames[s.category]);
		samples.push_back(std::move(o));
	}
	auto oracle = btd::testing::oracle_metrics(samples);
	auto jm = nlohmann::json::parse(bytes(root / "model.json"));
	EXPECT_EQ(jm["miou"].get<double>(), oracle.miou);
	EXPECT_EQ(jm["oiou"].get<double>(), oracle.oiou);
	EXPECT_EQ(jm["pr50"].get<double>(), oracle.pr[0]);

	// A checkpoint whose config does not match the corpus is refused.
	ModelConfig big;
	BtdNet wrong(big);
	save_checkpoint((run / "wrong.json").string(), snapshot(wrong.config(), wrong.params(), 0, 0));
	ev.checkpoint = (run / "wrong.json").string();
	EXPECT_THROW(cmd_eval(ev, sink), ConfigError);
	fs::remove_all(root);
}

TEST(Predict, MaskShapeValuesDeterminismAndEmptyExpression) {
	const fs::path root = scratch("predict");
	const auto corpus = small_corpus(1);
	save_corpus((root / "data").string(), corpus);
	BtdNet net(small_config());
	save_checkpoint((root / "ckpt.json").string(), snapshot(net.config(), net.params(), 0, 0));
	std::ostringstream out1, out2;
	PredictArgs p;
	p.checkpoint = (root / "ckpt.json").string();
	p.image = (root / "data" / "images" / (corpus[0].id + ".ppm")).string();
	p.expression = corpus[0].expression;
	p.mask = (root / "m1.pgm").string();
	p.overlay = (root / "o1.ppm").string();
	p.affinity_dir = (root / "aff").string();
	EXPECT_EQ(cmd_predict(p, out1), 0);
	p.mask = (root / "m2.pgm").string();
	p.overlay = (root / "o2.ppm").string();
	EXPECT_EQ(cmd_predict(p, out2), 0);

	PnmImage m = read_pnm((root / "m1.pgm").string());
	EXPECT_EQ(m.channels, 1u);
	EXPECT_EQ(m.width, 32u);
	EXPECT_EQ(m.height, 32u);
	for (auto px : m.pixels) EXPECT_TRUE(px == 0 || px == 255);
	EXPECT_EQ(bytes(root / "m1.pgm"), bytes(root / "m2.pgm"));
	EXPECT_EQ(bytes(root / "o1.ppm"), bytes(root / "o2.ppm"));
	EXPECT_EQ(out1.str(), out2.str());
	EXPECT_NE(out1.str().find("foreground pixels:"), std::string::npos);
	EXPECT_EQ(read_pnm((root / "o1.ppm").string()).channels, 3u);
	EXPECT_FALSE(fs::is_empty(root / "aff"));

	p.expression = "";
	EXPECT_THROW(cmd_predict(p, out1), UsageError);
	p.expression = "   ";
	EXPECT_THROW(cmd_predict(p, out1), UsageError);
	fs::remove_all(root);
}

TEST(Gradcheck, PassesOnFreshInitAndNamesACorruptedParameter) {
	std::ostringstream out;
	GradcheckArgs args;
	const fs::path report = scratch("gc") += ".json";
	args.report = report.string();
	EXPECT_EQ(cmd_gradcheck(args, out), 0) << out.str();
	auto j = nlohmann::json::parse(bytes(report));
	EXPECT_TRUE(j["pass"].get<bool>());
	EXPECT_LE(j["max_rel_err"].get<double>(), 1e-4);
	for (const char* m : {"vision", "text", "bsc", "decoder", "dmols"}) EXPECT_TRUE(j["module_worst"].contains(m)) << m;

	std::ostringstream bad;
	args.corrupt = "decoder.predictor.delta";
	EXPECT_EQ(cmd_gradcheck(args, bad), 1);
	EXPECT_NE(bad.str().find("decoder.predictor.delta"), std::string::npos);
	fs::remove(report);
}
