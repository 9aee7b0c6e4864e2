#include "btd/commands.hpp"

#include "btd/checkpoint.hpp"
#include "btd/errors.hpp"
#include "btd/gradcheck.hpp"
#include "btd/image_io.hpp"
#include "btd/model.hpp"
#include "btd/train.hpp"
#include "btd/viz.hpp"

#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>

namespace fs = std::filesystem;

namespace btd {

namespace {

void write_text(const std::string& path, const std::string& text) {
	std::ofstream f(path, std::ios::binary | std::ios::trunc);
	if (!f) throw UsageError("cannot write " + path);
	f << text;
}

std::unique_ptr<BtdNet> load_model(const std::string& checkpoint) {
	Checkpoint c = load_checkpoint(checkpoint);
	auto net = std::make_unique<BtdNet>(c.config);
	apply_checkpoint(c, net->params());
	return net;
}

} // namespace

int cmd_gen_data(const GenDataArgs& args, std::ostream& out) {
	if (args.out.empty()) throw UsageError("gen-data: --out is required");
	if (fs::exists(args.out) && !fs::is_empty(args.out)) {
		if (!args.force) throw UsageError("gen-data: " + args.out + " exists and is not empty (use --force)");
		for (const char* entry : {"index.jsonl", "images", "masks"}) fs::remove_all(fs::path(args.out) / entry);
	}
	GenConfig g;
	g.count = args.n;
	g.seed = args.seed;
	g.image_size = args.size;
	g.n_tokens = args.tokens;
	const auto samples = generate_corpus(g);
	save_corpus(args.out, samples);
	out << "wrote " << samples.size() << " samples to " << args.out << "\n";
	return 0;
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
	if (args.data.empty() || !fs::exists(fs::path(args.data) / "index.jsonl"))
		throw UsageError("train: corpus not found at '" + args.data + "'");
	if (args.config.empty() || !fs::exists(args.config)) throw UsageError("train: config not found at '" + args.config + "'");
	if (args.out.empty()) throw UsageError("train: --out is required");
	const ModelConfig cfg = ModelConfig::load(args.config);
	const auto data = load_corpus(args.data);
	BtdNet net(cfg);
	TrainOptions o;
	o.out_dir = args.out;
	o.resume = args.resume;
	o.threads = args.threads;
	o.on_epoch = [&](const EpochLog& e) {
		out << e.to_json() << "\n" << std::flush;
		return true;
	};
	const TrainResult r = train(net, data, o);
	out << "trained " << r.log.size() << " epochs (" << r.global_step << " steps); checkpoint at "
	    << (fs::path(args.out) / "checkpoint.json").string() << "\n";
	return 0;
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
	const auto data = load_corpus(args.data);
	Report report;
	std::vector<std::vector<std::uint8_t>> masks;
	if (args.gt_as_prediction) {
		EvalAccumulator acc;
		for (const auto& s : data) {
			acc.add(s.gt_mask, s.gt_mask, std::string(kShapeNames.at(static_cast<std::size_t>(s.category))));
			masks.push_back(s.gt_mask);
		}
		report = acc.finalize();
	} else {
		if (args.checkpoint.empty()) throw UsageError("eval: --checkpoint is required unless --gt-as-prediction");
		auto net = load_model(args.checkpoint);
		for (const auto& s : data)
			if (s.height != net->config().image_size || s.tokens.size() != net->config().n_tokens)
				throw ConfigError("eval: sample " + s.id + " does not match the checkpoint config");
		report = evaluate(*net, data, args.threads, &masks);
	}
	if (!args.masks.empty()) {
		fs::create_directories(args.masks);
		for (std::size_t i = 0; i < data.size(); ++i)
			write_pnm((fs::path(args.masks) / (data[i].id + ".pgm")).string(),
			          mask_to_pnm(masks[i], data[i].height, data[i].width));
	}
	out << report.to_text();
	if (args.report.empty())
		out << report.to_json();
	else
		write_text(args.report, report.to_json());
	return 0;
}

int cmd_predict(const PredictArgs& args, std::ostream& out) {
	auto net = load_model(args.checkpoint);
	const ModelConfig& cfg = net->config();
	const Vocabulary& vocab = Vocabulary::standard();
	const std::vector<int> tokens = tokenize(args.expression, vocab, cfg.n_tokens);
	bool any_word = false;
	for (std::size_t i = 1; i < tokens.size(); ++i) any_word |= tokens[i] != Vocabulary::pad;
	if (!any_word) throw UsageError("predict: expression '" + args.expression + "' contains no words");

	const PnmImage img = read_pnm(args.image);
	if (img.channels != 3) throw UsageError("predict: " + args.image + " must be a colour (P6) image");
	if (img.width != cfg.image_size || img.height != cfg.image_size)
		throw ConfigError("predict: " + args.image + " is " + std::to_string(img.width) + "x" +
		                  std::to_string(img.height) + ", model expects " + std::to_string(cfg.image_size) + "x" +
		                  std::to_string(cfg.image_size));
	const std::vector<double> planar = from_pnm(img);
	const TokenSpan span = find_key_object_span(tokens, vocab);
	ModelInput in{Tensor({3, img.height, img.width}, planar), tokens, mask_key_object(tokens, span), Tensor(), Tensor()};

	Frame f(net->params());
	ForwardTrace trace;
	const ForwardResult r = net->forward(f, in, args.affinity_dir.empty() ? nullptr : &trace);
	const std::vector<std::uint8_t> mask = infer_mask(r.logits);

	write_pnm(args.mask, mask_to_pnm(mask, img.height, img.width));
	write_pnm(args.overlay, overlay(planar, mask, img.height, img.width));
	if (!args.affinity_dir.empty()) dump_affinity_maps(args.affinity_dir, trace.bsc, cfg, span);
	std::size_t fg = 0;
	for (auto m : mask) fg += m;
	out << "foreground pixels: " << fg << "\n";
	return 0;
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
	GradcheckOptions o;
	o.min_scalars = args.scalars;
	o.seed = args.seed;
	o.corrupt = args.corrupt;
	const GradcheckReport r = gradcheck(ModelConfig::micro(), o);
	out << r.to_text();
	if (!args.report.empty()) write_text(args.report, r.to_json());
	return r.pass ? 0 : 1;
}

} // namespace btd
