#include "btd/commands.hpp"

#include <CLI11.hpp>

#include <exception>
#include <iostream>

int main(int argc, char** argv) {
	CLI::App app{"Referring segmentation with bidirectional correlation and a twin-stream decoder"};
	app.require_subcommand(1);

	btd::GenDataArgs gen;
	auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic referring-segmentation corpus");
	gen_cmd->add_option("--out", gen.out, "Output directory")->required();
	gen_cmd->add_option("--n", gen.n, "Number of samples")->capture_default_str();
	gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
	gen_cmd->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
	gen_cmd->add_option("--tokens", gen.tokens, "Token sequence length")->capture_default_str();
	gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

	btd::TrainArgs tr;
	auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus");
	train_cmd->add_option("--data", tr.data, "Corpus directory")->required();
	train_cmd->add_option("--config", tr.config, "Model config (JSON)")->required();
	train_cmd->add_option("--out", tr.out, "Run directory for checkpoint and log")->required();
	train_cmd->add_option("--threads", tr.threads, "Worker threads")->capture_default_str();
	train_cmd->add_option("--resume", tr.resume, "Checkpoint to resume from");

	btd::EvalArgs ev;
	auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
	eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint manifest or stem");
	eval_cmd->add_option("--data", ev.data, "Corpus directory")->required();
	eval_cmd->add_option("--report", ev.report, "Write the JSON report here");
	eval_cmd->add_option("--masks", ev.masks, "Write predicted masks into this directory");
	eval_cmd->add_option("--threads", ev.threads, "Worker threads")->capture_default_str();
	eval_cmd->add_flag("--gt-as-prediction", ev.gt_as_prediction, "Score the ground truth against itself");

	btd::PredictArgs pr;
	auto* predict_cmd = app.add_subcommand("predict", "Segment one image given an expression");
	predict_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint manifest or stem")->required();
	predict_cmd->add_option("--image", pr.image, "Input P6 image")->required();
	predict_cmd->add_option("--expression", pr.expression, "Referring expression")->required();
	predict_cmd->add_option("--mask", pr.mask, "Output mask (PGM)")->capture_default_str();
	predict_cmd->add_option("--overlay", pr.overlay, "Output overlay (PPM)")->capture_default_str();
	predict_cmd->add_option("--affinity-dir", pr.affinity_dir, "Write per-stage affinity heat maps here");

	btd::GradcheckArgs gc;
	auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full loss on the micro config");
	gc_cmd->add_option("--scalars", gc.scalars, "Minimum number of checked scalars")->capture_default_str();
	gc_cmd->add_option("--seed", gc.seed, "Sample and selection seed")->capture_default_str();
	gc_cmd->add_option("--corrupt", gc.corrupt, "Falsify this parameter's analytic gradient (self-test)");
	gc_cmd->add_option("--report", gc.report, "Write the JSON report here");

	CLI11_PARSE(app, argc, argv);

	try {
		if (*gen_cmd) return btd::cmd_gen_data(gen, std::cout);
		if (*train_cmd) return btd::cmd_train(tr, std::cout);
		if (*eval_cmd) return btd::cmd_eval(ev, std::cout);
		if (*predict_cmd) return btd::cmd_predict(pr, std::cout);
		if (*gc_cmd) return btd::cmd_gradcheck(gc, std::cout);
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << "\n";
		return 2;
	}
	return 0;
}
