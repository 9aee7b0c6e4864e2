#pragma once

// Subcommand implementations behind the command-line tool. Each returns the
// process exit status and writes human-readable output to `out`.

#include <cstdint>
#include <iosfwd>
#include <string>

namespace btd {

struct GenDataArgs {
	std::string out;
	std::size_t n = 32;
	std::uint64_t seed = 0;
	std::size_t size = 64;
	std::size_t tokens = 20;
	bool force = false;
};

struct TrainArgs {
	std::string data;
	std::string config;
	std::string out;
	std::size_t threads = 1;
	std::string resume;
};

struct EvalArgs {
	std::string checkpoint;
	std::string data;
	std::string report; // JSON output path; empty prints JSON after the table
	std::string masks;  // directory for predicted masks; empty skips
	bool gt_as_prediction = false;
	std::size_t threads = 1;
};

struct PredictArgs {
	std::string checkpoint;
	std::string image;
	std::string expression;
	std::string mask = "mask.pgm";
	std::string overlay = "overlay.ppm";
	std::string affinity_dir; // per-stage, per-k BSC heat maps; empty skips
};

struct GradcheckArgs {
	std::size_t scalars = 200;
	std::uint64_t seed = 0;
	std::string corrupt; // parameter whose analytic gradient is falsified
	std::string report;  // JSON output path
};

int cmd_gen_data(const GenDataArgs& args, std::ostream& out);
int cmd_train(const TrainArgs& args, std::ostream& out);
int cmd_eval(const EvalArgs& args, std::ostream& out);
int cmd_predict(const PredictArgs& args, std::ostream& out);
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out);

} // namespace btd
