#pragma once

// Training loop: AdamW with decoupled weight decay over two learning-rate
// groups, a poly schedule annealed to zero, fixed-order gradient reduction
// across per-sample graphs, JSON-lines logging and per-epoch checkpoints.

#include "btd/checkpoint.hpp"
#include "btd/metrics.hpp"
#include "btd/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace btd {

/// base * (1 - step/total)^power; 0 once step >= total.
double poly_lr(double base, std::size_t step, std::size_t total, double power);

class AdamW {
public:
	AdamW(const ParameterStore& store, const ModelConfig& config);

	/// Applies one update from mean gradients (one vector per parameter;
	/// an empty vector means no gradient).
	void step(ParameterStore& store, const std::vector<std::vector<double>>& grads, double lr_encoder, double lr_other);

	const OptimizerState& state() const { return state_; }
	void set_state(OptimizerState state);

private:
	double beta1_, beta2_, eps_, weight_decay_;
	OptimizerState state_;
};

struct EpochLog {
	std::size_t epoch = 0; // 1-based
	std::size_t global_step = 0;
	double l_fg = 0, l_bg = 0, l_re = 0, l_ce = 0, l_total = 0; // sample means over the epoch
	double train_miou = 0, train_pr50 = 0;                      // from the forward passes of the epoch
	double lr_encoder = 0, lr_other = 0;                        // rate used by the epoch's last step

	std::string to_json() const;
	static EpochLog from_json(const std::string& line);
};

struct TrainOptions {
	std::string out_dir;      // checkpoint.{json,bin} and train_log.jsonl; empty disables file output
	std::string resume;       // checkpoint to continue from
	std::size_t threads = 1;  // per-sample graphs built concurrently
	std::size_t stop_after = 0; // stop after this epoch (0: run config.epochs)
	/// Called after every epoch; returning false stops training.
	std::function<bool(const EpochLog&)> on_epoch;
};

struct TrainResult {
	std::vector<EpochLog> log; // including epochs restored from a resumed log
	std::size_t global_step = 0;
};

TrainResult train(BtdNet& net, const std::vector<Sample>& data, const TrainOptions& options);

/// Mean of the per-sample losses and gradient of that mean, summed in sample order.
struct BatchGradient {
	std::vector<std::vector<double>> grads;
	std::vector<Losses> losses;
	std::vector<std::vector<std::uint8_t>> masks;
};
BatchGradient batch_gradient(const BtdNet& net, const std::vector<const Sample*>& batch, std::size_t threads);

/// Runs inference over `data` and accumulates metrics keyed by shape name.
Report evaluate(const BtdNet& net, const std::vector<Sample>& data, std::size_t threads = 1,
                std::vector<std::vector<std::uint8_t>>* masks = nullptr);

} // namespace btd
