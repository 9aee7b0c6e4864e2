#include "btd/train.hpp"

#include "btd/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

namespace btd {

using json = nlohmann::ordered_json;

double poly_lr(double base, std::size_t step, std::size_t total, double power) {
	if (total == 0 || step >= total) return 0.0;
	return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

AdamW::AdamW(const ParameterStore& store, const ModelConfig& config)
    : beta1_(config.adam_beta1), beta2_(config.adam_beta2), eps_(config.adam_eps), weight_decay_(config.weight_decay) {
	for (const auto& p : store) {
		state_.m.emplace_back(p.value.numel(), 0.0);
		state_.v.emplace_back(p.value.numel(), 0.0);
	}
}

void AdamW::set_state(OptimizerState state) {
	if (state.m.size() != state_.m.size() || state.v.size() != state_.v.size())
		throw FormatError("optimizer state does not match the model");
	for (std::size_t i = 0; i < state.m.size(); ++i)
		if (state.m[i].size() != state_.m[i].size() || state.v[i].size() != state_.v[i].size())
			throw FormatError("optimizer state does not match the model");
	state_ = std::move(state);
}

void AdamW::step(ParameterStore& store, const std::vector<std::vector<double>>& grads, double lr_encoder,
                 double lr_other) {
	if (grads.size() != store.size()) throw UsageError("AdamW: one gradient vector per parameter expected");
	++state_.step;
	const double t = static_cast<double>(state_.step);
	const double c1 = 1.0 - std::pow(beta1_, t);
	const double c2 = 1.0 - std::pow(beta2_, t);
	for (std::size_t i = 0; i < store.size(); ++i) {
		Parameter& p = store[i];
		const double lr = p.group == ParamGroup::encoder ? lr_encoder : lr_other;
		const double decay = p.decay ? weight_decay_ : 0.0;
		auto w = p.value.mutable_data();
		auto& m = state_.m[i];
		auto& v = state_.v[i];
		const auto& g = grads[i];
		for (std::size_t k = 0; k < w.size(); ++k) {
			const double gk = g.empty() ? 0.0 : g[k];
			m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
			v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
			const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
			w[k] -= lr * (update + decay * w[k]);
		}
	}
}

std::string EpochLog::to_json() const {
	json j;
	j["epoch"] = epoch;
	j["global_step"] = global_step;
	j["l_fg"] = l_fg;
	j["l_bg"] = l_bg;
	j["l_re"] = l_re;
	j["l_ce"] = l_ce;
	j["l_total"] = l_total;
	j["train_miou"] = train_miou;
	j["train_pr50"] = train_pr50;
	j["lr_encoder"] = lr_encoder;
	j["lr_other"] = lr_other;
	return j.dump();
}

EpochLog EpochLog::from_json(const std::string& line) {
	try {
		const json j = json::parse(line);
		EpochLog e;
		e.epoch = j.at("epoch").get<std::size_t>();
		e.global_step = j.at("global_step").get<std::size_t>();
		e.l_fg = j.at("l_fg").get<double>();
		e.l_bg = j.at("l_bg").get<double>();
		e.l_re = j.at("l_re").get<double>();
		e.l_ce = j.at("l_ce").get<double>();
		e.l_total = j.at("l_total").get<double>();
		e.train_miou = j.at("train_miou").get<double>();
		e.train_pr50 = j.at("train_pr50").get<double>();
		e.lr_encoder = j.at("lr_encoder").get<double>();
		e.lr_other = j.at("lr_other").get<double>();
		return e;
	} catch (const nlohmann::json::exception& e) {
		throw FormatError(std::string("training log: bad line: ") + e.what());
	}
}

namespace {

struct SampleOutcome {
	std::vector<std::vector<double>> grads;
	Losses losses;
	std::vector<std::uint8_t> mask;
};

SampleOutcome run_sample(const BtdNet& net, const Sample& sample) {
	Frame f(net.params());
	ForwardResult r = net.forward(f, ModelInput::from_sample(sample));
	r.losses.total.backward();
	SampleOutcome out;
	out.grads.resize(net.params().size());
	for (std::size_t i = 0; i < net.params().size(); ++i) {
		auto g = f.grad(i);
		out.grads[i].assign(g.begin(), g.end());
	}
	out.losses = r.losses;
	out.mask = infer_mask(r.logits);
	return out;
}

// Runs `work(i)` for i in [0, n) over up to `threads` workers with a static
// interleaved assignment; results are indexed so order never depends on timing.
template <class Work>
void parallel_for(std::size_t n, std::size_t threads, Work work) {
	threads = std::max<std::size_t>(1, std::min(threads, n));
	if (threads == 1) {
		for (std::size_t i = 0; i < n; ++i) work(i);
		return;
	}
	std::vector<std::thread> pool;
	std::vector<std::exception_ptr> errors(threads);
	for (std::size_t t = 0; t < threads; ++t)
		pool.emplace_back([&, t] {
			try {
				for (std::size_t i = t; i < n; i += threads) work(i);
			} catch (...) {
				errors[t] = std::current_exception();
			}
		});
	for (auto& th : pool) th.join();
	for (auto& e : errors)
		if (e) std::rethrow_exception(e);
}

void accumulate(std::vector<std::vector<double>>& sum, const std::vector<std::vector<double>>& g) {
	for (std::size_t i = 0; i < sum.size(); ++i) {
		if (g[i].empty()) continue;
		if (sum[i].empty()) sum[i].assign(g[i].size(), 0.0);
		for (std::size_t k = 0; k < g[i].size(); ++k) sum[i][k] += g[i][k];
	}
}

std::vector<double> grad_norms(const std::vector<std::vector<double>>& grads) {
	std::vector<double> out;
	for (const auto& g : grads) {
		double s = 0.0;
		for (double x : g) s += x * x;
		out.push_back(std::sqrt(s));
	}
	return out;
}

[[noreturn]] void abort_non_finite(const BtdNet& net, const TrainOptions& options, std::size_t epoch, std::size_t step,
                                   const std::vector<double>& last_norms) {
	json dump;
	dump["epoch"] = epoch;
	dump["global_step"] = step;
	json norms = json::object();
	std::size_t i = 0;
	for (const auto& p : net.params()) {
		norms[p.name] = i < last_norms.size() ? json(last_norms[i]) : json(nullptr);
		++i;
	}
	dump["last_step_grad_norms"] = std::move(norms);
	std::string where = "(no output directory)";
	if (!options.out_dir.empty()) {
		where = (std::filesystem::path(options.out_dir) / "nan_dump.json").string();
		std::ofstream(where) << dump.dump(2) << "\n";
	}
	throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
	                    "; last-step gradient norms written to " + where);
}

std::string category_name(int c) {
	return c >= 0 && c < static_cast<int>(kShapeNames.size()) ? std::string(kShapeNames[c]) : std::to_string(c);
}

} // namespace

BatchGradient batch_gradient(const BtdNet& net, const std::vector<const Sample*>& batch, std::size_t threads) {
	BatchGradient out;
	out.grads.resize(net.params().size());
	if (threads <= 1) {
		// Summing as each sample finishes matches the ordered reduction below.
		for (const Sample* s : batch) {
			SampleOutcome o = run_sample(net, *s);
			accumulate(out.grads, o.grads);
			out.losses.push_back(o.losses);
			out.masks.push_back(std::move(o.mask));
		}
	} else {
		std::vector<SampleOutcome> outcomes(batch.size());
		parallel_for(batch.size(), threads, [&](std::size_t i) { outcomes[i] = run_sample(net, *batch[i]); });
		for (auto& o : outcomes) {
			accumulate(out.grads, o.grads);
			out.losses.push_back(o.losses);
			out.masks.push_back(std::move(o.mask));
		}
	}
	const double inv = 1.0 / static_cast<double>(batch.size());
	for (auto& g : out.grads)
		for (double& x : g) x *= inv;
	return out;
}

TrainResult train(BtdNet& net, const std::vector<Sample>& data, const TrainOptions& options) {
	const ModelConfig& cfg = net.config();
	if (data.empty()) throw UsageError("train: empty corpus");
	for (const auto& s : data)
		if (s.height != cfg.image_size || s.width != cfg.image_size || s.tokens.size() != cfg.n_tokens)
			throw ConfigError("train: sample " + s.id + " does not match the configured image size / token count");

	const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
	const std::size_t total_steps = steps_per_epoch * cfg.epochs;
	AdamW opt(net.params(), cfg);
	TrainResult result;
	std::size_t start_epoch = 1;

	const std::filesystem::path out_dir(options.out_dir);
	const std::filesystem::path log_path = out_dir / "train_log.jsonl";
	const std::string ckpt_path = (out_dir / "checkpoint").string();

	if (!options.resume.empty()) {
		Checkpoint c = load_checkpoint(options.resume);
		if (!(c.config == cfg)) throw ConfigError("train: checkpoint " + options.resume + " was trained with a different config");
		apply_checkpoint(c, net.params());
		if (!c.optimizer) throw FormatError("train: checkpoint " + options.resume + " has no optimizer state to resume");
		opt.set_state(*c.optimizer);
		result.global_step = c.global_step;
		start_epoch = c.epoch + 1;
		if (!options.out_dir.empty() && std::filesystem::exists(log_path)) {
			std::ifstream in(log_path);
			for (std::string line; std::getline(in, line);) {
				if (line.empty()) continue;
				EpochLog e = EpochLog::from_json(line);
				if (e.epoch <= c.epoch) result.log.push_back(e);
			}
		}
	}

	if (!options.out_dir.empty()) {
		std::filesystem::create_directories(out_dir);
		std::ofstream log(log_path, std::ios::trunc);
		for (const auto& e : result.log) log << e.to_json() << "\n";
	}

	const std::size_t last_epoch = options.stop_after ? std::min(options.stop_after, cfg.epochs) : cfg.epochs;
	std::vector<double> last_norms;
	for (std::size_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
		std::vector<std::size_t> order(data.size());
		for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
		Rng shuffle_rng(cfg.seed, 0x5eed0000ULL + epoch);
		shuffle_rng.shuffle(order.begin(), order.end());

		EpochLog log;
		log.epoch = epoch;
		EvalAccumulator acc;
		for (std::size_t b = 0; b < steps_per_epoch; ++b) {
			std::vector<const Sample*> batch;
			for (std::size_t i = b * cfg.batch_size; i < std::min(data.size(), (b + 1) * cfg.batch_size); ++i)
				batch.push_back(&data[order[i]]);
			BatchGradient bg = batch_gradient(net, batch, options.threads);
			for (std::size_t i = 0; i < batch.size(); ++i) {
				const Losses& l = bg.losses[i];
				if (!std::isfinite(l.total.item())) abort_non_finite(net, options, epoch, result.global_step, last_norms);
				log.l_fg += l.fg.item();
				log.l_bg += l.bg.item();
				log.l_re += l.re.item();
				log.l_ce += l.ce.item();
				log.l_total += l.total.item();
				acc.add(bg.masks[i], batch[i]->gt_mask, category_name(batch[i]->category));
			}
			log.lr_encoder = poly_lr(cfg.lr_encoder, result.global_step, total_steps, cfg.poly_power);
			log.lr_other = poly_lr(cfg.lr_other, result.global_step, total_steps, cfg.poly_power);
			opt.step(net.params(), bg.grads, log.lr_encoder, log.lr_other);
			last_norms = grad_norms(bg.grads);
			++result.global_step;
		}
		const double n = static_cast<double>(data.size());
		log.l_fg /= n;
		log.l_bg /= n;
		log.l_re /= n;
		log.l_ce /= n;
		log.l_total /= n;
		const Report rep = acc.finalize();
		log.train_miou = rep.miou;
		log.train_pr50 = rep.pr[0];
		log.global_step = result.global_step;
		result.log.push_back(log);

		if (!options.out_dir.empty()) {
			save_checkpoint(ckpt_path, snapshot(cfg, net.params(), result.global_step, epoch, &opt.state()));
			std::ofstream(log_path, std::ios::app) << log.to_json() << "\n";
		}
		if (options.on_epoch && !options.on_epoch(log)) break;
	}
	return result;
}

Report evaluate(const BtdNet& net, const std::vector<Sample>& data, std::size_t threads,
                std::vector<std::vector<std::uint8_t>>* masks) {
	std::vector<std::vector<std::uint8_t>> preds(data.size());
	parallel_for(data.size(), threads, [&](std::size_t i) { preds[i] = net.predict(ModelInput::from_sample(data[i])); });
	EvalAccumulator acc;
	for (std::size_t i = 0; i < data.size(); ++i) acc.add(preds[i], data[i].gt_mask, category_name(data[i].category));
	if (masks) *masks = std::move(preds);
	return acc.finalize();
}

} // namespace btd
