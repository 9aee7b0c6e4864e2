#include "btd/gradcheck.hpp"

#include "btd/model.hpp"
#include "btd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace btd {

double relative_error(double analytic, double numeric, double floor) {
	const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
	return std::abs(analytic - numeric) / denom;
}

namespace {

double batch_loss(const BtdNet& net, const std::vector<ModelInput>& inputs, Frame* keep = nullptr) {
	Frame local(net.params());
	Frame& f = keep ? *keep : local;
	Tensor total;
	for (const auto& in : inputs) {
		Tensor l = net.forward(f, in).losses.total;
		total = total.defined() ? add(total, l) : l;
	}
	total = scale(total, 1.0 / static_cast<double>(inputs.size()));
	if (keep) total.backward();
	return total.item();
}

std::string module_of(const std::string& name) { return name.substr(0, name.find('.')); }

} // namespace

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
	BtdNet net(config);
	GenConfig g;
	g.image_size = config.image_size;
	g.n_tokens = config.n_tokens;
	g.count = std::max<std::size_t>(1, options.batch);
	g.seed = options.seed;
	std::vector<ModelInput> inputs;
	for (const auto& s : generate_corpus(g)) inputs.push_back(ModelInput::from_sample(s));
	// L_0 enters the loss only as a constant; freeze it at the unperturbed value.
	for (auto& in : inputs) {
		Frame f0(net.params());
		in.reconstruction_target = stop_gradient(net.text().encode(f0, in.tokens));
	}

	Frame f(net.params());
	batch_loss(net, inputs, &f);

	ParameterStore& store = net.params();
	const std::size_t n_tensors = store.size();
	const std::size_t per_tensor = std::max<std::size_t>(1, (options.min_scalars + n_tensors - 1) / n_tensors);
	Rng rng(options.seed, 0x67c4ULL);

	GradcheckReport report;
	report.tensors = n_tensors;
	std::set<std::string> failing;
	for (ParamId id = 0; id < n_tensors; ++id) {
		Parameter& p = store[id];
		const std::size_t n = p.value.numel();
		std::vector<std::size_t> idx(n);
		for (std::size_t i = 0; i < n; ++i) idx[i] = i;
		rng.shuffle(idx.begin(), idx.end());
		idx.resize(std::min(n, per_tensor));
		std::sort(idx.begin(), idx.end());

		auto grad = f.grad(id);
		for (std::size_t k : idx) {
			double analytic = grad.empty() ? 0.0 : grad[k];
			if (p.name == options.corrupt) analytic *= 1.5;
			auto w = p.value.mutable_data();
			const double orig = w[k];
			w[k] = orig + options.epsilon;
			const double up = batch_loss(net, inputs);
			w[k] = orig - options.epsilon;
			const double down = batch_loss(net, inputs);
			w[k] = orig;
			const double numeric = (up - down) / (2.0 * options.epsilon);
			GradcheckEntry e{p.name, k, analytic, numeric, relative_error(analytic, numeric, options.floor)};
			double& worst = report.module_worst[module_of(p.name)];
			worst = std::max(worst, e.rel_err);
			if (report.worst_param.empty() || e.rel_err > report.max_rel_err) {
				report.max_rel_err = e.rel_err;
				report.worst_param = p.name;
			}
			if (e.rel_err > options.tolerance) failing.insert(p.name);
			report.entries.push_back(std::move(e));
		}
	}
	report.failing.assign(failing.begin(), failing.end());
	report.pass = report.max_rel_err <= options.tolerance;
	return report;
}

std::string GradcheckReport::to_text() const {
	std::ostringstream os;
	char line[200];
	std::snprintf(line, sizeof line, "gradcheck: %zu scalars over %zu tensors, max rel err %.3e (%s) -> %s\n",
	              entries.size(), tensors, max_rel_err, worst_param.c_str(), pass ? "PASS" : "FAIL");
	os << line;
	for (const auto& [module, worst] : module_worst) {
		std::snprintf(line, sizeof line, "  %-10s worst rel err %.3e\n", module.c_str(), worst);
		os << line;
	}
	for (const auto& name : failing) os << "  failing parameter: " << name << "\n";
	return os.str();
}

std::string GradcheckReport::to_json() const {
	nlohmann::ordered_json j;
	j["pass"] = pass;
	j["max_rel_err"] = max_rel_err;
	j["worst_param"] = worst_param;
	j["scalars"] = entries.size();
	j["tensors"] = tensors;
	j["module_worst"] = module_worst;
	j["failing"] = failing;
	return j.dump(2) + "\n";
}

} // namespace btd
