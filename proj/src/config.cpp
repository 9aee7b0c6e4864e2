#include "btd/config.hpp"

#include "btd/errors.hpp"
#include "btd/synthdata.hpp"

#include <json.hpp>

#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace btd {

using nlohmann::json;

std::size_t ModelConfig::bg_tokens() const { return std::accumulate(bg_pool.begin(), bg_pool.end(), std::size_t{0}); }

std::size_t ModelConfig::resolved_vocab_size() const {
	return vocab_size != 0 ? vocab_size : Vocabulary::standard().size();
}

void ModelConfig::validate() const {
	auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
	if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
	if (image_size % (patch_size * 8) != 0) fail("image_size must be divisible by patch_size * 8");
	if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
	if (c1 % heads != 0) fail("c1 must be divisible by heads");
	if (n_tokens < 2) fail("n_tokens must be >= 2");
	if (mlp_ratio == 0 || text_layers_per_stage == 0) fail("mlp_ratio and text_layers_per_stage must be >= 1");
	if (k_vision.empty() || k_text.empty()) fail("receptive-field lists must be non-empty");
	for (auto k : k_vision)
		if (k % 2 == 0) fail("vision receptive fields must be odd");
	for (auto k : k_text)
		if (k == 0 || k > n_tokens + 2) fail("text receptive fields must lie in [1, n_tokens + 2]");
	if (mci_iters < 1) fail("mci_iters must be >= 1");
	if (bg_pool.empty()) fail("bg_pool must be non-empty");
	for (auto r : bg_pool)
		if (r < 1 || r > n_tokens) fail("bg_pool bins must lie in [1, n_tokens]");
	if (lambda < 0 || lambda > 1) fail("lambda must lie in [0, 1]");
	if (eta < 0) fail("eta must be non-negative");
	if (batch_size == 0 || epochs == 0) fail("batch_size and epochs must be >= 1");
	if (resolved_vocab_size() < Vocabulary::standard().size()) fail("vocab_size smaller than the standard vocabulary");
}

std::string ModelConfig::to_json() const {
	json j;
	j["image_size"] = image_size;
	j["patch_size"] = patch_size;
	j["c1"] = c1;
	j["d_model"] = d_model;
	j["n_tokens"] = n_tokens;
	j["heads"] = heads;
	j["text_layers_per_stage"] = text_layers_per_stage;
	j["mlp_ratio"] = mlp_ratio;
	j["vocab_size"] = vocab_size;
	j["k_vision"] = k_vision;
	j["k_text"] = k_text;
	j["bsc_stages"] = bsc_stages;
	j["gate_init"] = gate_init;
	j["mci_iters"] = mci_iters;
	j["bg_pool"] = bg_pool;
	j["use_bg_branch"] = use_bg_branch;
	j["lambda"] = lambda;
	j["eta"] = eta;
	j["lr_encoder"] = lr_encoder;
	j["lr_other"] = lr_other;
	j["poly_power"] = poly_power;
	j["weight_decay"] = weight_decay;
	j["adam_beta1"] = adam_beta1;
	j["adam_beta2"] = adam_beta2;
	j["adam_eps"] = adam_eps;
	j["epochs"] = epochs;
	j["batch_size"] = batch_size;
	j["seed"] = seed;
	return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
	json j;
	try {
		j = json::parse(text);
	} catch (const json::parse_error& e) {
		throw ConfigError(std::string("config: invalid JSON: ") + e.what());
	}
	if (!j.is_object()) throw ConfigError("config: top level must be an object");
	ModelConfig c;
	auto read = [&](const char* key, auto& field) {
		if (!j.contains(key)) return;
		try {
			j.at(key).get_to(field);
		} catch (const json::exception& e) {
			throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
		}
	};
	static const std::set<std::string> known = {
	    "image_size", "patch_size", "c1",         "d_model",      "n_tokens",   "heads",      "text_layers_per_stage",
	    "mlp_ratio",  "vocab_size", "k_vision",   "k_text",       "bsc_stages", "gate_init",  "mci_iters",
	    "bg_pool",    "use_bg_branch", "lambda",  "eta",          "lr_encoder", "lr_other",   "poly_power",
	    "weight_decay", "adam_beta1", "adam_beta2", "adam_eps",   "epochs",     "batch_size", "seed"};
	for (auto it = j.begin(); it != j.end(); ++it)
		if (!known.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "'");
	read("image_size", c.image_size);
	read("patch_size", c.patch_size);
	read("c1", c.c1);
	read("d_model", c.d_model);
	read("n_tokens", c.n_tokens);
	read("heads", c.heads);
	read("text_layers_per_stage", c.text_layers_per_stage);
	read("mlp_ratio", c.mlp_ratio);
	read("vocab_size", c.vocab_size);
	read("k_vision", c.k_vision);
	read("k_text", c.k_text);
	read("bsc_stages", c.bsc_stages);
	read("gate_init", c.gate_init);
	read("mci_iters", c.mci_iters);
	read("bg_pool", c.bg_pool);
	read("use_bg_branch", c.use_bg_branch);
	read("lambda", c.lambda);
	read("eta", c.eta);
	read("lr_encoder", c.lr_encoder);
	read("lr_other", c.lr_other);
	read("poly_power", c.poly_power);
	read("weight_decay", c.weight_decay);
	read("adam_beta1", c.adam_beta1);
	read("adam_beta2", c.adam_beta2);
	read("adam_eps", c.adam_eps);
	read("epochs", c.epochs);
	read("batch_size", c.batch_size);
	read("seed", c.seed);
	c.validate();
	return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
	std::ifstream in(path);
	if (!in) throw ConfigError("config: cannot open " + path);
	std::stringstream ss;
	ss << in.rdbuf();
	return from_json(ss.str());
}

void ModelConfig::save(const std::string& path) const {
	std::ofstream out(path, std::ios::binary);
	if (!out) throw ConfigError("config: cannot write " + path);
	out << to_json() << '\n';
}

ModelConfig ModelConfig::micro() {
	ModelConfig c;
	c.image_size = 16;
	c.patch_size = 1;
	c.c1 = 4;
	c.d_model = 8;
	c.n_tokens = 5;
	c.heads = 2;
	c.mci_iters = 2;
	c.bg_pool = {1, 4};
	c.gate_init = 0.5;
	return c;
}

} // namespace btd
