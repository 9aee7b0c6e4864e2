#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace btd {

/// Every architecture and training hyperparameter. Serialized as one flat
/// JSON object; unknown keys are rejected on load.
struct ModelConfig {
	// Encoders.
	std::size_t image_size = 64;
	std::size_t patch_size = 4;
	std::size_t c1 = 32;
	std::size_t d_model = 64;
	std::size_t n_tokens = 20;
	std::size_t heads = 4;
	std::size_t text_layers_per_stage = 1;
	std::size_t mlp_ratio = 2;
	std::size_t vocab_size = 0; // 0: take the size of the standard vocabulary

	// Bidirectional spatial correlation.
	std::vector<std::size_t> k_vision{1, 3, 5};
	std::vector<std::size_t> k_text{1, 2, 3};
	std::array<bool, 4> bsc_stages{true, true, true, true};
	double gate_init = 0.0;

	// Decoder and losses.
	std::size_t mci_iters = 2;
	std::vector<std::size_t> bg_pool{1, 4};
	bool use_bg_branch = true;
	double lambda = 0.6;
	double eta = 0.1;

	// Optimization.
	double lr_encoder = 1e-5;
	double lr_other = 1e-4;
	double poly_power = 0.9;
	double weight_decay = 0.01;
	double adam_beta1 = 0.9;
	double adam_beta2 = 0.999;
	double adam_eps = 1e-8;
	std::size_t epochs = 300;
	std::size_t batch_size = 8;
	std::uint64_t seed = 0;

	std::size_t stage_channels(std::size_t stage) const { return c1 << (stage - 1); }
	std::size_t stage_extent(std::size_t stage) const { return image_size / patch_size >> (stage - 1); }
	std::size_t bg_tokens() const;
	std::size_t resolved_vocab_size() const;

	/// Throws ConfigError naming the violated constraint.
	void validate() const;

	std::string to_json() const;
	static ModelConfig from_json(const std::string& text);
	static ModelConfig load(const std::string& path);
	void save(const std::string& path) const;

	/// Tiny configuration used for end-to-end finite-difference checks.
	static ModelConfig micro();

	bool operator==(const ModelConfig&) const = default;
};

} // namespace btd
