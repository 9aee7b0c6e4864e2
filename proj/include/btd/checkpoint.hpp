#pragma once

// Checkpoint = <stem>.json manifest + <stem>.bin payload of little-endian
// float64 values. The manifest records the format version, the full config,
// a name/shape/offset table for every parameter, and the training position.

#include "btd/config.hpp"
#include "btd/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace btd {

inline constexpr const char* kCheckpointFormat = "btd-ckpt-1";

/// Adam moments, one vector per parameter in store order.
struct OptimizerState {
	std::size_t step = 0;
	std::vector<std::vector<double>> m, v;
};

struct CheckpointTensor {
	std::string name;
	Shape shape;
	std::vector<double> values;
};

struct Checkpoint {
	ModelConfig config;
	std::size_t global_step = 0;
	std::size_t epoch = 0;
	std::vector<CheckpointTensor> params;
	std::optional<OptimizerState> optimizer;
};

/// Accepts "dir/name", "dir/name.json" or "dir/name.bin" and returns "dir/name".
std::string checkpoint_stem(const std::string& path);

Checkpoint snapshot(const ModelConfig& config, const ParameterStore& store, std::size_t global_step, std::size_t epoch,
                    const OptimizerState* optimizer = nullptr);

/// Writes both files; the manifest is renamed into place last.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws FormatError for a wrong version, a truncated payload or a bad table.
Checkpoint load_checkpoint(const std::string& path);

/// Copies values into `store`. Every store parameter must appear exactly once
/// with a matching shape, otherwise FormatError names the mismatch.
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store);

} // namespace btd
