#pragma once

#include "btd/ops.hpp"
#include "btd/rng.hpp"
#include "btd/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace btd {

/// Optimizer partition: backbone encoders train at a lower rate than the
/// fusion and decoding modules.
enum class ParamGroup { encoder, other };

using ParamId = std::size_t;

struct Parameter {
	std::string name;
	Tensor value;
	ParamGroup group = ParamGroup::other;
	bool decay = true;
};

class ParameterStore {
public:
	ParamId add(std::string name, Shape shape, std::vector<double> init, ParamGroup group, bool decay);

	const Parameter& operator[](ParamId id) const { return params_.at(id); }
	Parameter& operator[](ParamId id) { return params_.at(id); }
	std::size_t size() const { return params_.size(); }
	std::optional<ParamId> find(std::string_view name) const;
	std::size_t scalar_count() const;

	auto begin() const { return params_.begin(); }
	auto end() const { return params_.end(); }

private:
	std::vector<Parameter> params_;
};

/// Creates parameters under a dotted name prefix with deterministic init.
class ParamBuilder {
public:
	ParamBuilder(ParameterStore& store, Rng& rng, ParamGroup group, std::string prefix)
	    : store_(&store), rng_(&rng), group_(group), prefix_(std::move(prefix)) {}

	ParamBuilder sub(std::string_view name) const;
	ParamBuilder with_group(ParamGroup group) const;

	/// Normal(0, 1/sqrt(fan_in)).
	ParamId weight(std::string_view name, Shape shape, std::size_t fan_in);
	ParamId normal(std::string_view name, Shape shape, double stddev, bool decay = true);
	ParamId zeros(std::string_view name, Shape shape);
	ParamId constant(std::string_view name, Shape shape, double value, bool decay = false);

	const std::string& prefix() const { return prefix_; }

private:
	std::string full(std::string_view name) const;

	ParameterStore* store_;
	Rng* rng_;
	ParamGroup group_;
	std::string prefix_;
};

/// Binds parameters into one computation graph. Each bound parameter is a
/// fresh leaf over the shared storage, so graphs built concurrently on
/// different threads keep separate gradients.
class Frame {
public:
	explicit Frame(const ParameterStore& store) : store_(&store), leaves_(store.size()) {}

	const Tensor& operator[](ParamId id);
	bool bound(ParamId id) const { return leaves_.at(id).defined(); }
	/// Empty when the parameter was never bound or received no gradient.
	std::span<const double> grad(ParamId id) const;
	const ParameterStore& store() const { return *store_; }

private:
	const ParameterStore* store_;
	std::vector<Tensor> leaves_;
};

/// Additive attention mask [nq x nk]: 0 where key is valid, -inf otherwise.
Tensor key_padding_mask(std::size_t nq, const std::vector<bool>& key_valid);
/// Additive mask letting positions attend only within their own segment.
Tensor block_diagonal_mask(std::span<const std::size_t> segment_lengths);

struct Linear {
	ParamId w = 0, b = 0;
	std::size_t in = 0, out = 0;

	static Linear make(ParamBuilder& pb, std::string_view name, std::size_t in, std::size_t out);
	/// x[in x N] -> [out x N].
	Tensor operator()(Frame& f, const Tensor& x) const;
};

struct LayerNorm {
	ParamId gamma = 0, beta = 0;

	static LayerNorm make(ParamBuilder& pb, std::string_view name, std::size_t dim);
	Tensor operator()(Frame& f, const Tensor& x) const;
};

/// Multi-head scaled dot-product attention with features stored as columns.
struct Attention {
	Linear q, k, v, o;
	std::size_t heads = 1;

	static Attention make(ParamBuilder& pb, std::string_view name, std::size_t q_dim, std::size_t kv_dim,
	                      std::size_t model_dim, std::size_t heads);
	/// query[Dq x Nq], context[Dk x Nk] -> [Dq x Nq]. `mask` is additive
	/// [Nq x Nk]; `weights`, if given, receives one Nq x Nk matrix per head.
	Tensor operator()(Frame& f, const Tensor& query, const Tensor& context, const Tensor* mask = nullptr,
	                  std::vector<Tensor>* weights = nullptr) const;
};

struct Mlp {
	Linear fc1, fc2;

	static Mlp make(ParamBuilder& pb, std::string_view name, std::size_t dim, std::size_t hidden);
	Tensor operator()(Frame& f, const Tensor& x) const;
};

/// Pre-norm self-attention + MLP block with residuals.
struct TransformerBlock {
	LayerNorm ln1, ln2;
	Attention attn;
	Mlp mlp;

	static TransformerBlock make(ParamBuilder& pb, std::string_view name, std::size_t dim, std::size_t heads,
	                             std::size_t mlp_hidden);
	Tensor operator()(Frame& f, const Tensor& x, const Tensor* mask = nullptr,
	                  std::vector<Tensor>* weights = nullptr) const;
};

} // namespace btd
