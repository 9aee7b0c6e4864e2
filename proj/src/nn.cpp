#include "btd/nn.hpp"

#include "btd/errors.hpp"

#include <cmath>
#include <limits>

namespace btd {

ParamId ParameterStore::add(std::string name, Shape shape, std::vector<double> init, ParamGroup group, bool decay) {
	if (find(name)) throw UsageError("duplicate parameter name: " + name);
	params_.push_back(Parameter{std::move(name), Tensor(std::move(shape), std::move(init), true), group, decay});
	return params_.size() - 1;
}

std::optional<ParamId> ParameterStore::find(std::string_view name) const {
	for (std::size_t i = 0; i < params_.size(); ++i)
		if (params_[i].name == name) return i;
	return std::nullopt;
}

std::size_t ParameterStore::scalar_count() const {
	std::size_t n = 0;
	for (const auto& p : params_) n += p.value.numel();
	return n;
}

std::string ParamBuilder::full(std::string_view name) const {
	return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
}

ParamBuilder ParamBuilder::sub(std::string_view name) const {
	ParamBuilder b = *this;
	b.prefix_ = full(name);
	return b;
}

ParamBuilder ParamBuilder::with_group(ParamGroup group) const {
	ParamBuilder b = *this;
	b.group_ = group;
	return b;
}

ParamId ParamBuilder::weight(std::string_view name, Shape shape, std::size_t fan_in) {
	return normal(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), true);
}

ParamId ParamBuilder::normal(std::string_view name, Shape shape, double stddev, bool decay) {
	std::vector<double> v(numel(shape));
	for (auto& x : v) x = stddev * rng_->normal();
	return store_->add(full(name), std::move(shape), std::move(v), group_, decay);
}

ParamId ParamBuilder::zeros(std::string_view name, Shape shape) { return constant(name, std::move(shape), 0.0, false); }

ParamId ParamBuilder::constant(std::string_view name, Shape shape, double value, bool decay) {
	std::vector<double> v(numel(shape), value);
	return store_->add(full(name), std::move(shape), std::move(v), group_, decay);
}

const Tensor& Frame::operator[](ParamId id) {
	Tensor& leaf = leaves_.at(id);
	if (!leaf.defined()) leaf = (*store_)[id].value.alias_leaf();
	return leaf;
}

std::span<const double> Frame::grad(ParamId id) const {
	const Tensor& leaf = leaves_.at(id);
	if (!leaf.defined()) return {};
	return leaf.grad();
}

Tensor key_padding_mask(std::size_t nq, const std::vector<bool>& key_valid) {
	const std::size_t nk = key_valid.size();
	std::vector<double> m(nq * nk, 0.0);
	for (std::size_t i = 0; i < nq; ++i)
		for (std::size_t j = 0; j < nk; ++j)
			if (!key_valid[j]) m[i * nk + j] = -std::numeric_limits<double>::infinity();
	return Tensor({nq, nk}, std::move(m));
}

Tensor block_diagonal_mask(std::span<const std::size_t> segment_lengths) {
	std::size_t total = 0;
	std::vector<std::size_t> seg_of;
	for (std::size_t s = 0; s < segment_lengths.size(); ++s) {
		total += segment_lengths[s];
		seg_of.insert(seg_of.end(), segment_lengths[s], s);
	}
	std::vector<double> m(total * total, 0.0);
	for (std::size_t i = 0; i < total; ++i)
		for (std::size_t j = 0; j < total; ++j)
			if (seg_of[i] != seg_of[j]) m[i * total + j] = -std::numeric_limits<double>::infinity();
	return Tensor({total, total}, std::move(m));
}

Linear Linear::make(ParamBuilder& pb, std::string_view name, std::size_t in, std::size_t out) {
	ParamBuilder sub = pb.sub(name);
	Linear l;
	l.in = in;
	l.out = out;
	l.w = sub.weight("weight", {out, in}, in);
	l.b = sub.zeros("bias", {out});
	return l;
}

Tensor Linear::operator()(Frame& f, const Tensor& x) const { return conv1x1(x, f[w], f[b]); }

LayerNorm LayerNorm::make(ParamBuilder& pb, std::string_view name, std::size_t dim) {
	ParamBuilder sub = pb.sub(name);
	LayerNorm n;
	n.gamma = sub.constant("norm_weight", {dim}, 1.0);
	n.beta = sub.zeros("norm_bias", {dim});
	return n;
}

Tensor LayerNorm::operator()(Frame& f, const Tensor& x) const { return layer_norm(x, f[gamma], f[beta]); }

Attention Attention::make(ParamBuilder& pb, std::string_view name, std::size_t q_dim, std::size_t kv_dim,
                          std::size_t model_dim, std::size_t heads) {
	if (heads == 0 || model_dim % heads != 0)
		throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide model dim " +
		                  std::to_string(model_dim));
	ParamBuilder sub = pb.sub(name);
	Attention a;
	a.heads = heads;
	a.q = Linear::make(sub, "q", q_dim, model_dim);
	a.k = Linear::make(sub, "k", kv_dim, model_dim);
	a.v = Linear::make(sub, "v", kv_dim, model_dim);
	a.o = Linear::make(sub, "o", model_dim, q_dim);
	return a;
}

Tensor Attention::operator()(Frame& f, const Tensor& query, const Tensor& context, const Tensor* mask,
                             std::vector<Tensor>* weights) const {
	Tensor qp = q(f, query);
	Tensor kp = k(f, context);
	Tensor vp = v(f, context);
	const std::size_t model_dim = qp.dim(0);
	const std::size_t head_dim = model_dim / heads;
	const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
	std::vector<Tensor> outs;
	outs.reserve(heads);
	for (std::size_t h = 0; h < heads; ++h) {
		Tensor qh = heads == 1 ? qp : slice(qp, 0, h * head_dim, head_dim);
		Tensor kh = heads == 1 ? kp : slice(kp, 0, h * head_dim, head_dim);
		Tensor vh = heads == 1 ? vp : slice(vp, 0, h * head_dim, head_dim);
		Tensor scores = scale(matmul(transpose(qh), kh), inv_scale);
		if (mask) scores = add(scores, *mask);
		Tensor attn = softmax(scores, 1);
		if (weights) weights->push_back(attn);
		outs.push_back(matmul(vh, transpose(attn)));
	}
	Tensor merged = heads == 1 ? outs[0] : concat(outs, 0);
	return o(f, merged);
}

Mlp Mlp::make(ParamBuilder& pb, std::string_view name, std::size_t dim, std::size_t hidden) {
	ParamBuilder sub = pb.sub(name);
	Mlp m;
	m.fc1 = Linear::make(sub, "fc1", dim, hidden);
	m.fc2 = Linear::make(sub, "fc2", hidden, dim);
	return m;
}

Tensor Mlp::operator()(Frame& f, const Tensor& x) const { return fc2(f, gelu(fc1(f, x))); }

TransformerBlock TransformerBlock::make(ParamBuilder& pb, std::string_view name, std::size_t dim,
                                        std::size_t heads, std::size_t mlp_hidden) {
	ParamBuilder sub = pb.sub(name);
	TransformerBlock b;
	b.ln1 = LayerNorm::make(sub, "ln1", dim);
	b.attn = Attention::make(sub, "attn", dim, dim, dim, heads);
	b.ln2 = LayerNorm::make(sub, "ln2", dim);
	b.mlp = Mlp::make(sub, "mlp", dim, mlp_hidden);
	return b;
}

Tensor TransformerBlock::operator()(Frame& f, const Tensor& x, const Tensor* mask,
                                    std::vector<Tensor>* weights) const {
	Tensor n1 = ln1(f, x);
	Tensor h = add(x, attn(f, n1, n1, mask, weights));
	return add(h, mlp(f, ln2(f, h)));
}

} // namespace btd
