#include "btd/tensor.hpp"

#include "btd/errors.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace btd {

std::size_t numel(const Shape& shape) {
	return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
	std::ostringstream os;
	os << '[';
	for (std::size_t i = 0; i < shape.size(); ++i) {
		if (i) os << 'x';
		os << shape[i];
	}
	os << ']';
	return os.str();
}

namespace {

void check_shape(const Shape& shape) {
	if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
	for (auto e : shape)
		if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
}

} // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
	check_shape(shape);
	if (values.size() != btd::numel(shape))
		throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
		                     to_string(shape));
	node_ = std::make_shared<detail::Node>();
	node_->shape = std::move(shape);
	node_->storage = std::make_shared<std::vector<double>>(std::move(values));
	node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
	std::size_t n = btd::numel(shape);
	return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
	if (!node_) throw UsageError("undefined tensor");
	return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
	const auto& s = shape();
	if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
	return s[axis];
}

std::size_t Tensor::numel() const { return btd::numel(shape()); }

std::span<const double> Tensor::data() const {
	if (!node_) throw UsageError("undefined tensor");
	return {node_->storage->data(), node_->storage->size()};
}

std::span<double> Tensor::mutable_data() {
	if (!node_) throw UsageError("undefined tensor");
	return {node_->storage->data(), node_->storage->size()};
}

double Tensor::item() const {
	if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
	return (*node_->storage)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
	const auto& s = shape();
	if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + to_string(s));
	std::size_t flat = 0;
	std::size_t a = 0;
	for (auto i : index) {
		if (i >= s[a]) throw DimensionError("index out of range for " + to_string(s));
		flat = flat * s[a] + i;
		++a;
	}
	return (*node_->storage)[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
	if (!node_) throw UsageError("undefined tensor");
	return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::mutable_grad() {
	if (!node_) throw UsageError("undefined tensor");
	return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
	if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
	auto n = std::make_shared<detail::Node>();
	n->shape = shape();
	n->storage = node_->storage;
	return Tensor(std::move(n));
}

Tensor Tensor::alias_leaf() const {
	auto n = std::make_shared<detail::Node>();
	n->shape = shape();
	n->storage = node_->storage;
	n->requires_grad = true;
	return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
	return Tensor(shape(), std::vector<double>(data().begin(), data().end()), requires_grad());
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward) {
	Tensor out(std::move(shape), std::move(values));
	bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
	if (any) {
		out.node_->requires_grad = true;
		out.node_->inputs.reserve(inputs.size());
		for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
		out.node_->backward = std::move(backward);
	}
	return out;
}

double* grad_target(detail::Node& input) {
	if (!input.requires_grad) return nullptr;
	if (input.grad.empty()) input.grad.assign(input.storage->size(), 0.0);
	return input.grad.data();
}

void Tensor::backward() const {
	if (!node_) throw UsageError("backward() on undefined tensor");
	if (numel() != 1) throw UsageError("backward() requires a scalar loss, got shape " + to_string(shape()));
	if (!node_->requires_grad) return;

	// Iterative post-order DFS; `order` ends up topologically sorted with the
	// loss last.
	std::vector<detail::Node*> order;
	std::unordered_set<detail::Node*> visited;
	std::vector<std::pair<detail::Node*, std::size_t>> stack;
	stack.emplace_back(node_.get(), 0);
	visited.insert(node_.get());
	while (!stack.empty()) {
		auto& [n, next] = stack.back();
		if (next < n->inputs.size()) {
			detail::Node* child = n->inputs[next++].get();
			if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
		} else {
			order.push_back(n);
			stack.pop_back();
		}
	}

	for (auto* n : order)
		if (n->backward) n->grad.assign(n->storage->size(), 0.0);
	double* seed = grad_target(*node_);
	seed[0] += 1.0;

	for (auto it = order.rbegin(); it != order.rend(); ++it) {
		detail::Node* n = *it;
		if (n->backward) n->backward(*n);
	}
}

} // namespace btd
