#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace btd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

/// One vertex of the reverse-mode graph. Storage is shared so that several
/// leaves (one per concurrently built graph) can view the same parameter
/// values while keeping private gradient buffers.
struct Node {
	Shape shape;
	std::shared_ptr<std::vector<double>> storage;
	std::vector<double> grad;
	bool requires_grad = false;
	std::vector<std::shared_ptr<Node>> inputs;
	// Reads `self.grad` and accumulates into the gradients of `self.inputs`.
	std::function<void(Node& self)> backward;
};

} // namespace detail

class Tensor {
public:
	Tensor() = default;
	Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

	static Tensor zeros(Shape shape, bool requires_grad = false);
	static Tensor full(Shape shape, double value, bool requires_grad = false);
	static Tensor scalar(double value, bool requires_grad = false);

	bool defined() const { return node_ != nullptr; }
	const Shape& shape() const;
	std::size_t rank() const { return shape().size(); }
	std::size_t dim(std::size_t axis) const;
	std::size_t numel() const;

	std::span<const double> data() const;
	/// Writes go straight to the shared storage; every alias observes them.
	std::span<double> mutable_data();
	double item() const;
	double at(std::initializer_list<std::size_t> index) const;

	bool requires_grad() const;
	bool has_grad() const;
	/// Empty span when no gradient has been accumulated.
	std::span<const double> grad() const;
	std::span<double> mutable_grad();
	void zero_grad();

	/// New constant tensor over the same storage.
	Tensor detach() const;
	/// New gradient-requiring leaf over the same storage with its own grad.
	Tensor alias_leaf() const;
	/// Deep copy of the values into fresh storage.
	Tensor clone() const;

	/// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
	/// intermediate gradients are recomputed each call.
	void backward() const;

	detail::Node* node() const { return node_.get(); }
	const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

	/// Result of an operation. When no input requires a gradient the graph
	/// edge and backward closure are dropped.
	static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
	                          std::function<void(detail::Node&)> backward);

private:
	explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
	std::shared_ptr<detail::Node> node_;
};

/// Gradient buffer of an input, allocated on first use; null if the input
/// does not take part in differentiation.
double* grad_target(detail::Node& input);

} // namespace btd
