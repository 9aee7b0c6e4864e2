#pragma once

// Differentiable primitives. All tensors are dense row-major float64.
// There is no implicit broadcasting: operands of elementwise ops must have
// identical shapes, and the few broadcasts the model needs are spelled out as
// named operations (add_row_vector, add_col_vector, mul_col_vector, mul_scalar).

#include "btd/tensor.hpp"

#include <span>
#include <vector>

namespace btd {

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// x * s where s is a one-element tensor (learnable scalar).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// Named broadcasts over 2-D operands.
/// x[R x C] + b[C] added to every row.
Tensor add_row_vector(const Tensor& x, const Tensor& b);
/// x[R x C] + b[R] added to every column.
Tensor add_col_vector(const Tensor& x, const Tensor& b);
/// x[R x C] * g[R] scaling every column.
Tensor mul_col_vector(const Tensor& x, const Tensor& g);

// Linear algebra and layout.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Columns `index` of a 2-D tensor, in order.
Tensor gather_columns(const Tensor& x, std::span<const std::size_t> index);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of each row of x[R x C]; result is R x 1.
Tensor mean_columns(const Tensor& x);

// Normalization.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes every column of x[D x N] over D, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Normalizes every row of x[C x L] over L (no affine terms).
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

// Spatial / sequence operators.
/// Per-position linear map for x[C x H x W] or x[C x L]; w is Cout x C.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b);
/// x[C x H x W] -> [(H*W) x (k*k*C)], zero padded, channel-major windows.
Tensor unfold2d(const Tensor& x, std::size_t k);
/// x[D x N] -> [N x (k*D)], zero padded ceil((k-1)/2) left, floor right.
Tensor unfold1d(const Tensor& x, std::size_t k);
/// x[D x H x W] -> [D x H' x W'], align_corners=false.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// x[D x N] -> [D x r]; bin j averages columns [floor(jN/r), floor((j+1)N/r)).
Tensor adaptive_avg_pool1d(const Tensor& x, std::size_t r);
/// x[C x H x W] -> [(C*p*p) x H/p x W/p].
Tensor space_to_depth(const Tensor& x, std::size_t p);
/// table[V x D] looked up at ids -> [D x N].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Losses and gradient control.
/// Identity forward, blocks the gradient.
Tensor stop_gradient(const Tensor& x);
/// Mean binary cross-entropy of logits against {0,1} targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
/// Mean of squared differences.
Tensor mse(const Tensor& a, const Tensor& b);

} // namespace btd
