#include "btd/ops.hpp"

#include "btd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace btd {

using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
	if (a.shape() != b.shape())
		throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
		                     to_string(b.shape()));
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
	if (x.rank() != rank)
		throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
		                     to_string(x.shape()));
}

const double* in_data(const Node& self, std::size_t i) { return self.inputs[i]->storage->data(); }

struct AxisSplit {
	std::size_t outer = 1, mid = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
	AxisSplit r;
	for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
	r.mid = s[axis];
	for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
	return r;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
	auto xd = x.data();
	std::vector<double> out(xd.size());
	for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
	return Tensor::make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
		double* gx = grad_target(*self.inputs[0]);
		if (!gx) return;
		const double* xv = in_data(self, 0);
		const double* yv = self.storage->data();
		for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], yv[i]);
	});
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "add");
	auto ad = a.data(), bd = b.data();
	std::vector<double> out(ad.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
	return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
		for (std::size_t k = 0; k < 2; ++k)
			if (double* g = grad_target(*self.inputs[k]))
				for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
	});
}

Tensor sub(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "sub");
	auto ad = a.data(), bd = b.data();
	std::vector<double> out(ad.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
	return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
	});
}

Tensor mul(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "mul");
	auto ad = a.data(), bd = b.data();
	std::vector<double> out(ad.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
	return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
		const double* av = in_data(self, 0);
		const double* bv = in_data(self, 1);
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
	});
}

Tensor scale(const Tensor& x, double factor) {
	auto xd = x.data();
	std::vector<double> out(xd.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
	return Tensor::make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
	});
}

Tensor add_scalar(const Tensor& x, double offset) {
	auto xd = x.data();
	std::vector<double> out(xd.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + offset;
	return Tensor::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
	});
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
	if (s.numel() != 1) throw DimensionError("mul_scalar: scalar operand has shape " + to_string(s.shape()));
	auto xd = x.data();
	double sv = s.item();
	std::vector<double> out(xd.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * sv;
	return Tensor::make_result(x.shape(), std::move(out), {x, s}, [](Node& self) {
		const double* xv = in_data(self, 0);
		double sv = in_data(self, 1)[0];
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
		if (double* g = grad_target(*self.inputs[1])) {
			double acc = 0.0;
			for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
			g[0] += acc;
		}
	});
}

Tensor sigmoid(const Tensor& x) {
	return unary(
	    x,
	    [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
	    [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
	constexpr double inv_sqrt2 = 0.70710678118654752440;
	const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
	return unary(
	    x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
	    [inv_sqrt_2pi](double v, double) {
		    return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
	    });
}

Tensor relu(const Tensor& x) {
	return unary(
	    x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor add_row_vector(const Tensor& x, const Tensor& b) {
	require_rank(x, 2, "add_row_vector");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	if (b.numel() != cols)
		throw DimensionError("add_row_vector: " + to_string(x.shape()) + " with " + to_string(b.shape()));
	auto xd = x.data(), bd = b.data();
	std::vector<double> out(xd.size());
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xd[r * cols + c] + bd[c];
	return Tensor::make_result(x.shape(), std::move(out), {x, b}, [rows, cols](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t r = 0; r < rows; ++r)
				for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
	});
}

Tensor add_col_vector(const Tensor& x, const Tensor& b) {
	require_rank(x, 2, "add_col_vector");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	if (b.numel() != rows)
		throw DimensionError("add_col_vector: " + to_string(x.shape()) + " with " + to_string(b.shape()));
	auto xd = x.data(), bd = b.data();
	std::vector<double> out(xd.size());
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xd[r * cols + c] + bd[r];
	return Tensor::make_result(x.shape(), std::move(out), {x, b}, [rows, cols](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t r = 0; r < rows; ++r) {
				double acc = 0.0;
				for (std::size_t c = 0; c < cols; ++c) acc += self.grad[r * cols + c];
				g[r] += acc;
			}
	});
}

Tensor mul_col_vector(const Tensor& x, const Tensor& gvec) {
	require_rank(x, 2, "mul_col_vector");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	if (gvec.numel() != rows)
		throw DimensionError("mul_col_vector: " + to_string(x.shape()) + " with " + to_string(gvec.shape()));
	auto xd = x.data(), gd = gvec.data();
	std::vector<double> out(xd.size());
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xd[r * cols + c] * gd[r];
	return Tensor::make_result(x.shape(), std::move(out), {x, gvec}, [rows, cols](Node& self) {
		const double* xv = in_data(self, 0);
		const double* gv = in_data(self, 1);
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t r = 0; r < rows; ++r)
				for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c] * gv[r];
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t r = 0; r < rows; ++r) {
				double acc = 0.0;
				for (std::size_t c = 0; c < cols; ++c) acc += self.grad[r * cols + c] * xv[r * cols + c];
				g[r] += acc;
			}
	});
}

namespace {

// C[m x n] += A[m x p] * B[p x n], all row-major. The k loop is unrolled by
// four so each pass over a row of C feeds four rows of B.
void gemm_acc(const double* __restrict A, const double* __restrict B, double* __restrict C, std::size_t m,
              std::size_t p, std::size_t n) {
	for (std::size_t i = 0; i < m; ++i) {
		double* __restrict c = C + i * n;
		const double* a = A + i * p;
		std::size_t k = 0;
		for (; k + 4 <= p; k += 4) {
			const double a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
			const double* b0 = B + k * n;
			const double* b1 = b0 + n;
			const double* b2 = b1 + n;
			const double* b3 = b2 + n;
			for (std::size_t j = 0; j < n; ++j) c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
		}
		for (; k < p; ++k) {
			const double ak = a[k];
			const double* b = B + k * n;
			for (std::size_t j = 0; j < n; ++j) c[j] += ak * b[j];
		}
	}
}

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
	std::vector<double> out(rows * cols);
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
	return out;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
	if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
		throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
	const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
	std::vector<double> out(m * n, 0.0);
	gemm_acc(a.data().data(), b.data().data(), out.data(), m, p, n);
	return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, p, n](Node& self) {
		const double* G = self.grad.data();
		// dA = G * B^T
		if (double* gA = grad_target(*self.inputs[0])) {
			const std::vector<double> bt = transposed(in_data(self, 1), p, n);
			gemm_acc(G, bt.data(), gA, m, n, p);
		}
		// dB = A^T * G
		if (double* gB = grad_target(*self.inputs[1])) {
			const std::vector<double> at = transposed(in_data(self, 0), m, p);
			gemm_acc(at.data(), G, gB, p, m, n);
		}
	});
}

Tensor transpose(const Tensor& x) {
	require_rank(x, 2, "transpose");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	auto xd = x.data();
	std::vector<double> out(xd.size());
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xd[r * cols + c];
	return Tensor::make_result({cols, rows}, std::move(out), {x}, [rows, cols](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t r = 0; r < rows; ++r)
				for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c * rows + r];
	});
}

Tensor reshape(const Tensor& x, Shape shape) {
	if (numel(shape) != x.numel())
		throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
	auto xd = x.data();
	return Tensor::make_result(std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x}, [](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
	});
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
	if (parts.empty()) throw UsageError("concat: no inputs");
	const Shape& s0 = parts[0].shape();
	if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + to_string(s0));
	Shape out_shape = s0;
	out_shape[axis] = 0;
	std::vector<std::size_t> mids;
	for (const auto& t : parts) {
		const Shape& s = t.shape();
		bool ok = s.size() == s0.size();
		for (std::size_t i = 0; ok && i < s.size(); ++i)
			if (i != axis && s[i] != s0[i]) ok = false;
		if (!ok) throw DimensionError("concat: incompatible shapes " + to_string(s0) + " and " + to_string(s));
		mids.push_back(s[axis]);
		out_shape[axis] += s[axis];
	}
	const AxisSplit sp = split_at(out_shape, axis);
	std::vector<double> out(numel(out_shape));
	std::size_t offset = 0;
	for (std::size_t k = 0; k < parts.size(); ++k) {
		auto pd = parts[k].data();
		const std::size_t block = mids[k] * sp.inner;
		for (std::size_t o = 0; o < sp.outer; ++o)
			std::copy_n(pd.data() + o * block, block, out.data() + o * sp.mid * sp.inner + offset * sp.inner);
		offset += mids[k];
	}
	return Tensor::make_result(out_shape, std::move(out), parts, [sp, mids](Node& self) {
		std::size_t offset = 0;
		for (std::size_t k = 0; k < mids.size(); ++k) {
			const std::size_t block = mids[k] * sp.inner;
			if (double* g = grad_target(*self.inputs[k]))
				for (std::size_t o = 0; o < sp.outer; ++o) {
					const double* src = self.grad.data() + o * sp.mid * sp.inner + offset * sp.inner;
					for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
				}
			offset += mids[k];
		}
	});
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
	const Shape& s = x.shape();
	if (axis >= s.size() || length == 0 || start + length > s[axis])
		throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
		                     ") on axis " + std::to_string(axis) + " of " + to_string(s));
	const AxisSplit sp = split_at(s, axis);
	Shape out_shape = s;
	out_shape[axis] = length;
	auto xd = x.data();
	std::vector<double> out(numel(out_shape));
	const std::size_t block = length * sp.inner;
	for (std::size_t o = 0; o < sp.outer; ++o)
		std::copy_n(xd.data() + o * sp.mid * sp.inner + start * sp.inner, block, out.data() + o * block);
	return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [sp, start, block](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t o = 0; o < sp.outer; ++o) {
				double* dst = g + o * sp.mid * sp.inner + start * sp.inner;
				for (std::size_t i = 0; i < block; ++i) dst[i] += self.grad[o * block + i];
			}
	});
}

Tensor gather_columns(const Tensor& x, std::span<const std::size_t> index) {
	require_rank(x, 2, "gather_columns");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	if (index.empty()) throw DimensionError("gather_columns: empty index");
	for (auto c : index)
		if (c >= cols) throw DimensionError("gather_columns: column out of range for " + to_string(x.shape()));
	std::vector<std::size_t> idx(index.begin(), index.end());
	const std::size_t m = idx.size();
	auto xd = x.data();
	std::vector<double> out(rows * m);
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t j = 0; j < m; ++j) out[r * m + j] = xd[r * cols + idx[j]];
	return Tensor::make_result({rows, m}, std::move(out), {x}, [rows, cols, idx](Node& self) {
		const std::size_t m = idx.size();
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t r = 0; r < rows; ++r)
				for (std::size_t j = 0; j < m; ++j) g[r * cols + idx[j]] += self.grad[r * m + j];
	});
}

Tensor sum(const Tensor& x) {
	double acc = 0.0;
	for (double v : x.data()) acc += v;
	return Tensor::make_result({1}, {acc}, {x}, [](Node& self) {
		if (double* g = grad_target(*self.inputs[0])) {
			const double gv = self.grad[0];
			const std::size_t n = self.inputs[0]->storage->size();
			for (std::size_t i = 0; i < n; ++i) g[i] += gv;
		}
	});
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_columns(const Tensor& x) {
	require_rank(x, 2, "mean_columns");
	const std::size_t rows = x.dim(0), cols = x.dim(1);
	auto xd = x.data();
	std::vector<double> out(rows);
	for (std::size_t r = 0; r < rows; ++r) {
		double acc = 0.0;
		for (std::size_t c = 0; c < cols; ++c) acc += xd[r * cols + c];
		out[r] = acc / static_cast<double>(cols);
	}
	return Tensor::make_result({rows, 1}, std::move(out), {x}, [rows, cols](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t r = 0; r < rows; ++r) {
				const double gv = self.grad[r] / static_cast<double>(cols);
				for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gv;
			}
	});
}

Tensor softmax(const Tensor& x, std::size_t axis) {
	const Shape& s = x.shape();
	if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + to_string(s));
	const AxisSplit sp = split_at(s, axis);
	auto xd = x.data();
	std::vector<double> out(xd.size());
	for (std::size_t o = 0; o < sp.outer; ++o)
		for (std::size_t in = 0; in < sp.inner; ++in) {
			const std::size_t base = o * sp.mid * sp.inner + in;
			double mx = -std::numeric_limits<double>::infinity();
			for (std::size_t m = 0; m < sp.mid; ++m) mx = std::max(mx, xd[base + m * sp.inner]);
			double total = 0.0;
			for (std::size_t m = 0; m < sp.mid; ++m) {
				const double e = std::exp(xd[base + m * sp.inner] - mx);
				out[base + m * sp.inner] = e;
				total += e;
			}
			for (std::size_t m = 0; m < sp.mid; ++m) out[base + m * sp.inner] /= total;
		}
	return Tensor::make_result(s, std::move(out), {x}, [sp](Node& self) {
		double* g = grad_target(*self.inputs[0]);
		if (!g) return;
		const double* y = self.storage->data();
		const double* gy = self.grad.data();
		for (std::size_t o = 0; o < sp.outer; ++o)
			for (std::size_t in = 0; in < sp.inner; ++in) {
				const std::size_t base = o * sp.mid * sp.inner + in;
				double dot = 0.0;
				for (std::size_t m = 0; m < sp.mid; ++m) dot += y[base + m * sp.inner] * gy[base + m * sp.inner];
				for (std::size_t m = 0; m < sp.mid; ++m) {
					const std::size_t i = base + m * sp.inner;
					g[i] += y[i] * (gy[i] - dot);
				}
			}
	});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
	require_rank(x, 2, "layer_norm");
	const std::size_t d = x.dim(0), n = x.dim(1);
	if (gamma.numel() != d || beta.numel() != d)
		throw DimensionError("layer_norm: affine terms must have " + std::to_string(d) + " entries");
	auto xd = x.data(), gd = gamma.data(), bd = beta.data();
	std::vector<double> xhat(xd.size()), inv_std(n), out(xd.size());
	for (std::size_t c = 0; c < n; ++c) {
		double mu = 0.0;
		for (std::size_t r = 0; r < d; ++r) mu += xd[r * n + c];
		mu /= static_cast<double>(d);
		double var = 0.0;
		for (std::size_t r = 0; r < d; ++r) var += (xd[r * n + c] - mu) * (xd[r * n + c] - mu);
		var /= static_cast<double>(d);
		inv_std[c] = 1.0 / std::sqrt(var + eps);
		for (std::size_t r = 0; r < d; ++r) {
			xhat[r * n + c] = (xd[r * n + c] - mu) * inv_std[c];
			out[r * n + c] = gd[r] * xhat[r * n + c] + bd[r];
		}
	}
	return Tensor::make_result(x.shape(), std::move(out), {x, gamma, beta},
	                           [d, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
		                           const double* gv = in_data(self, 1);
		                           const double* gy = self.grad.data();
		                           if (double* gg = grad_target(*self.inputs[1]))
			                           for (std::size_t r = 0; r < d; ++r)
				                           for (std::size_t c = 0; c < n; ++c) gg[r] += gy[r * n + c] * xhat[r * n + c];
		                           if (double* gb = grad_target(*self.inputs[2]))
			                           for (std::size_t r = 0; r < d; ++r)
				                           for (std::size_t c = 0; c < n; ++c) gb[r] += gy[r * n + c];
		                           double* gx = grad_target(*self.inputs[0]);
		                           if (!gx) return;
		                           for (std::size_t c = 0; c < n; ++c) {
			                           double m1 = 0.0, m2 = 0.0;
			                           for (std::size_t r = 0; r < d; ++r) {
				                           const double dxh = gy[r * n + c] * gv[r];
				                           m1 += dxh;
				                           m2 += dxh * xhat[r * n + c];
			                           }
			                           m1 /= static_cast<double>(d);
			                           m2 /= static_cast<double>(d);
			                           for (std::size_t r = 0; r < d; ++r) {
				                           const double dxh = gy[r * n + c] * gv[r];
				                           gx[r * n + c] += inv_std[c] * (dxh - m1 - xhat[r * n + c] * m2);
			                           }
		                           }
	                           });
}

Tensor instance_norm(const Tensor& x, double eps) {
	require_rank(x, 2, "instance_norm");
	const std::size_t rows = x.dim(0), len = x.dim(1);
	auto xd = x.data();
	std::vector<double> out(xd.size()), inv_std(rows);
	for (std::size_t r = 0; r < rows; ++r) {
		const double* row = xd.data() + r * len;
		double mu = 0.0;
		for (std::size_t i = 0; i < len; ++i) mu += row[i];
		mu /= static_cast<double>(len);
		double var = 0.0;
		for (std::size_t i = 0; i < len; ++i) var += (row[i] - mu) * (row[i] - mu);
		var /= static_cast<double>(len);
		inv_std[r] = 1.0 / std::sqrt(var + eps);
		for (std::size_t i = 0; i < len; ++i) out[r * len + i] = (row[i] - mu) * inv_std[r];
	}
	return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, len, inv_std = std::move(inv_std)](Node& self) {
		double* gx = grad_target(*self.inputs[0]);
		if (!gx) return;
		const double* y = self.storage->data();
		const double* gy = self.grad.data();
		for (std::size_t r = 0; r < rows; ++r) {
			double m1 = 0.0, m2 = 0.0;
			for (std::size_t i = 0; i < len; ++i) {
				m1 += gy[r * len + i];
				m2 += gy[r * len + i] * y[r * len + i];
			}
			m1 /= static_cast<double>(len);
			m2 /= static_cast<double>(len);
			for (std::size_t i = 0; i < len; ++i)
				gx[r * len + i] += inv_std[r] * (gy[r * len + i] - m1 - y[r * len + i] * m2);
		}
	});
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
	if (x.rank() != 2 && x.rank() != 3) throw DimensionError("conv1x1: expected C x H x W or C x L, got " + to_string(x.shape()));
	if (w.rank() != 2 || w.dim(1) != x.dim(0))
		throw DimensionError("conv1x1: weight " + to_string(w.shape()) + " does not map input " + to_string(x.shape()));
	const std::size_t c = x.dim(0);
	const std::size_t positions = x.numel() / c;
	Tensor flat = x.rank() == 2 ? x : reshape(x, {c, positions});
	Tensor y = add_col_vector(matmul(w, flat), b);
	if (x.rank() == 2) return y;
	return reshape(y, {w.dim(0), x.dim(1), x.dim(2)});
}

Tensor unfold2d(const Tensor& x, std::size_t k) {
	require_rank(x, 3, "unfold2d");
	if (k == 0 || k % 2 == 0) throw ConfigError("unfold2d: window must be odd, got " + std::to_string(k));
	const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
	const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
	const std::size_t width = k * k * c;
	auto xd = x.data();
	// Source offset of every (row, col) entry, or -1 for zero padding.
	std::vector<std::ptrdiff_t> src(h * w * width, -1);
	for (std::size_t y = 0; y < h; ++y)
		for (std::size_t xx = 0; xx < w; ++xx)
			for (std::size_t ch = 0; ch < c; ++ch)
				for (std::size_t dy = 0; dy < k; ++dy)
					for (std::size_t dx = 0; dx < k; ++dx) {
						const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(dy) - half;
						const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + static_cast<std::ptrdiff_t>(dx) - half;
						if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w))
							continue;
						src[(y * w + xx) * width + ch * k * k + dy * k + dx] =
						    static_cast<std::ptrdiff_t>(ch * h * w) + sy * static_cast<std::ptrdiff_t>(w) + sx;
					}
	std::vector<double> out(src.size(), 0.0);
	for (std::size_t i = 0; i < src.size(); ++i)
		if (src[i] >= 0) out[i] = xd[static_cast<std::size_t>(src[i])];
	return Tensor::make_result({h * w, width}, std::move(out), {x}, [src = std::move(src)](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < src.size(); ++i)
				if (src[i] >= 0) g[static_cast<std::size_t>(src[i])] += self.grad[i];
	});
}

Tensor unfold1d(const Tensor& x, std::size_t k) {
	require_rank(x, 2, "unfold1d");
	const std::size_t d = x.dim(0), n = x.dim(1);
	if (k == 0 || k > n + 2)
		throw ConfigError("unfold1d: window " + std::to_string(k) + " invalid for " + std::to_string(n) + " tokens");
	const std::ptrdiff_t left = static_cast<std::ptrdiff_t>(k / 2); // ceil((k-1)/2)
	const std::size_t width = k * d;
	auto xd = x.data();
	std::vector<std::ptrdiff_t> src(n * width, -1);
	for (std::size_t t = 0; t < n; ++t)
		for (std::size_t j = 0; j < k; ++j) {
			const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) - left;
			if (s < 0 || s >= static_cast<std::ptrdiff_t>(n)) continue;
			for (std::size_t r = 0; r < d; ++r)
				src[t * width + j * d + r] = static_cast<std::ptrdiff_t>(r * n) + s;
		}
	std::vector<double> out(src.size(), 0.0);
	for (std::size_t i = 0; i < src.size(); ++i)
		if (src[i] >= 0) out[i] = xd[static_cast<std::size_t>(src[i])];
	return Tensor::make_result({n, width}, std::move(out), {x}, [src = std::move(src)](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < src.size(); ++i)
				if (src[i] >= 0) g[static_cast<std::size_t>(src[i])] += self.grad[i];
	});
}

namespace {

struct Interp {
	std::vector<std::size_t> i0, i1;
	std::vector<double> w0, w1;
};

Interp interp_table(std::size_t in, std::size_t out) {
	Interp t;
	const double ratio = static_cast<double>(in) / static_cast<double>(out);
	for (std::size_t o = 0; o < out; ++o) {
		double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
		if (src < 0) src = 0;
		auto lo = static_cast<std::size_t>(std::floor(src));
		if (lo > in - 1) lo = in - 1;
		const std::size_t hi = std::min(lo + 1, in - 1);
		const double frac = src - static_cast<double>(lo);
		t.i0.push_back(lo);
		t.i1.push_back(hi);
		t.w0.push_back(1.0 - frac);
		t.w1.push_back(frac);
	}
	return t;
}

} // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
	require_rank(x, 3, "bilinear_resize");
	if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_resize: target extents must be >= 1");
	const std::size_t d = x.dim(0), h = x.dim(1), w = x.dim(2);
	Interp ty = interp_table(h, out_h), tx = interp_table(w, out_w);
	auto xd = x.data();
	std::vector<double> out(d * out_h * out_w);
	for (std::size_t c = 0; c < d; ++c) {
		const double* plane = xd.data() + c * h * w;
		for (std::size_t oy = 0; oy < out_h; ++oy) {
			const double* r0 = plane + ty.i0[oy] * w;
			const double* r1 = plane + ty.i1[oy] * w;
			for (std::size_t ox = 0; ox < out_w; ++ox) {
				const double top = tx.w0[ox] * r0[tx.i0[ox]] + tx.w1[ox] * r0[tx.i1[ox]];
				const double bot = tx.w0[ox] * r1[tx.i0[ox]] + tx.w1[ox] * r1[tx.i1[ox]];
				out[(c * out_h + oy) * out_w + ox] = ty.w0[oy] * top + ty.w1[oy] * bot;
			}
		}
	}
	return Tensor::make_result({d, out_h, out_w}, std::move(out), {x},
	                           [d, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node& self) {
		                           double* g = grad_target(*self.inputs[0]);
		                           if (!g) return;
		                           for (std::size_t c = 0; c < d; ++c) {
			                           double* plane = g + c * h * w;
			                           for (std::size_t oy = 0; oy < out_h; ++oy)
				                           for (std::size_t ox = 0; ox < out_w; ++ox) {
					                           const double gv = self.grad[(c * out_h + oy) * out_w + ox];
					                           plane[ty.i0[oy] * w + tx.i0[ox]] += gv * ty.w0[oy] * tx.w0[ox];
					                           plane[ty.i0[oy] * w + tx.i1[ox]] += gv * ty.w0[oy] * tx.w1[ox];
					                           plane[ty.i1[oy] * w + tx.i0[ox]] += gv * ty.w1[oy] * tx.w0[ox];
					                           plane[ty.i1[oy] * w + tx.i1[ox]] += gv * ty.w1[oy] * tx.w1[ox];
				                           }
		                           }
	                           });
}

Tensor adaptive_avg_pool1d(const Tensor& x, std::size_t r) {
	require_rank(x, 2, "adaptive_avg_pool1d");
	const std::size_t d = x.dim(0), n = x.dim(1);
	if (r < 1 || r > n)
		throw ConfigError("adaptive_avg_pool1d: bins " + std::to_string(r) + " invalid for length " + std::to_string(n));
	std::vector<std::size_t> lo(r), hi(r);
	for (std::size_t j = 0; j < r; ++j) {
		lo[j] = j * n / r;
		hi[j] = (j + 1) * n / r;
	}
	auto xd = x.data();
	std::vector<double> out(d * r);
	for (std::size_t row = 0; row < d; ++row)
		for (std::size_t j = 0; j < r; ++j) {
			double acc = 0.0;
			for (std::size_t t = lo[j]; t < hi[j]; ++t) acc += xd[row * n + t];
			out[row * r + j] = acc / static_cast<double>(hi[j] - lo[j]);
		}
	return Tensor::make_result({d, r}, std::move(out), {x}, [d, n, r, lo, hi](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t row = 0; row < d; ++row)
				for (std::size_t j = 0; j < r; ++j) {
					const double gv = self.grad[row * r + j] / static_cast<double>(hi[j] - lo[j]);
					for (std::size_t t = lo[j]; t < hi[j]; ++t) g[row * n + t] += gv;
				}
	});
}

Tensor space_to_depth(const Tensor& x, std::size_t p) {
	require_rank(x, 3, "space_to_depth");
	const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
	if (p == 0 || h % p != 0 || w % p != 0)
		throw ConfigError("space_to_depth: extent " + to_string(x.shape()) + " not divisible by " + std::to_string(p));
	const std::size_t oh = h / p, ow = w / p;
	std::vector<std::size_t> src(x.numel());
	for (std::size_t ch = 0; ch < c; ++ch)
		for (std::size_t dy = 0; dy < p; ++dy)
			for (std::size_t dx = 0; dx < p; ++dx)
				for (std::size_t y = 0; y < oh; ++y)
					for (std::size_t xx = 0; xx < ow; ++xx) {
						const std::size_t oc = ch * p * p + dy * p + dx;
						src[(oc * oh + y) * ow + xx] = (ch * h + y * p + dy) * w + xx * p + dx;
					}
	auto xd = x.data();
	std::vector<double> out(src.size());
	for (std::size_t i = 0; i < src.size(); ++i) out[i] = xd[src[i]];
	return Tensor::make_result({c * p * p, oh, ow}, std::move(out), {x}, [src = std::move(src)](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
	});
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
	require_rank(table, 2, "embedding");
	const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
	if (n == 0) throw DimensionError("embedding: empty id sequence");
	std::vector<std::size_t> rows(n);
	for (std::size_t t = 0; t < n; ++t) {
		if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v)
			throw DimensionError("embedding: id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(v));
		rows[t] = static_cast<std::size_t>(ids[t]);
	}
	auto td = table.data();
	std::vector<double> out(d * n);
	for (std::size_t t = 0; t < n; ++t)
		for (std::size_t k = 0; k < d; ++k) out[k * n + t] = td[rows[t] * d + k];
	return Tensor::make_result({d, n}, std::move(out), {table}, [d, n, rows = std::move(rows)](Node& self) {
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t t = 0; t < n; ++t)
				for (std::size_t k = 0; k < d; ++k) g[rows[t] * d + k] += self.grad[k * n + t];
	});
}

Tensor stop_gradient(const Tensor& x) {
	auto xd = x.data();
	return Tensor(x.shape(), std::vector<double>(xd.begin(), xd.end()));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
	require_same_shape(logits, targets, "bce_with_logits");
	auto z = logits.data(), t = targets.data();
	const double inv_n = 1.0 / static_cast<double>(z.size());
	double acc = 0.0;
	for (std::size_t i = 0; i < z.size(); ++i)
		acc += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
	return Tensor::make_result({1}, {acc * inv_n}, {logits, targets}, [inv_n](Node& self) {
		const double* z = in_data(self, 0);
		const double* t = in_data(self, 1);
		const double gv = self.grad[0] * inv_n;
		const std::size_t n = self.inputs[0]->storage->size();
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < n; ++i) {
				const double s = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
				g[i] += gv * (s - t[i]);
			}
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t i = 0; i < n; ++i) g[i] -= gv * z[i];
	});
}

Tensor mse(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "mse");
	auto ad = a.data(), bd = b.data();
	const double inv_n = 1.0 / static_cast<double>(ad.size());
	double acc = 0.0;
	for (std::size_t i = 0; i < ad.size(); ++i) acc += (ad[i] - bd[i]) * (ad[i] - bd[i]);
	return Tensor::make_result({1}, {acc * inv_n}, {a, b}, [inv_n](Node& self) {
		const double* av = in_data(self, 0);
		const double* bv = in_data(self, 1);
		const double gv = 2.0 * self.grad[0] * inv_n;
		const std::size_t n = self.inputs[0]->storage->size();
		if (double* g = grad_target(*self.inputs[0]))
			for (std::size_t i = 0; i < n; ++i) g[i] += gv * (av[i] - bv[i]);
		if (double* g = grad_target(*self.inputs[1]))
			for (std::size_t i = 0; i < n; ++i) g[i] -= gv * (av[i] - bv[i]);
	});
}

} // namespace btd
