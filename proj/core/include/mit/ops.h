#pragma once

// Differentiable tensor operations. Every function records its local
// gradient rule when any input requires grad. Binary element-wise ops follow
// right-aligned broadcasting where only size-1 (or missing leading) axes are
// expanded; any other mismatch throws ShapeError naming the op and shapes.

#include <cstddef>
#include <span>
#include <vector>

#include "mit/tensor.h"

namespace mit {

// Element-wise binary (broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Element-wise unary.
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// d/dx sqrt(x) at x == 0 is taken as 0 so exact-zero residuals stay finite.
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);

// (m,k)x(k,n), (B,m,k)x(B,k,n), or (B,m,k)x(k,n) with a shared right operand.
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable (max-subtracted) softmax along `axis`.
Tensor softmax(const Tensor& a, std::ptrdiff_t axis = -1);
Tensor log_softmax(const Tensor& a, std::ptrdiff_t axis = -1);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::ptrdiff_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::ptrdiff_t axis, bool keepdim = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::ptrdiff_t axis0, std::ptrdiff_t axis1);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis);
Tensor slice(const Tensor& a, std::ptrdiff_t axis, std::size_t start, std::size_t length);
// Gathers entries of `a` along `axis` (repeats allowed).
Tensor index_select(const Tensor& a, std::ptrdiff_t axis, std::span<const std::size_t> indices);

// out = mask != 0 ? value : a, where mask broadcasts to a's shape.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

// Cosine similarity along the last axis of two equally shaped tensors.
// Rows where either operand has zero norm yield 0 with zero gradient.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// x / sqrt(mean(x^2, last axis) + eps) * weight.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

// Result shape of broadcasting a against b, or ShapeError naming `op`.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

}  // namespace mit
