#include "mit/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace mit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Strides of `in` as seen from a broadcast output of rank `out_rank`;
// broadcast axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t nd = out.size();
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t total = shape_numel(out);
  const std::size_t inner = out[nd - 1];
  const std::size_t step_a = sa[nd - 1];
  const std::size_t step_b = sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * step_a, ib + j * step_b);
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* kind, Fwd fwd, GradA grad_a, GradB grad_b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), kind);
  std::vector<double> out(shape_numel(out_shape));
  const auto& da = a.impl()->data;
  const auto& db = b.impl()->data;
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(da[i], db[j]); });
  }
  detail::BackwardFn backward;
  if (any_requires_grad({&a, &b})) {
    backward = [a, b, out_shape, same, sa, sb, grad_a, grad_b](std::span<const double> g) {
      auto* ga = grad_sink(a);
      auto* gb = grad_sink(b);
      const auto& xa = a.impl()->data;
      const auto& xb = b.impl()->data;
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (ga) (*ga)[i] += grad_a(g[i], xa[i], xb[i]);
          if (gb) (*gb)[i] += grad_b(g[i], xa[i], xb[i]);
        }
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (ga) (*ga)[i] += grad_a(g[o], xa[i], xb[j]);
          if (gb) (*gb)[j] += grad_b(g[o], xa[i], xb[j]);
        });
      }
    };
  }
  return make_op_result(out_shape, std::move(out), {&a, &b}, kind, std::move(backward));
}

// Unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, const char* kind, Fwd fwd, Deriv deriv) {
  const auto& da = a.impl()->data;
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i]);
  Tensor result = make_op_result(a.shape(), std::move(out), {&a}, kind, nullptr);
  if (result.requires_grad()) {
    // The closure must not own the result (it would own itself), so it
    // reads the output values through a raw pointer; the node only runs
    // while the result is alive.
    detail::TensorImpl* self = result.impl();
    result.impl()->grad_fn->backward = [a, self, deriv](std::span<const double> g) {
      auto* ga = grad_sink(a);
      const auto& x = a.impl()->data;
      const auto& y = self->data;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(x[i], y[i]);
    };
  }
  return result;
}

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  MutMap(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      ConstMap(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
}

// c += g * b^T ; g:(m,n) b:(k,n) c:(m,k)
void gemm_acc_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  MutMap(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)).noalias() +=
      ConstMap(g, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) *
      ConstMap(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n)).transpose();
}

// c += a^T * g ; a:(m,k) g:(m,n) c:(k,n)
void gemm_acc_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  MutMap(c, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n)).noalias() +=
      ConstMap(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)).transpose() *
      ConstMap(g, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y == 0.0 ? 0.0 : 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&]() {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) fail();
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    if (sb[0] != batch || sb[1] != k) fail();
    out_shape = {batch, m, n};
  } else if (sa.size() == 3 && sb.size() == 2) {
    // Shared weight: fold the batch into rows.
    m = sa[0] * sa[1];
    k = sa[2];
    n = sb[1];
    if (sb[0] != k) fail();
    out_shape = {sa[0], sa[1], n};
  } else {
    fail();
  }
  std::vector<double> out(batch * m * n);
  const double* pa = a.impl()->data.data();
  const double* pb = b.impl()->data.data();
  for (std::size_t i = 0; i < batch; ++i) gemm(pa + i * m * k, pb + i * k * n, out.data() + i * m * n, m, k, n);

  detail::BackwardFn backward;
  if (any_requires_grad({&a, &b})) {
    backward = [a, b, batch, m, k, n](std::span<const double> g) {
      auto* ga = grad_sink(a);
      auto* gb = grad_sink(b);
      const double* xa = a.impl()->data.data();
      const double* xb = b.impl()->data.data();
      for (std::size_t i = 0; i < batch; ++i) {
        const double* gi = g.data() + i * m * n;
        if (ga) gemm_acc_nt(gi, xb + i * k * n, ga->data() + i * m * k, m, n, k);
        if (gb) gemm_acc_tn(xa + i * m * k, gi, gb->data() + i * k * n, m, k, n);
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(out), {&a, &b}, "matmul", std::move(backward));
}

Tensor softmax(const Tensor& a, std::ptrdiff_t axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto& x = a.impl()->data;
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = std::exp(x[base + e * sp.inner] - mx);
        y[base + e * sp.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) y[base + e * sp.inner] /= total;
    }
  }
  Tensor result = make_op_result(a.shape(), std::move(y), {&a}, "softmax", nullptr);
  if (result.requires_grad()) {
    detail::TensorImpl* self = result.impl();
    result.impl()->grad_fn->backward = [a, self, sp](std::span<const double> g) {
      auto* ga = grad_sink(a);
      const auto& yv = self->data;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.extent * sp.inner + in;
          double dot = 0.0;
          for (std::size_t e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * yv[base + e * sp.inner];
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t i = base + e * sp.inner;
            (*ga)[i] += yv[i] * (g[i] - dot);
          }
        }
      }
    };
  }
  return result;
}

Tensor log_softmax(const Tensor& a, std::ptrdiff_t axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "log_softmax");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto& x = a.impl()->data;
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) total += std::exp(x[base + e * sp.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t e = 0; e < sp.extent; ++e) y[base + e * sp.inner] = x[base + e * sp.inner] - lse;
    }
  }
  Tensor result = make_op_result(a.shape(), std::move(y), {&a}, "log_softmax", nullptr);
  if (result.requires_grad()) {
    detail::TensorImpl* self = result.impl();
    result.impl()->grad_fn->backward = [a, self, sp](std::span<const double> g) {
      auto* ga = grad_sink(a);
      const auto& yv = self->data;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.extent * sp.inner + in;
          double gsum = 0.0;
          for (std::size_t e = 0; e < sp.extent; ++e) gsum += g[base + e * sp.inner];
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t i = base + e * sp.inner;
            (*ga)[i] += g[i] - std::exp(yv[i]) * gsum;
          }
        }
      }
    };
  }
  return result;
}

Tensor sum(const Tensor& a) {
  const auto& x = a.impl()->data;
  double total = 0.0;
  for (double v : x) total += v;
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (double& v : *ga) v += g[0];
    };
  }
  return make_op_result({}, {total}, {&a}, "sum", std::move(backward));
}

Tensor sum(const Tensor& a, std::ptrdiff_t axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "sum");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto& x = a.impl()->data;
  std::vector<double> y(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const double* row = x.data() + (o * sp.extent + e) * sp.inner;
      double* dst = y.data() + o * sp.inner;
      for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += row[in];
    }
  }
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a, sp](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t e = 0; e < sp.extent; ++e) {
          double* dst = ga->data() + (o * sp.extent + e) * sp.inner;
          const double* src = g.data() + o * sp.inner;
          for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
        }
      }
    };
  }
  return make_op_result(reduced_shape(a.shape(), ax, keepdim), std::move(y), {&a}, "sum_axis", std::move(backward));
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, std::ptrdiff_t axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "mean");
  return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    };
  }
  return make_op_result(std::move(shape), a.impl()->data, {&a}, "reshape", std::move(backward));
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const Shape& s = a.shape();
  const std::size_t nd = s.size();
  if (order.size() != nd) throw ShapeError("permute: order rank mismatch for shape " + shape_str(s));
  std::vector<bool> seen(nd, false);
  for (std::size_t o : order) {
    if (o >= nd || seen[o]) throw ShapeError("permute: invalid axis order for shape " + shape_str(s));
    seen[o] = true;
  }
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(nd);
  std::vector<std::size_t> src_strides(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_shape[i] = s[order[i]];
    src_strides[i] = in_strides[order[i]];
  }
  // Map each output element to its source offset.
  std::vector<std::size_t> src(a.numel());
  {
    std::vector<std::size_t> zero(nd, 0);
    for_each_broadcast(out_shape, src_strides, zero,
                       [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  }
  const auto& x = a.impl()->data;
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = x[src[o]];
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a, src = std::move(src)](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t o = 0; o < g.size(); ++o) (*ga)[src[o]] += g[o];
    };
  }
  return make_op_result(std::move(out_shape), std::move(y), {&a}, "permute", std::move(backward));
}

Tensor transpose(const Tensor& a, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[normalize_axis(axis0, a.rank(), "transpose")], order[normalize_axis(axis1, a.rank(), "transpose")]);
  return permute(a, order);
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape out = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (out != shape) {
    throw ShapeError("broadcast_to: cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  const auto& x = a.impl()->data;
  std::vector<double> y(shape_numel(shape));
  for_each_broadcast(shape, sa, zero, [&](std::size_t o, std::size_t i, std::size_t) { y[o] = x[i]; });
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a, shape, sa, zero](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for_each_broadcast(shape, sa, zero, [&](std::size_t o, std::size_t i, std::size_t) { (*ga)[i] += g[o]; });
    };
  }
  return make_op_result(shape, std::move(y), {&a}, "broadcast_to", std::move(backward));
}

Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  std::vector<double> y(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[ax] * sp.inner;
    const auto& x = p.impl()->data;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.data() + o * chunk, chunk, y.data() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += p.shape()[ax];
  }
  detail::BackwardFn backward;
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    backward = [parts, offsets, sp, ax](std::span<const double> g) {
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto* gp = grad_sink(parts[pi]);
        if (!gp) continue;
        const std::size_t chunk = parts[pi].shape()[ax] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = g.data() + o * sp.extent * sp.inner + offsets[pi] * sp.inner;
          double* dst = gp->data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(y), parts, "concat", std::move(backward));
}

Tensor slice(const Tensor& a, std::ptrdiff_t axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
  const Shape& s = a.shape();
  if (length == 0 || start + length > s[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") out of bounds for axis " + std::to_string(ax) + " of shape " + shape_str(s));
  }
  const AxisSplit sp = split_at(s, ax);
  Shape out_shape = s;
  out_shape[ax] = length;
  std::vector<double> y(sp.outer * length * sp.inner);
  const auto& x = a.impl()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.data() + (o * sp.extent + start) * sp.inner, length * sp.inner, y.data() + o * length * sp.inner);
  }
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a, sp, start, length](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = g.data() + o * length * sp.inner;
        double* dst = ga->data() + (o * sp.extent + start) * sp.inner;
        for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(y), {&a}, "slice", std::move(backward));
}

Tensor index_select(const Tensor& a, std::ptrdiff_t axis, std::span<const std::size_t> indices) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "index_select");
  const Shape& s = a.shape();
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  for (std::size_t idx : indices) {
    if (idx >= s[ax]) {
      throw ShapeError("index_select: index " + std::to_string(idx) + " out of range for axis " +
                       std::to_string(ax) + " of shape " + shape_str(s));
    }
  }
  const AxisSplit sp = split_at(s, ax);
  Shape out_shape = s;
  out_shape[ax] = indices.size();
  std::vector<double> y(sp.outer * indices.size() * sp.inner);
  const auto& x = a.impl()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      std::copy_n(x.data() + (o * sp.extent + indices[j]) * sp.inner, sp.inner,
                  y.data() + (o * indices.size() + j) * sp.inner);
    }
  }
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    backward = [a, sp, idx = std::move(idx)](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < idx.size(); ++j) {
          const double* src = g.data() + (o * idx.size() + j) * sp.inner;
          double* dst = ga->data() + (o * sp.extent + idx[j]) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(y), {&a}, "index_select", std::move(backward));
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
  const Shape out = broadcast_shape(a.shape(), mask.shape(), "masked_fill");
  if (out != a.shape()) {
    throw ShapeError("masked_fill: mask " + shape_str(mask.shape()) + " does not broadcast to " +
                     shape_str(a.shape()));
  }
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sm = broadcast_strides(mask.shape(), out);
  const auto& x = a.impl()->data;
  const auto& m = mask.impl()->data;
  std::vector<double> y(x.size());
  std::vector<char> keep(x.size());
  for_each_broadcast(out, sa, sm, [&](std::size_t o, std::size_t i, std::size_t j) {
    keep[o] = m[j] == 0.0;
    y[o] = keep[o] ? x[i] : value;
  });
  detail::BackwardFn backward;
  if (a.requires_grad()) {
    backward = [a, keep = std::move(keep)](std::span<const double> g) {
      auto* ga = grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (keep[i]) (*ga)[i] += g[i];
      }
    };
  }
  return make_op_result(out, std::move(y), {&a}, "masked_fill", std::move(backward));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw ShapeError("cosine_similarity: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const auto& x = a.impl()->data;
  const auto& z = b.impl()->data;
  std::vector<double> y(rows);
  std::vector<double> dots(rows);
  std::vector<double> na(rows);
  std::vector<double> nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    double sa = 0.0;
    double sb = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dot += x[r * d + c] * z[r * d + c];
      sa += x[r * d + c] * x[r * d + c];
      sb += z[r * d + c] * z[r * d + c];
    }
    dots[r] = dot;
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    y[r] = (na[r] == 0.0 || nb[r] == 0.0) ? 0.0 : dot / (na[r] * nb[r]);
  }
  detail::BackwardFn backward;
  if (any_requires_grad({&a, &b})) {
    backward = [a, b, d, rows, y, na, nb](std::span<const double> g) {
      auto* ga = grad_sink(a);
      auto* gb = grad_sink(b);
      const auto& xv = a.impl()->data;
      const auto& zv = b.impl()->data;
      for (std::size_t r = 0; r < rows; ++r) {
        if (na[r] == 0.0 || nb[r] == 0.0) continue;
        const double inv = 1.0 / (na[r] * nb[r]);
        const double ca = y[r] / (na[r] * na[r]);
        const double cb = y[r] / (nb[r] * nb[r]);
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t i = r * d + c;
          if (ga) (*ga)[i] += g[r] * (zv[i] * inv - ca * xv[i]);
          if (gb) (*gb)[i] += g[r] * (xv[i] * inv - cb * zv[i]);
        }
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(y), {&a, &b}, "cosine_similarity", std::move(backward));
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  const Tensor ms = mean(square(x), -1, true);
  return div(x, sqrt(add_scalar(ms, eps))) * weight;
}

}  // namespace mit
