#include "dbr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dbr::ops {
namespace {

// Walks every index of `shape` in row-major order, maintaining one offset per
// stride vector.
template <typename Fn>
void walk(const Shape& shape, const std::vector<std::vector<std::size_t>>& strides, Fn&& fn) {
  const std::size_t rank = shape.rank();
  const std::size_t n = shape.numel();
  const std::size_t k = strides.size();
  std::vector<std::size_t> idx(rank, 0);
  std::vector<std::size_t> offs(k, 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    fn(lin, std::span<const std::size_t>(offs));
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      for (std::size_t i = 0; i < k; ++i) offs[i] += strides[i][ax];
      if (idx[ax] < shape[ax]) break;
      for (std::size_t i = 0; i < k; ++i) offs[i] -= strides[i][ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

// Strides of `in` viewed as broadcast to `out` (0 along stretched axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  if (in.rank() > out.rank()) {
    throw ShapeError("cannot broadcast " + in.str() + " to " + out.str());
  }
  std::vector<std::size_t> st(out.rank(), 0);
  const std::size_t lead = out.rank() - in.rank();
  const auto in_strides = in.strides();
  for (std::size_t a = 0; a < in.rank(); ++a) {
    const std::size_t d = in[a];
    const std::size_t od = out[a + lead];
    if (d == od) {
      st[a + lead] = in_strides[a];
    } else if (d != 1) {
      throw ShapeError("cannot broadcast " + in.str() + " to " + out.str());
    }
  }
  return st;
}

double apply_binary(BinaryOp op, double x, double y) {
  switch (op) {
    case BinaryOp::add: return x + y;
    case BinaryOp::sub: return x - y;
    case BinaryOp::mul: return x * y;
    case BinaryOp::div: return x / y;
    case BinaryOp::max: return (x != x || y != y) ? std::numeric_limits<double>::quiet_NaN() : std::max(x, y);
    case BinaryOp::min: return (x != x || y != y) ? std::numeric_limits<double>::quiet_NaN() : std::min(x, y);
  }
  return 0.0;
}

std::vector<std::size_t> normalize_axes(const std::optional<std::vector<std::size_t>>& axes, std::size_t rank) {
  std::vector<std::size_t> out;
  if (!axes) {
    for (std::size_t a = 0; a < rank; ++a) out.push_back(a);
    return out;
  }
  std::vector<bool> seen(rank, false);
  for (auto a : *axes) {
    if (a >= rank) throw ShapeError("axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
    if (seen[a]) throw ShapeError("duplicate axis " + std::to_string(a));
    seen[a] = true;
    out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.rank(), b.rank());
  std::vector<std::size_t> dims(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.rank() ? 1 : a[i - (rank - a.rank())];
    const std::size_t db = i < rank - b.rank() ? 1 : b[i - (rank - b.rank())];
    if (da == db || db == 1) {
      dims[i] = da;
    } else if (da == 1) {
      dims[i] = db;
    } else {
      throw ShapeError("incompatible shapes for broadcasting: " + a.str() + " and " + b.str());
    }
  }
  return Shape(std::move(dims));
}

Shape broadcast_shapes(std::span<const Shape> shapes) {
  Shape out;
  for (const auto& s : shapes) out = broadcast_shapes(out, s);
  return out;
}

void for_each_broadcast(const Shape& out, std::span<const Shape> inputs,
                        const std::function<void(std::size_t, std::span<const std::size_t>)>& fn) {
  std::vector<std::vector<std::size_t>> strides;
  strides.reserve(inputs.size());
  for (const auto& in : inputs) strides.push_back(broadcast_strides(in, out));
  walk(out, strides, fn);
}

Tensor ewise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const DType dtype = promote(a.dtype(), b.dtype());
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = round_to(dtype, apply_binary(op, av[i], bv[i]));
    return Tensor::from_values(a.shape(), std::move(out), dtype);
  }
  const Shape shape = broadcast_shapes(a.shape(), b.shape());
  std::vector<double> out(shape.numel());
  walk(shape, {broadcast_strides(a.shape(), shape), broadcast_strides(b.shape(), shape)},
       [&](std::size_t lin, std::span<const std::size_t> offs) {
         out[lin] = round_to(dtype, apply_binary(op, av[offs[0]], bv[offs[1]]));
       });
  return Tensor::from_values(shape, std::move(out), dtype);
}

Tensor map(const Tensor& a, const std::function<double(double)>& fn) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = round_to(a.dtype(), fn(av[i]));
  return Tensor::from_values(a.shape(), std::move(out), a.dtype());
}

Tensor neg(const Tensor& a) { return map(a, [](double x) { return -x; }); }
Tensor exp(const Tensor& a) { return map(a, [](double x) { return std::exp(x); }); }
Tensor log(const Tensor& a) { return map(a, [](double x) { return std::log(x); }); }
Tensor tanh(const Tensor& a) { return map(a, [](double x) { return std::tanh(x); }); }
Tensor abs(const Tensor& a) { return map(a, [](double x) { return std::fabs(x); }); }
Tensor relu(const Tensor& a) { return map(a, [](double x) { return x > 0.0 ? x : 0.0; }); }
Tensor positive_mask(const Tensor& a) { return map(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }); }
Tensor scale(const Tensor& a, double factor) { return map(a, [factor](double x) { return x * factor; }); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + a.shape().str() + " and " + b.shape().str());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape().str() + " @ " + b.shape().str());
  }
  const DType dtype = promote(a.dtype(), b.dtype());
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return Tensor::from_values(Shape{m, n}, std::move(out), dtype);
}

Tensor reduce(ReduceOp op, const Tensor& a, const std::optional<std::vector<std::size_t>>& axes, bool keepdims) {
  const auto reduced = normalize_axes(axes, a.rank());
  std::vector<std::size_t> kept_dims = a.shape().dims();
  std::vector<std::size_t> out_dims;
  for (std::size_t ax = 0; ax < a.rank(); ++ax) {
    if (std::binary_search(reduced.begin(), reduced.end(), ax)) {
      kept_dims[ax] = 1;
      if (keepdims) out_dims.push_back(1);
    } else {
      out_dims.push_back(a.shape()[ax]);
    }
  }
  const Shape kept(kept_dims);
  const double identity = op == ReduceOp::sum ? 0.0 : -std::numeric_limits<double>::infinity();
  std::vector<double> out(kept.numel(), identity);
  const auto av = a.values();
  walk(a.shape(), {broadcast_strides(kept, a.shape())}, [&](std::size_t lin, std::span<const std::size_t> offs) {
    double& acc = out[offs[0]];
    acc = op == ReduceOp::sum ? acc + av[lin] : (av[lin] > acc || av[lin] != av[lin] ? av[lin] : acc);
  });
  return Tensor::from_values(Shape(out_dims), std::move(out), a.dtype());
}

Tensor transpose(const Tensor& a, std::span<const std::size_t> perm) {
  const std::size_t rank = a.rank();
  std::vector<std::size_t> p(perm.begin(), perm.end());
  if (p.empty()) {
    for (std::size_t i = 0; i < rank; ++i) p.push_back(rank - 1 - i);
  }
  if (p.size() != rank) throw ShapeError("transpose permutation has wrong length");
  std::vector<bool> seen(rank, false);
  std::vector<std::size_t> out_dims(rank);
  for (std::size_t j = 0; j < rank; ++j) {
    if (p[j] >= rank || seen[p[j]]) throw ShapeError("invalid transpose permutation");
    seen[p[j]] = true;
    out_dims[j] = a.shape()[p[j]];
  }
  const Shape out_shape(out_dims);
  const auto out_strides = out_shape.strides();
  std::vector<std::size_t> in_to_out(rank);
  for (std::size_t j = 0; j < rank; ++j) in_to_out[p[j]] = out_strides[j];
  std::vector<double> out(a.numel());
  const auto av = a.values();
  walk(a.shape(), {in_to_out}, [&](std::size_t lin, std::span<const std::size_t> offs) { out[offs[0]] = av[lin]; });
  return Tensor::from_values(out_shape, std::move(out), a.dtype());
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape.numel() != a.numel()) {
    throw ShapeError("cannot reshape " + a.shape().str() + " to " + shape.str());
  }
  const auto av = a.values();
  return Tensor::from_values(shape, std::vector<double>(av.begin(), av.end()), a.dtype());
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  std::vector<double> out(shape.numel());
  const auto av = a.values();
  walk(shape, {broadcast_strides(a.shape(), shape)},
       [&](std::size_t lin, std::span<const std::size_t> offs) { out[lin] = av[offs[0]]; });
  return Tensor::from_values(shape, std::move(out), a.dtype());
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(shape, a.shape()) != a.shape()) {
    throw ShapeError("cannot sum " + a.shape().str() + " to " + shape.str());
  }
  std::vector<double> out(shape.numel(), 0.0);
  const auto av = a.values();
  walk(a.shape(), {broadcast_strides(shape, a.shape())},
       [&](std::size_t lin, std::span<const std::size_t> offs) { out[offs[0]] += av[lin]; });
  return Tensor::from_values(shape, std::move(out), a.dtype());
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  const Shape& inner = parts.front().shape();
  DType dtype = parts.front().dtype();
  std::vector<double> out;
  out.reserve(parts.size() * inner.numel());
  for (const auto& p : parts) {
    if (p.shape() != inner) throw ShapeError("stack requires equal shapes");
    dtype = promote(dtype, p.dtype());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<std::size_t> dims{parts.size()};
  dims.insert(dims.end(), inner.begin(), inner.end());
  return Tensor::from_values(Shape(dims), std::move(out), dtype);
}

std::vector<Tensor> unstack(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("cannot unstack a scalar");
  const Shape inner(std::vector<std::size_t>(a.shape().begin() + 1, a.shape().end()));
  const std::size_t stride = inner.numel();
  std::vector<Tensor> out;
  const auto av = a.values();
  for (std::size_t i = 0; i < a.shape()[0]; ++i) {
    out.push_back(Tensor::from_values(
        inner, std::vector<double>(av.begin() + i * stride, av.begin() + (i + 1) * stride), a.dtype()));
  }
  return out;
}

Tensor take_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() == 0) throw ShapeError("take_rows on a scalar");
  std::vector<std::size_t> dims = a.shape().dims();
  const std::size_t stride = a.shape().numel() / std::max<std::size_t>(dims[0], 1);
  const auto av = a.values();
  std::vector<double> out;
  out.reserve(rows.size() * stride);
  for (auto r : rows) {
    if (r >= dims[0]) throw ShapeError("row index out of range");
    out.insert(out.end(), av.begin() + r * stride, av.begin() + (r + 1) * stride);
  }
  dims[0] = rows.size();
  return Tensor::from_values(Shape(dims), std::move(out), a.dtype());
}

std::vector<std::size_t> argmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("argmax_rows expects a matrix");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto av = a.values();
  std::vector<std::size_t> out(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 1; j < n; ++j) {
      if (av[i * n + j] > av[i * n + out[i]]) out[i] = j;
    }
  }
  return out;
}

Tensor one_hot(std::span<const std::int64_t> labels, std::size_t classes, DType dtype) {
  std::vector<double> out(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) +
                       " classes");
    }
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::from_values(Shape{labels.size(), classes}, std::move(out), dtype);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
  double m = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::fabs(av[i] - bv[i]));
  return m;
}

}  // namespace dbr::ops
