#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dbr/tensor.hpp"

// Non-differentiable array arithmetic. Every function returns a tensor backed
// by a fresh buffer.
namespace dbr::ops {

enum class BinaryOp { add, sub, mul, div, max, min };
enum class ReduceOp { sum, max };

// Right-aligned broadcasting; throws ShapeError when extents conflict.
Shape broadcast_shapes(const Shape& a, const Shape& b);
Shape broadcast_shapes(std::span<const Shape> shapes);

// Visits every index of `out` and hands the callback the row-major offset
// into each input. Inputs must broadcast to `out`.
void for_each_broadcast(const Shape& out, std::span<const Shape> inputs,
                        const std::function<void(std::size_t out_index, std::span<const std::size_t> offsets)>& fn);

Tensor ewise(BinaryOp op, const Tensor& a, const Tensor& b);

inline Tensor add(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::div, a, b); }
inline Tensor maximum(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::max, a, b); }
inline Tensor minimum(const Tensor& a, const Tensor& b) { return ewise(BinaryOp::min, a, b); }

// Applies fn to each element; the result keeps the dtype of `a`.
Tensor map(const Tensor& a, const std::function<double(double)>& fn);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
// 1 where a > 0, else 0.
Tensor positive_mask(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

// (m,k) x (k,n) -> (m,n).
Tensor matmul(const Tensor& a, const Tensor& b);

// Folds over `axes` (all axes when nullopt). Empty folds yield the identity:
// 0 for sum, -inf for max.
Tensor reduce(ReduceOp op, const Tensor& a, const std::optional<std::vector<std::size_t>>& axes = std::nullopt,
              bool keepdims = false);
inline Tensor sum(const Tensor& a, const std::optional<std::vector<std::size_t>>& axes = std::nullopt,
                  bool keepdims = false) {
  return reduce(ReduceOp::sum, a, axes, keepdims);
}
inline Tensor max(const Tensor& a, const std::optional<std::vector<std::size_t>>& axes = std::nullopt,
                  bool keepdims = false) {
  return reduce(ReduceOp::max, a, axes, keepdims);
}

// Reverses the axes when `perm` is empty.
Tensor transpose(const Tensor& a, std::span<const std::size_t> perm = {});
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
// Sums over the axes broadcast_to(., a.shape()) would stretch; `shape` must
// broadcast to a.shape().
Tensor sum_to(const Tensor& a, const Shape& shape);

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
// Splits along the leading axis.
std::vector<Tensor> unstack(const Tensor& a);
Tensor take_rows(const Tensor& a, std::span<const std::size_t> rows);
std::vector<std::size_t> argmax_rows(const Tensor& a);
Tensor one_hot(std::span<const std::int64_t> labels, std::size_t classes, DType dtype = DType::f64);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dbr::ops
