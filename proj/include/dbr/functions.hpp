#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dbr/variable.hpp"

// Differentiable operations. Every backward is written with these same
// operations, so gradients can themselves be differentiated.
//
// Retention per operation:
//   add sub neg sum mean reshape transpose broadcast_to sum_to identity: none
//   mul div matmul linear relu softmax_cross_entropy: inputs
//   tanh exp: output only
namespace dbr::fn {

using Axes = std::optional<std::vector<std::size_t>>;

Variable identity(const Variable& x);
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable div(const Variable& a, const Variable& b);
Variable neg(const Variable& x);

Variable matmul(const Variable& a, const Variable& b);
// x @ W^T + b for x (batch, n_in), W (n_out, n_in), b (n_out,). `b` may be
// undefined.
Variable linear(const Variable& x, const Variable& W, const Variable& b = {});

// Subgradient 0 at x == 0.
Variable relu(const Variable& x);
Variable tanh(const Variable& x);
Variable exp(const Variable& x);

Variable sum(const Variable& x, const Axes& axes = std::nullopt, bool keepdims = false);
// Sum scaled by 1/N, with N the number of folded elements.
Variable mean(const Variable& x, const Axes& axes = std::nullopt, bool keepdims = false);

Variable reshape(const Variable& x, const Shape& shape);
Variable transpose(const Variable& x, std::vector<std::size_t> perm = {});
Variable broadcast_to(const Variable& x, const Shape& shape);
Variable sum_to(const Variable& x, const Shape& shape);

// Mean over the batch of -log softmax(logits)[label]. Labels are class
// indices carried outside the graph.
Variable softmax_cross_entropy(const Variable& logits, std::vector<std::int64_t> labels);

// Rank-0 constant with x's dtype.
Variable scalar_like(const Variable& x, double value);

}  // namespace dbr::fn

namespace dbr {

Variable operator+(const Variable& a, const Variable& b);
Variable operator-(const Variable& a, const Variable& b);
Variable operator*(const Variable& a, const Variable& b);
Variable operator/(const Variable& a, const Variable& b);
Variable operator-(const Variable& x);
Variable operator+(const Variable& a, double b);
Variable operator-(const Variable& a, double b);
Variable operator*(const Variable& a, double b);
Variable operator/(const Variable& a, double b);
Variable operator+(double a, const Variable& b);
Variable operator-(double a, const Variable& b);
Variable operator*(double a, const Variable& b);
Variable operator/(double a, const Variable& b);

}  // namespace dbr
