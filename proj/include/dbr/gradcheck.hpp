#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dbr/variable.hpp"

namespace dbr {

// Sampling range of one f64 input. Values within `margin` of zero are pushed
// away from it (for ops with a kink there).
struct InputSpec {
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
  double margin = 0.0;
};

struct GradcheckCase {
  std::string name;
  std::vector<InputSpec> inputs;
  std::function<Variable(std::span<const Variable>)> fn;
  double tolerance = 1e-6;
  bool twice_differentiable = true;
};

struct GradcheckReport {
  std::string name;
  double first_order_error = 0.0;
  std::optional<double> second_order_error;
  double tolerance = 0.0;
  bool passed = false;
};

// Relative error used throughout: |a - n| / max(|n|, 1).
double relative_error(double analytic, double numeric);

// Largest relative error between grad() and central differences of
// sum(f(x) * w) for a fixed random projection w.
double check_first_order(const std::function<Variable(std::span<const Variable>)>& fn,
                         std::span<const Tensor> inputs, std::uint64_t seed, double h = 1e-6);

// Same comparison for the Hessian-vector product of that projected scalar:
// grad of sum(grad(L) * v) against central differences of the analytic
// gradient.
double check_second_order(const std::function<Variable(std::span<const Variable>)>& fn,
                          std::span<const Tensor> inputs, std::uint64_t seed, double h = 1e-6);

std::vector<Tensor> sample_inputs(std::span<const InputSpec> specs, std::uint64_t seed);

std::vector<GradcheckCase> op_catalog();

GradcheckReport gradcheck(const GradcheckCase& c, std::uint64_t seed);

}  // namespace dbr
