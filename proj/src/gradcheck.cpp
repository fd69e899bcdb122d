#include "dbr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dbr/functions.hpp"
#include "dbr/ops.hpp"

namespace dbr {
namespace {

using Fn = std::function<Variable(std::span<const Variable>)>;

Tensor random_tensor(const Shape& shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, std::move(v));
}

std::vector<Variable> as_leaves(std::span<const Tensor> inputs) {
  std::vector<Variable> xs;
  for (const auto& t : inputs) xs.emplace_back(t);
  return xs;
}

Variable project(const Variable& y, const Tensor& w) { return fn::sum(fn::mul(y, Variable::constant(w))); }

// Forward value of sum(f(x) * w) without recording.
double projected_value(const Fn& f, std::span<const Tensor> inputs, const Tensor& w) {
  NoBackpropScope scope;
  auto xs = as_leaves(inputs);
  return project(f(xs), w).data().item();
}

Tensor projection_for(const Fn& f, std::span<const Tensor> inputs, std::mt19937_64& rng) {
  Shape shape;
  {
    NoBackpropScope scope;
    auto xs = as_leaves(inputs);
    shape = f(xs).shape();
  }
  return random_tensor(shape, -1.0, 1.0, rng);
}

Tensor perturbed(const Tensor& t, std::size_t j, double delta) {
  Tensor c = t.clone();
  c.mutable_values()[j] += delta;
  return c;
}

std::vector<Tensor> analytic_first(const Fn& f, std::span<const Tensor> inputs, const Tensor& w) {
  auto xs = as_leaves(inputs);
  auto gs = grad(project(f(xs), w), xs);
  std::vector<Tensor> out;
  for (auto& g : gs) out.push_back(g.data());
  return out;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1.0);
}

std::vector<Tensor> sample_inputs(std::span<const InputSpec> specs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> out;
  for (const auto& s : specs) {
    Tensor t = random_tensor(s.shape, s.lo, s.hi, rng);
    if (s.margin > 0.0) {
      for (auto& v : t.mutable_values()) {
        if (std::abs(v) < s.margin) v = v < 0.0 ? -s.margin : s.margin;
      }
    }
    out.push_back(t);
  }
  return out;
}

double check_first_order(const Fn& f, std::span<const Tensor> inputs, std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const Tensor w = projection_for(f, inputs, rng);
  const auto analytic = analytic_first(f, inputs, w);

  double worst = 0.0;
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t j = 0; j < inputs[k].numel(); ++j) {
      probe[k] = perturbed(inputs[k], j, h);
      const double up = projected_value(f, probe, w);
      probe[k] = perturbed(inputs[k], j, -h);
      const double down = projected_value(f, probe, w);
      probe[k] = inputs[k];
      worst = std::max(worst, relative_error(analytic[k].values()[j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

double check_second_order(const Fn& f, std::span<const Tensor> inputs, std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
  const Tensor w = projection_for(f, inputs, rng);
  std::vector<Tensor> v;
  for (const auto& t : inputs) v.push_back(random_tensor(t.shape(), -1.0, 1.0, rng));

  auto gv_value = [&](std::span<const Tensor> at) {
    const auto g = analytic_first(f, at, w);
    double s = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) s += ops::sum(ops::mul(g[k], v[k])).item();
    return s;
  };

  std::vector<Tensor> hvp;
  {
    auto xs = as_leaves(inputs);
    BackwardOptions opts;
    opts.enable_double_backprop = true;
    auto gs = grad(project(f(xs), w), xs, opts);
    Variable m = fn::scalar_like(xs[0], 0.0);
    for (std::size_t k = 0; k < gs.size(); ++k) m = fn::add(m, project(gs[k], v[k]));
    for (auto& g : grad(m, xs)) hvp.push_back(g.data());
  }

  double worst = 0.0;
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t j = 0; j < inputs[k].numel(); ++j) {
      probe[k] = perturbed(inputs[k], j, h);
      const double up = gv_value(probe);
      probe[k] = perturbed(inputs[k], j, -h);
      const double down = gv_value(probe);
      probe[k] = inputs[k];
      worst = std::max(worst, relative_error(hvp[k].values()[j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

std::vector<GradcheckCase> op_catalog() {
  using V = std::span<const Variable>;
  std::vector<GradcheckCase> c;
  c.push_back({"add", {{{3, 4}}, {{4}}}, [](V x) { return fn::add(x[0], x[1]); }});
  c.push_back({"sub", {{{2, 3}}, {{2, 1}}}, [](V x) { return fn::sub(x[0], x[1]); }});
  c.push_back({"mul", {{{3, 4}}, {{3, 1}}}, [](V x) { return fn::mul(x[0], x[1]); }});
  c.push_back({"div", {{{2, 3}}, {{3}, 0.5, 1.5}}, [](V x) { return fn::div(x[0], x[1]); }});
  c.push_back({"neg", {{{2, 3}}}, [](V x) { return fn::neg(x[0]); }});
  c.push_back({"matmul", {{{2, 3}}, {{3, 2}}}, [](V x) { return fn::matmul(x[0], x[1]); }});
  c.push_back({"linear", {{{4, 3}}, {{2, 3}}, {{2}}}, [](V x) { return fn::linear(x[0], x[1], x[2]); }});
  c.push_back({"linear_nobias", {{{4, 3}}, {{2, 3}}}, [](V x) { return fn::linear(x[0], x[1]); }});
  c.push_back({"relu", {{{3, 4}, -1.0, 1.0, 1e-2}}, [](V x) { return fn::relu(x[0]); }, 1e-4});
  c.push_back({"tanh", {{{3}}}, [](V x) { return fn::tanh(x[0]); }});
  c.push_back({"exp", {{{2, 3}}}, [](V x) { return fn::exp(x[0]); }});
  c.push_back({"sum", {{{2, 3}}}, [](V x) { return fn::sum(x[0]); }});
  c.push_back({"sum_axis1_keepdims", {{{2, 3, 2}}},
               [](V x) { return fn::sum(x[0], std::vector<std::size_t>{1}, true); }});
  c.push_back({"mean_axis0", {{{4, 3}}}, [](V x) { return fn::mean(x[0], std::vector<std::size_t>{0}); }});
  c.push_back({"reshape", {{{2, 3}}}, [](V x) { return fn::reshape(x[0], Shape{3, 2}); }});
  c.push_back({"transpose", {{{2, 3, 4}}}, [](V x) { return fn::transpose(x[0], {2, 0, 1}); }});
  c.push_back({"broadcast_to", {{{3, 1}}}, [](V x) { return fn::broadcast_to(x[0], Shape{2, 3, 4}); }});
  c.push_back({"sum_to", {{{2, 3, 4}}}, [](V x) { return fn::sum_to(x[0], Shape{3, 1}); }});
  c.push_back({"softmax_cross_entropy", {{{4, 3}, -2.0, 2.0}},
               [](V x) { return fn::softmax_cross_entropy(x[0], {0, 2, 1, 2}); }});
  // Composite graphs exercising reuse of a variable.
  c.push_back({"tanh_mlp", {{{3, 2}}, {{4, 2}}, {{4}}},
               [](V x) { return fn::tanh(fn::linear(fn::tanh(x[0]), x[1], x[2])); }});
  c.push_back({"cube", {{{5}}}, [](V x) { return fn::mul(fn::mul(x[0], x[0]), x[0]); }});
  return c;
}

GradcheckReport gradcheck(const GradcheckCase& c, std::uint64_t seed) {
  GradcheckReport r;
  r.name = c.name;
  r.tolerance = c.tolerance;
  const auto inputs = sample_inputs(c.inputs, seed);
  r.first_order_error = check_first_order(c.fn, inputs, seed);
  r.passed = r.first_order_error <= c.tolerance;
  if (c.twice_differentiable) {
    r.second_order_error = check_second_order(c.fn, inputs, seed);
    r.passed = r.passed && *r.second_order_error <= c.tolerance;
  }
  return r;
}

}  // namespace dbr
