#include "dbr/functions.hpp"

#include <algorithm>
#include <cmath>

#include "dbr/ops.hpp"

namespace dbr::fn {
namespace {

Variable apply1(std::shared_ptr<FunctionNode> f, std::initializer_list<Variable> inputs) {
  return dbr::apply(std::move(f), inputs).front();
}

bool wanted(std::span<const std::size_t> targets, std::size_t i) {
  return std::find(targets.begin(), targets.end(), i) != targets.end();
}

// Reduces a broadcast gradient back to the shape of the input it came from.
Variable reduce_to(const Variable& g, const Shape& shape) {
  return g.shape() == shape ? g : sum_to(g, shape);
}

class Identity final : public FunctionNode {
 public:
  std::string_view label() const override { return "identity"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {in[0]}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {gy[0]};
  }
};

class Add final : public FunctionNode {
 public:
  std::string_view label() const override { return "add"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::add(in[0], in[1])}; }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(2);
    for (std::size_t i = 0; i < 2; ++i) {
      if (wanted(targets, i)) gx[i] = reduce_to(gy[0], input_shape(i));
    }
    return gx;
  }
};

class Sub final : public FunctionNode {
 public:
  std::string_view label() const override { return "sub"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::sub(in[0], in[1])}; }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(2);
    if (wanted(targets, 0)) gx[0] = reduce_to(gy[0], input_shape(0));
    if (wanted(targets, 1)) gx[1] = reduce_to(neg(gy[0]), input_shape(1));
    return gx;
  }
};

class Mul final : public FunctionNode {
 public:
  std::string_view label() const override { return "mul"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0, 1});
    return {ops::mul(in[0], in[1])};
  }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(2);
    if (wanted(targets, 0)) gx[0] = reduce_to(mul(gy[0], retained_input(1)), input_shape(0));
    if (wanted(targets, 1)) gx[1] = reduce_to(mul(gy[0], retained_input(0)), input_shape(1));
    return gx;
  }
};

class Div final : public FunctionNode {
 public:
  std::string_view label() const override { return "div"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0, 1});
    return {ops::div(in[0], in[1])};
  }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(2);
    const Variable b = retained_input(1);
    const Variable ga = div(gy[0], b);
    if (wanted(targets, 0)) gx[0] = reduce_to(ga, input_shape(0));
    if (wanted(targets, 1)) gx[1] = reduce_to(neg(mul(ga, div(retained_input(0), b))), input_shape(1));
    return gx;
  }
};

class Neg final : public FunctionNode {
 public:
  std::string_view label() const override { return "neg"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::neg(in[0])}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {neg(gy[0])};
  }
};

class MatMul final : public FunctionNode {
 public:
  std::string_view label() const override { return "matmul"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0, 1});
    return {ops::matmul(in[0], in[1])};
  }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(2);
    if (wanted(targets, 0)) gx[0] = matmul(gy[0], transpose(retained_input(1)));
    if (wanted(targets, 1)) gx[1] = matmul(transpose(retained_input(0)), gy[0]);
    return gx;
  }
};

class Linear final : public FunctionNode {
 public:
  std::string_view label() const override { return "linear"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0, 1});
    const Tensor& x = in[0];
    const Tensor& W = in[1];
    if (x.rank() != 2 || W.rank() != 2 || x.shape()[1] != W.shape()[1]) {
      throw ShapeError("linear: incompatible shapes x" + x.shape().str() + " W" + W.shape().str());
    }
    Tensor y = ops::matmul(x, ops::transpose(W));
    if (in.size() == 3) {
      if (in[2].shape() != Shape{W.shape()[0]}) throw ShapeError("linear: bias must have shape (n_out,)");
      y = ops::add(y, in[2]);
    }
    return {y};
  }
  std::vector<Variable> backward(std::span<const std::size_t> targets, std::span<const Variable> gy) override {
    std::vector<Variable> gx(num_inputs());
    if (wanted(targets, 0)) gx[0] = matmul(gy[0], retained_input(1));
    if (wanted(targets, 1)) gx[1] = matmul(transpose(gy[0]), retained_input(0));
    if (num_inputs() == 3 && wanted(targets, 2)) gx[2] = sum(gy[0], std::vector<std::size_t>{0});
    return gx;
  }
};

class ReLU final : public FunctionNode {
 public:
  std::string_view label() const override { return "relu"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0});
    return {ops::relu(in[0])};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    const Variable mask = Variable::constant(ops::positive_mask(retained_input(0).data()));
    return {mul(gy[0], mask)};
  }
};

class Tanh final : public FunctionNode {
 public:
  std::string_view label() const override { return "tanh"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_outputs({0});
    return {ops::tanh(in[0])};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    const Variable y = retained_output(0);
    return {mul(gy[0], sub(scalar_like(y, 1.0), mul(y, y)))};
  }
};

class Exp final : public FunctionNode {
 public:
  std::string_view label() const override { return "exp"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_outputs({0});
    return {ops::exp(in[0])};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {mul(gy[0], retained_output(0))};
  }
};

Shape keepdims_shape(const Shape& in, const Axes& axes) {
  std::vector<std::size_t> dims = in.dims();
  if (!axes) {
    std::fill(dims.begin(), dims.end(), 1);
  } else {
    for (auto a : *axes) dims.at(a) = 1;
  }
  return Shape(dims);
}

class Sum final : public FunctionNode {
 public:
  Sum(Axes axes, bool keepdims) : axes_(std::move(axes)), keepdims_(keepdims) {}
  std::string_view label() const override { return "sum"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::sum(in[0], axes_, keepdims_)}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    const Shape kept = keepdims_shape(input_shape(0), axes_);
    Variable g = gy[0].shape() == kept ? gy[0] : reshape(gy[0], kept);
    return {broadcast_to(g, input_shape(0))};
  }

 private:
  Axes axes_;
  bool keepdims_;
};

class Reshape final : public FunctionNode {
 public:
  explicit Reshape(Shape shape) : shape_(std::move(shape)) {}
  std::string_view label() const override { return "reshape"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::reshape(in[0], shape_)}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {reshape(gy[0], input_shape(0))};
  }

 private:
  Shape shape_;
};

class Transpose final : public FunctionNode {
 public:
  explicit Transpose(std::vector<std::size_t> perm) : perm_(std::move(perm)) {}
  std::string_view label() const override { return "transpose"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    if (perm_.empty()) {
      for (std::size_t i = 0; i < in[0].rank(); ++i) perm_.push_back(in[0].rank() - 1 - i);
    }
    return {ops::transpose(in[0], perm_)};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    std::vector<std::size_t> inverse(perm_.size());
    for (std::size_t j = 0; j < perm_.size(); ++j) inverse[perm_[j]] = j;
    return {transpose(gy[0], inverse)};
  }

 private:
  std::vector<std::size_t> perm_;
};

class BroadcastTo final : public FunctionNode {
 public:
  explicit BroadcastTo(Shape shape) : shape_(std::move(shape)) {}
  std::string_view label() const override { return "broadcast_to"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::broadcast_to(in[0], shape_)}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {reduce_to(gy[0], input_shape(0))};
  }

 private:
  Shape shape_;
};

class SumTo final : public FunctionNode {
 public:
  explicit SumTo(Shape shape) : shape_(std::move(shape)) {}
  std::string_view label() const override { return "sum_to"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override { return {ops::sum_to(in[0], shape_)}; }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {gy[0].shape() == input_shape(0) ? gy[0] : broadcast_to(gy[0], input_shape(0))};
  }

 private:
  Shape shape_;
};

class SoftmaxCrossEntropy final : public FunctionNode {
 public:
  explicit SoftmaxCrossEntropy(std::vector<std::int64_t> labels) : labels_(std::move(labels)) {}
  std::string_view label() const override { return "softmax_cross_entropy"; }

  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0});
    const Tensor& x = in[0];
    if (x.rank() != 2 || x.shape()[0] != labels_.size()) {
      throw ShapeError("softmax_cross_entropy: logits " + x.shape().str() + " do not match " +
                       std::to_string(labels_.size()) + " labels");
    }
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    const auto v = x.values();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto label = labels_[i];
      if (label < 0 || static_cast<std::size_t>(label) >= c) {
        throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
      }
      const double* row = v.data() + i * c;
      const double m = *std::max_element(row, row + c);
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
      total += m + std::log(s) - row[label];
    }
    return {Tensor::scalar(n ? total / static_cast<double>(n) : 0.0, x.dtype())};
  }

  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    const Variable x = retained_input(0);
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    // Shifting by the row max is gradient-neutral, so it is a constant.
    const Variable shift = Variable::constant(ops::max(x.data(), std::vector<std::size_t>{1}, true));
    const Variable e = exp(sub(x, shift));
    const Variable p = div(e, sum(e, std::vector<std::size_t>{1}, true));
    const Variable target = Variable::constant(ops::one_hot(labels_, c, x.dtype()));
    const Variable scale = div(gy[0], scalar_like(x, static_cast<double>(n)));
    return {mul(sub(p, target), scale)};
  }

 private:
  std::vector<std::int64_t> labels_;
};

}  // namespace

Variable scalar_like(const Variable& x, double value) { return Variable::constant(Tensor::scalar(value, x.dtype())); }

Variable identity(const Variable& x) { return apply1(std::make_shared<Identity>(), {x}); }
Variable add(const Variable& a, const Variable& b) { return apply1(std::make_shared<Add>(), {a, b}); }
Variable sub(const Variable& a, const Variable& b) { return apply1(std::make_shared<Sub>(), {a, b}); }
Variable mul(const Variable& a, const Variable& b) { return apply1(std::make_shared<Mul>(), {a, b}); }
Variable div(const Variable& a, const Variable& b) { return apply1(std::make_shared<Div>(), {a, b}); }
Variable neg(const Variable& x) { return apply1(std::make_shared<Neg>(), {x}); }
Variable matmul(const Variable& a, const Variable& b) { return apply1(std::make_shared<MatMul>(), {a, b}); }

Variable linear(const Variable& x, const Variable& W, const Variable& b) {
  if (b.defined()) return apply1(std::make_shared<Linear>(), {x, W, b});
  return apply1(std::make_shared<Linear>(), {x, W});
}

Variable relu(const Variable& x) { return apply1(std::make_shared<ReLU>(), {x}); }
Variable tanh(const Variable& x) { return apply1(std::make_shared<Tanh>(), {x}); }
Variable exp(const Variable& x) { return apply1(std::make_shared<Exp>(), {x}); }

Variable sum(const Variable& x, const Axes& axes, bool keepdims) {
  return apply1(std::make_shared<Sum>(axes, keepdims), {x});
}

Variable mean(const Variable& x, const Axes& axes, bool keepdims) {
  std::size_t count = 1;
  if (!axes) {
    count = x.data().numel();
  } else {
    for (auto a : *axes) count *= x.shape()[a];
  }
  return mul(sum(x, axes, keepdims), scalar_like(x, 1.0 / static_cast<double>(std::max<std::size_t>(count, 1))));
}

Variable reshape(const Variable& x, const Shape& shape) { return apply1(std::make_shared<Reshape>(shape), {x}); }
Variable transpose(const Variable& x, std::vector<std::size_t> perm) {
  return apply1(std::make_shared<Transpose>(std::move(perm)), {x});
}
Variable broadcast_to(const Variable& x, const Shape& shape) {
  return apply1(std::make_shared<BroadcastTo>(shape), {x});
}
Variable sum_to(const Variable& x, const Shape& shape) { return apply1(std::make_shared<SumTo>(shape), {x}); }

Variable softmax_cross_entropy(const Variable& logits, std::vector<std::int64_t> labels) {
  return apply1(std::make_shared<SoftmaxCrossEntropy>(std::move(labels)), {logits});
}

}  // namespace dbr::fn

namespace dbr {

Variable operator+(const Variable& a, const Variable& b) { return fn::add(a, b); }
Variable operator-(const Variable& a, const Variable& b) { return fn::sub(a, b); }
Variable operator*(const Variable& a, const Variable& b) { return fn::mul(a, b); }
Variable operator/(const Variable& a, const Variable& b) { return fn::div(a, b); }
Variable operator-(const Variable& x) { return fn::neg(x); }
Variable operator+(const Variable& a, double b) { return fn::add(a, fn::scalar_like(a, b)); }
Variable operator-(const Variable& a, double b) { return fn::sub(a, fn::scalar_like(a, b)); }
Variable operator*(const Variable& a, double b) { return fn::mul(a, fn::scalar_like(a, b)); }
Variable operator/(const Variable& a, double b) { return fn::div(a, fn::scalar_like(a, b)); }
Variable operator+(double a, const Variable& b) { return fn::add(fn::scalar_like(b, a), b); }
Variable operator-(double a, const Variable& b) { return fn::sub(fn::scalar_like(b, a), b); }
Variable operator*(double a, const Variable& b) { return fn::mul(fn::scalar_like(b, a), b); }
Variable operator/(double a, const Variable& b) { return fn::div(fn::scalar_like(b, a), b); }

}  // namespace dbr
