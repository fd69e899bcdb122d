#include <gtest/gtest.h>

#include <cmath>

#include "dbr/functions.hpp"
#include "dbr/gradcheck.hpp"

using namespace dbr;

namespace {
std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
Variable mat(const Shape& s, std::vector<double> v) { return Variable(Tensor::from_values(s, std::move(v))); }
}  // namespace

TEST(Functions, Linear) {
  const Variable y = fn::linear(mat(Shape{1, 2}, {1, 0}), mat(Shape{2, 2}, {2, 3, 4, 5}), mat(Shape{2}, {1, 1}));
  EXPECT_EQ(vals(y.data()), (std::vector<double>{3, 5}));
  EXPECT_THROW(fn::linear(mat(Shape{1, 3}, {1, 0, 0}), mat(Shape{2, 2}, {2, 3, 4, 5})), ShapeError);
}

TEST(Functions, TanhAtZero) {
  const Variable x(Tensor::scalar(0.0));
  const Variable y = fn::tanh(x);
  EXPECT_EQ(y.data().item(), 0);
  y.backward();
  EXPECT_EQ(x.grad().data().item(), 1);
}

TEST(Functions, SoftmaxCrossEntropyUniform) {
  for (std::size_t c : {2, 3, 10}) {
    const Variable logits(Tensor::full(Shape{4, c}, DType::f64, 0.7));
    const Variable loss = fn::softmax_cross_entropy(logits, {0, 1, 0, 1});
    EXPECT_NEAR(loss.data().item(), std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Functions, SoftmaxCrossEntropyGradient) {
  const Variable logits = mat(Shape{1, 2}, {0, 0});
  fn::softmax_cross_entropy(logits, {1}).backward();
  EXPECT_EQ(vals(logits.grad().data()), (std::vector<double>{0.5, -0.5}));
  EXPECT_THROW(fn::softmax_cross_entropy(logits, {2}), Error);
}

TEST(Functions, MeanDividesByCount) {
  const Variable x = mat(Shape{2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(fn::mean(x).data().item(), 2.5);
  EXPECT_EQ(vals(fn::mean(x, std::vector<std::size_t>{0}).data()), (std::vector<double>{2, 3}));
}

TEST(Functions, BroadcastGradientsReduce) {
  const Variable a = mat(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const Variable b = mat(Shape{3}, {1, 1, 1});
  fn::sum(a * b).backward();
  EXPECT_EQ(vals(b.grad().data()), (std::vector<double>{5, 7, 9}));
}

TEST(Functions, ReluSubgradientAtZero) {
  const Variable x = mat(Shape{3}, {-1, 0, 2});
  fn::sum(fn::relu(x)).backward();
  EXPECT_EQ(vals(x.grad().data()), (std::vector<double>{0, 0, 1}));
}

TEST(Gradcheck, SelectedOps) {
  const auto catalog = op_catalog();
  for (const char* name : {"tanh", "matmul", "relu"}) {
    const auto it = std::find_if(catalog.begin(), catalog.end(), [&](const auto& c) { return c.name == name; });
    ASSERT_NE(it, catalog.end()) << name;
    const auto report = gradcheck(*it, 3);
    EXPECT_TRUE(report.passed) << name;
    EXPECT_LE(report.first_order_error, 1e-6) << name;
  }
}

TEST(Gradcheck, WholeCatalogSecondOrder) {
  for (const auto& c : op_catalog()) {
    const auto report = gradcheck(c, 11);
    EXPECT_TRUE(report.passed) << c.name << " first " << report.first_order_error;
    if (c.twice_differentiable) {
      ASSERT_TRUE(report.second_order_error.has_value()) << c.name;
      EXPECT_LE(*report.second_order_error, 1e-4) << c.name;
    }
  }
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A "square" that forgets the factor 2 through a detached copy.
  const auto f = [](std::span<const Variable> x) { return x[0] * Variable::constant(x[0].data()); };
  const Tensor in = Tensor::from_values(Shape{3}, {0.3, -0.6, 0.9});
  EXPECT_GT(check_first_order(f, std::span<const Tensor>(&in, 1), 1), 1e-3);
}

TEST(Gradcheck, MarginAvoidsKink) {
  const std::vector<InputSpec> specs{{Shape{200}, -1, 1, 1e-2}};
  const auto xs = sample_inputs(specs, 5);
  for (double v : xs[0].values()) EXPECT_GE(std::abs(v), 1e-2);
}
