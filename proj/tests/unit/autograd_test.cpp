#include <gtest/gtest.h>

#include <cmath>

#include "dbr/functions.hpp"
#include "dbr/ops.hpp"
#include "dbr/variable.hpp"

using namespace dbr;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
Variable var(std::vector<double> v) {
  const Shape s{v.size()};
  return Variable(Tensor::from_values(s, std::move(v)));
}

// Declares input 0 retained but reads input 1 in backward.
class Misbehaving : public FunctionNode {
 public:
  std::string_view label() const override { return "misbehaving"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_inputs({0});
    return {ops::add(in[0], in[1])};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    (void)retained_input(1);
    return {gy[0], gy[0]};
  }
};

class OutOfRange : public FunctionNode {
 public:
  std::string_view label() const override { return "out_of_range"; }
  std::vector<Tensor> forward(std::span<const Tensor> in) override {
    retain_outputs({3});
    return {in[0].clone()};
  }
  std::vector<Variable> backward(std::span<const std::size_t>, std::span<const Variable> gy) override {
    return {gy[0]};
  }
};

}  // namespace

TEST(Autograd, LeafRanks) {
  const Variable a = var({1, 2});
  const Variable b = var({1, 2});
  EXPECT_EQ(a.rank(), 0u);
  EXPECT_NE(a.node(), b.node());
  const Variable c = fn::add(a, b);
  EXPECT_EQ(c.rank(), 1u);
  EXPECT_EQ(fn::tanh(c).rank(), 2u);
}

TEST(Autograd, RetentionDeclarations) {
  const Variable x = var({0.5, -0.5});
  const Variable y = fn::tanh(x);
  EXPECT_EQ(y.creator()->retained_output_indices(), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(y.creator()->retained_input_indices().empty());
  EXPECT_FALSE(x.node()->has_retained_data());

  const Variable a = var({1}), b = var({2});
  const Variable m = fn::mul(a, b);
  EXPECT_EQ(m.creator()->retained_input_indices(), (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(a.node()->has_retained_data());

  const Variable c = var({1}), d = var({2});
  const Variable s = fn::add(c, d);
  EXPECT_TRUE(s.creator()->retained_input_indices().empty());
  EXPECT_TRUE(s.creator()->retained_output_indices().empty());
  EXPECT_FALSE(c.node()->has_retained_data());
}

TEST(Autograd, BackwardBasics) {
  const Variable x = var({1, 2, 3});
  fn::sum(x * x).backward();
  EXPECT_EQ(vals(x.grad().data()), (std::vector<double>{2, 4, 6}));

  const Variable a = var({1.5});
  fn::sum(fn::identity(fn::identity(a))).backward();
  EXPECT_EQ(a.grad().data().item(), 1);

  const Variable b = var({4});
  fn::sum(b + b).backward();
  EXPECT_EQ(b.grad().data().item(), 2);
}

TEST(Autograd, LeafGradientsAccumulate) {
  const Variable x = var({3});
  fn::sum(x * 2.0).backward();
  fn::sum(x * 2.0).backward();
  EXPECT_EQ(x.grad().data().item(), 4);
}

TEST(Autograd, IntermediateGradsOnlyWhenRetained) {
  const Variable x = var({1, 2});
  const Variable h = fn::tanh(x);
  fn::sum(h).backward();
  EXPECT_FALSE(h.has_grad());

  const Variable x2 = var({1, 2});
  const Variable h2 = fn::tanh(x2);
  fn::sum(h2).backward(true);
  ASSERT_TRUE(h2.has_grad());
  EXPECT_EQ(vals(h2.grad().data()), (std::vector<double>{1, 1}));
}

TEST(Autograd, GradAtTanh) {
  const Variable x(Tensor::scalar(0.0));
  BackwardOptions keep;
  keep.enable_double_backprop = true;
  const auto g = grad(fn::tanh(x), std::span<const Variable>(&x, 1), keep);
  EXPECT_EQ(g[0].data().item(), 1);
  const auto h = grad(g[0], std::span<const Variable>(&x, 1));
  EXPECT_EQ(h[0].data().item(), 0);
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, HessianVectorCube) {
  const Variable x = var({1, 2});
  BackwardOptions keep;
  keep.enable_double_backprop = true;
  const auto g = grad(fn::sum(x * x * x), std::span<const Variable>(&x, 1), keep);
  const auto hv = grad(fn::sum(g[0] * Variable::constant(Tensor::ones(Shape{2}))), std::span<const Variable>(&x, 1));
  EXPECT_EQ(vals(hv[0].data()), (std::vector<double>{6, 12}));
}

TEST(Autograd, GradUnreachableInputIsZero) {
  const Variable x = var({1, 2});
  const Variable unrelated = var({5});
  const auto g = grad({fn::sum(x)}, {x, unrelated});
  EXPECT_EQ(vals(g[1].data()), (std::vector<double>{0}));
}

TEST(Autograd, NonScalarNeedsSeed) {
  const Variable x = var({1, 2});
  EXPECT_THROW(fn::tanh(x).backward(), ShapeError);
}

TEST(Autograd, RetentionContract) {
  const Variable a = var({1}), b = var({2});
  const auto out = apply(std::make_shared<Misbehaving>(), {a, b});
  EXPECT_THROW(fn::sum(out[0]).backward(), RetentionError);
  EXPECT_THROW(apply(std::make_shared<OutOfRange>(), {a}), RetentionError);
}

TEST(Autograd, UndeclaredOutputAccess) {
  const Variable x = var({1});
  const Variable y = fn::add(x, x);
  EXPECT_THROW(y.creator()->retained_output(0), RetentionError);
}

TEST(Autograd, SecondBackwardThroughReleasedGraph) {
  const Variable x = var({0.3});
  const Variable y = fn::sum(fn::tanh(x));
  y.backward();
  EXPECT_THROW(y.backward(), GraphReleasedError);
}

TEST(Autograd, DoubleBackpropKeepsGraph) {
  const Variable x = var({0.3});
  const Variable y = fn::sum(fn::tanh(x));
  y.backward(false, true);
  EXPECT_NO_THROW(y.backward(false, true));
}

TEST(Autograd, RetrievedOutputIsLiveNode) {
  const Variable x = var({0.2});
  const Variable y = fn::tanh(x);
  EXPECT_EQ(retrieve_retained_output(*y.creator(), 0).node(), y.node());
}

TEST(Autograd, ReplayedOutputMatchesKeptAlive) {
  auto run = [](bool keep) {
    const Variable x = var({0.4, -1.2});
    Variable z;
    Variable kept;
    {
      Variable y = fn::tanh(x);
      z = fn::sum(y * y);
      if (keep) kept = y;
    }
    z.backward();
    return vals(x.grad().data());
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(Autograd, DoubleBackpropThroughReplayedNode) {
  // f(x) = sum(tanh(x)^2), f'' = 2(1 - t^2)(1 - 3 t^2).
  const Variable x = var({0.7});
  BackwardOptions keep;
  keep.enable_double_backprop = true;
  std::vector<Variable> g;
  {
    const Variable y = fn::tanh(x);
    const Variable z = fn::sum(y * y);
    g = grad(z, std::span<const Variable>(&x, 1), keep);
  }
  const auto h = grad(fn::sum(g[0]), std::span<const Variable>(&x, 1));
  auto first = [](double v) {
    const double t = std::tanh(v);
    return 2 * t * (1 - t * t);
  };
  const double numeric = (first(0.7 + 1e-6) - first(0.7 - 1e-6)) / 2e-6;
  EXPECT_NEAR(h[0].data().item(), numeric, 1e-8);
}

TEST(Autograd, NoBackpropScopeRecordsNothing) {
  const Variable x = var({1});
  {
    NoBackpropScope scope;
    EXPECT_FALSE(recording_enabled());
    const Variable y = fn::tanh(x);
    EXPECT_EQ(y.creator(), nullptr);
  }
  EXPECT_TRUE(recording_enabled());
}

TEST(Autograd, CleargradReleasesBuffer) {
  auto& reg = BufferRegistry::instance();
  Variable x = var({1, 2});
  const auto before = reg.live_count();
  x.set_grad(Variable(Tensor::ones(Shape{2}), false));
  x.cleargrad();
  x.cleargrad();
  EXPECT_EQ(reg.live_count(), before);
  grad({fn::sum(x)}, {x});
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, GradDropsEverything) {
  auto& reg = BufferRegistry::instance();
  const auto before = reg.live_count();
  {
    const Variable x = var({0.1, 0.2, 0.3});
    const auto g = grad({fn::sum(fn::exp(fn::tanh(x)) * x)}, {x});
    EXPECT_EQ(g[0].shape(), (Shape{3}));
  }
  EXPECT_EQ(reg.live_count(), before);
}
