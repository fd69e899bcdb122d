#include <gtest/gtest.h>

#include "dbr/kernel.hpp"

using namespace dbr;
using namespace dbr::kernel;

namespace {
std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
}  // namespace

TEST(KernelParse, Signature) {
  const auto p = parse_signature("float32 x, float32 y");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].name, "x");
  EXPECT_EQ(p[0].type.concrete, DType::f32);
  const auto g = parse_signature("T x, T y");
  EXPECT_TRUE(g[0].type.is_generic());
  EXPECT_EQ(g[0].type.generic, 'T');
  EXPECT_EQ(g[0].type, g[1].type);
  EXPECT_THROW(parse_signature("float32 x float32 y"), ParseError);
  EXPECT_THROW(parse_signature("int8 x"), ParseError);
}

TEST(KernelParse, Expression) {
  const auto a = parse_expr("w = x * y + z");
  EXPECT_EQ(a.target, "w");
  ASSERT_EQ(a.value.kind, Expr::Kind::binary);
  EXPECT_EQ(a.value.op, '+');
  EXPECT_EQ(a.value.args[0].op, '*');
  EXPECT_EQ(a.value.args[0].args[0].name, "x");
  EXPECT_EQ(a.value.args[1].name, "z");
  EXPECT_EQ(to_string(a), "w = ((x * y) + z)");

  const auto n = parse_expr("w = -x");
  EXPECT_EQ(n.value.kind, Expr::Kind::negate);
}

TEST(KernelParse, ErrorOffset) {
  try {
    parse_expr("w = x + * y");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  EXPECT_THROW(parse_expr("w = foo(x)"), ParseError);
  EXPECT_THROW(parse_expr("w = (x + y"), ParseError);
}

TEST(KernelParse, PrintReparses) {
  for (const char* s : {"w = a - b - c", "w = a / (b * c)", "w = -(x + 1.5)", "w = max(x, exp(y))"}) {
    const auto a = parse_expr(s);
    EXPECT_EQ(parse_expr(to_string(a)), a) << s;
  }
}

TEST(Kernel, MyMad) {
  const auto k = compile_elementwise("float32 x, float32 y, float32 z", "float32 w", "w = x * y + z", "my_mad");
  EXPECT_EQ((*k)({Tensor::scalar(2, DType::f32), Tensor::scalar(3, DType::f32), Tensor::scalar(4, DType::f32)})[0].item(),
            10);
  const auto w = (*k)({Tensor::from_values(Shape{2}, {1, 2}, DType::f32), Tensor::from_values(Shape{2}, {3, 4}, DType::f32),
                       Tensor::from_values(Shape{2}, {5, 6}, DType::f32)})[0];
  EXPECT_EQ(vals(w), (std::vector<double>{8, 14}));
  EXPECT_EQ(w.dtype(), DType::f32);
}

TEST(Kernel, OperandOrder) {
  const auto k = compile_elementwise("float64 x, float64 y", "float64 w", "w = x - y / 4", "order");
  EXPECT_EQ((*k)({Tensor::scalar(1), Tensor::scalar(8)})[0].item(), -1);
}

TEST(Kernel, Cache) {
  clear_cache();
  compile_elementwise("float64 x", "float64 y", "y = x + 1", "inc");
  compile_elementwise("float64 x", "float64 y", "y = x + 1", "inc");
  const auto s = cache_stats();
  EXPECT_EQ(s.entries, 1u);
  EXPECT_EQ(s.hits, 1u);
}

TEST(Kernel, CompileErrors) {
  EXPECT_THROW(compile_elementwise("float64 x", "float64 y", "y = q", "bad"), KernelError);
  EXPECT_THROW(compile_elementwise("float64 x", "float64 y", "x = y", "bad"), KernelError);
  EXPECT_THROW(compile_elementwise("float64 x", "T y", "y = x", "bad"), KernelError);
  const auto k = compile_elementwise("float64 x, float64 y", "float64 z", "z = x + y", "two");
  EXPECT_THROW((*k)({Tensor::scalar(1)}), KernelError);
}

TEST(Kernel, Reduction) {
  const auto sum = compile_reduction("float64 x", "float64 v", "v = x", FoldOp::add, 0.0, "sum");
  const Tensor x = Tensor::from_values(Shape{3}, {1, 2, 3});
  EXPECT_EQ(sum->reduce(std::span<const Tensor>(&x, 1)).item(), 6);
  const Tensor empty = Tensor::zeros(Shape{0});
  EXPECT_EQ(sum->reduce(std::span<const Tensor>(&empty, 1)).item(), 0);
  const auto sq = compile_reduction("float64 x", "float64 v", "v = x * x", FoldOp::add, 0.0, "sumsq");
  EXPECT_EQ(sq->reduce(std::span<const Tensor>(&x, 1)).item(), 14);
  EXPECT_THROW(compile_reduction("float64 x", "float64 v", "v = x", FoldOp::add, 1.0, "bad"), KernelError);

  const Tensor m = Tensor::from_values(Shape{2, 2}, {1, 5, 7, 2});
  const auto mx = compile_reduction("float64 x", "float64 v", "v = x", FoldOp::max,
                                    -std::numeric_limits<double>::infinity(), "max");
  EXPECT_EQ(vals(mx->reduce(std::span<const Tensor>(&m, 1), std::vector<std::size_t>{1})),
            (std::vector<double>{5, 7}));
}

TEST(Kernel, GenericResolution) {
  const auto g = compile_elementwise("T x, T y", "T z", "z = x - y", "gsub");
  EXPECT_TRUE(g->is_generic());
  const DType f64s[] = {DType::f64, DType::f64};
  const auto r = resolve_generic(g, f64s);
  EXPECT_FALSE(r->is_generic());
  EXPECT_EQ(r->outputs()[0].type.concrete, DType::f64);
  const auto hits = cache_stats().hits;
  resolve_generic(g, f64s);
  EXPECT_EQ(cache_stats().hits, hits + 1);
  const DType mixed[] = {DType::f32, DType::f64};
  EXPECT_THROW(resolve_generic(g, mixed), KernelError);
  EXPECT_EQ((*g)({Tensor::scalar(1, DType::f32), Tensor::scalar(3, DType::f32)})[0].dtype(), DType::f32);
}
