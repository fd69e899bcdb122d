#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dbr/ops.hpp"
#include "dbr/snapshot.hpp"
#include "dbr/tensor.hpp"

using namespace dbr;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor random_tensor(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(s.numel());
  for (auto& e : v) e = u(rng);
  return Tensor::from_values(s, std::move(v));
}

}  // namespace

TEST(Tensor, FullAndScalar) {
  EXPECT_EQ(vals(Tensor::full(Shape{2, 2}, DType::f64, 0)), (std::vector<double>{0, 0, 0, 0}));
  const Tensor s = Tensor::full(Shape{}, DType::f64, 3);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.item(), 3);
}

TEST(Tensor, RegistryRoundTrip) {
  auto& reg = BufferRegistry::instance();
  const auto before = reg.live_count();
  std::uint64_t id = 0;
  {
    Tensor t = Tensor::zeros(Shape{4});
    id = t.buffer_id();
    EXPECT_EQ(reg.live_count(), before + 1);
    EXPECT_TRUE(reg.is_live(id));
    Tensor copy = t;  // shares the buffer
    EXPECT_EQ(reg.live_count(), before + 1);
  }
  EXPECT_EQ(reg.live_count(), before);
  EXPECT_FALSE(reg.is_live(id));
}

TEST(Tensor, F32RoundsValues) {
  const Tensor t = Tensor::from_values(Shape{1}, {0.1}, DType::f32);
  EXPECT_EQ(t.values()[0], static_cast<double>(0.1f));
  EXPECT_EQ(promote(DType::f32, DType::f64), DType::f64);
  EXPECT_EQ(ops::add(t, Tensor::scalar(1.0)).dtype(), DType::f64);
}

TEST(Tensor, FromValuesChecksCount) {
  EXPECT_THROW(Tensor::from_values(Shape{2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Ops, Elementwise) {
  const Tensor a = Tensor::from_values(Shape{2}, {1, 2});
  const Tensor b = Tensor::from_values(Shape{2}, {3, 4});
  EXPECT_EQ(vals(ops::add(a, b)), (std::vector<double>{4, 6}));
  EXPECT_EQ(vals(ops::add(a, Tensor::zeros_like(a))), vals(a));
}

TEST(Ops, BroadcastAgainstLoopOracle) {
  const Tensor a = Tensor::from_values(Shape{2, 1}, {1, 2});
  const Tensor b = Tensor::from_values(Shape{2}, {10, 20});
  EXPECT_EQ(vals(ops::mul(a, b)), (std::vector<double>{10, 20, 20, 40}));

  const Tensor x = random_tensor(Shape{3, 1, 4}, 1);
  const Tensor y = random_tensor(Shape{2, 1}, 2);
  const Tensor z = ops::sub(x, y);
  ASSERT_EQ(z.shape(), (Shape{3, 2, 4}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(z.at({i, j, k}), x.at({i, 0, k}) - y.at({j, 0}));
}

TEST(Ops, BroadcastConflict) {
  EXPECT_THROW(ops::broadcast_shapes(Shape{2, 3}, Shape{4}), ShapeError);
}

TEST(Ops, Matmul) {
  const Tensor eye = Tensor::from_values(Shape{2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from_values(Shape{2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vals(ops::matmul(eye, m)), vals(m));
  EXPECT_EQ(ops::matmul(Tensor::from_values(Shape{1, 2}, {1, 2}), Tensor::from_values(Shape{2, 1}, {3, 4})).item(), 11);

  const Tensor a = random_tensor(Shape{3, 4}, 3);
  const Tensor b = random_tensor(Shape{4, 5}, 4);
  const Tensor c = ops::matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), s, 1e-12);
    }
  }
  EXPECT_THROW(ops::matmul(a, a), ShapeError);
}

TEST(Ops, Reductions) {
  EXPECT_EQ(ops::sum(Tensor::from_values(Shape{3}, {1, 2, 3})).item(), 6);
  EXPECT_EQ(vals(ops::max(Tensor::from_values(Shape{2, 2}, {1, 5, 7, 2}), std::vector<std::size_t>{0})),
            (std::vector<double>{7, 5}));

  const Tensor x = random_tensor(Shape{2, 3, 4}, 5);
  const Tensor s = ops::sum(x, std::vector<std::size_t>{1});
  ASSERT_EQ(s.shape(), (Shape{2, 4}));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < 3; ++j) acc += x.at({i, j, k});
      EXPECT_EQ(s.at({i, k}), acc);
    }
  }
  EXPECT_EQ(ops::sum(x, std::vector<std::size_t>{1}, true).shape(), (Shape{2, 1, 4}));
  EXPECT_EQ(ops::sum(Tensor::zeros(Shape{0})).item(), 0);
  EXPECT_EQ(ops::max(Tensor::zeros(Shape{0})).item(), -std::numeric_limits<double>::infinity());
}

TEST(Ops, ShapeManipulation) {
  const Tensor m = Tensor::from_values(Shape{2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vals(ops::transpose(m)), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(vals(ops::broadcast_to(Tensor::from_values(Shape{2}, {1, 2}), Shape{3, 2})),
            (std::vector<double>{1, 2, 1, 2, 1, 2}));
  EXPECT_EQ(vals(ops::sum_to(Tensor::ones(Shape{3, 2}), Shape{2})), (std::vector<double>{3, 3}));
  EXPECT_EQ(ops::reshape(m, Shape{4}).shape(), (Shape{4}));
  EXPECT_THROW(ops::reshape(m, Shape{3}), ShapeError);
}

TEST(Snapshot, RoundTrip) {
  std::vector<SnapshotRecord> recs{{"/l1/W", random_tensor(Shape{2, 3}, 6)},
                                   {"/s", Tensor::scalar(0.25, DType::f32)}};
  std::stringstream buf;
  write_snapshot(buf, recs);
  const auto back = read_snapshot(buf);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].path, "/l1/W");
  EXPECT_EQ(back[0].tensor.shape(), (Shape{2, 3}));
  EXPECT_EQ(vals(back[0].tensor), vals(recs[0].tensor));
  EXPECT_EQ(back[1].tensor.dtype(), DType::f32);
  EXPECT_EQ(back[1].tensor.item(), 0.25);
}

TEST(Snapshot, LittleEndianLayout) {
  std::stringstream buf;
  write_snapshot(buf, {{"a", Tensor::from_values(Shape{1}, {1.0}, DType::f32)}});
  const std::string b = buf.str();
  // u32 len | "a" | u8 dtype | u32 rank | u64 extent | f32 value
  ASSERT_EQ(b.size(), 4u + 1 + 1 + 4 + 8 + 4);
  EXPECT_EQ(b[0], 1);
  EXPECT_EQ(b[4], 'a');
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6], 1);
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 1]), 0x3f);  // 1.0f = 0x3f800000
}

TEST(Snapshot, TruncatedStream) {
  std::stringstream buf;
  write_snapshot(buf, {{"x", Tensor::ones(Shape{3})}});
  std::string s = buf.str();
  s.pop_back();
  std::stringstream cut(s);
  EXPECT_THROW(read_snapshot(cut), SerializationError);
}
