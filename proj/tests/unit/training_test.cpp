#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dbr/functions.hpp"
#include "dbr/training.hpp"

using namespace dbr;

namespace {

Dataset counting(std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    d.push_back({Tensor::from_values(Shape{1}, {static_cast<double>(i)}), static_cast<std::int64_t>(i % 2)});
  }
  return d;
}

}  // namespace

TEST(Iterator, BatchSizesAndEpoch) {
  const Dataset d = counting(10);
  SerialIterator it(d, 3, false);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> order;
  for (int i = 0; i < 4; ++i) {
    const Batch b = it.next();
    sizes.push_back(b.size());
    order.insert(order.end(), b.indices.begin(), b.indices.end());
    EXPECT_EQ(it.is_new_epoch(), i == 3);
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
  EXPECT_EQ(it.epoch(), 1u);
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], i);
}

TEST(Iterator, ShuffledEpochsArePermutations) {
  const Dataset d = counting(10);
  auto epoch_orders = [&](std::uint64_t seed) {
    SerialIterator it(d, 4, true, seed);
    std::vector<std::vector<std::size_t>> epochs(2);
    for (int e = 0; e < 2; ++e) {
      do {
        const Batch b = it.next();
        epochs[e].insert(epochs[e].end(), b.indices.begin(), b.indices.end());
      } while (!it.is_new_epoch());
    }
    return epochs;
  };
  const auto a = epoch_orders(7);
  for (const auto& e : a) EXPECT_EQ(std::set<std::size_t>(e.begin(), e.end()).size(), 10u);
  EXPECT_NE(a[0], a[1]);
  EXPECT_EQ(a, epoch_orders(7));
}

TEST(Training, UpdaterIsDeterministic) {
  const Dataset d = make_synthetic(64, 2, 3);
  auto run = [&] {
    MLP m(2, 8, 2, 5);
    SGD opt(0.1);
    opt.setup(m);
    SerialIterator it(d, 16, true, 1);
    StandardUpdater up(it, opt, m);
    std::vector<double> losses;
    for (int i = 0; i < 6; ++i) losses.push_back(up.update_one());
    return losses;
  };
  const auto a = run();
  for (double l : a) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(a, run());
}

TEST(Training, GradientNonzero) {
  const Dataset d = make_synthetic(8, 2, 3);
  MLP m(2, 8, 2, 5);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  classification_loss(m, make_batch(d, idx)).backward();
  double norm = 0;
  for (const auto& p : m.params()) {
    for (double g : p.grad().data().values()) norm += g * g;
  }
  EXPECT_GT(norm, 0);
}

TEST(Training, TrainerEmitsRecordPerEpoch) {
  const Dataset train = make_synthetic(100, 2, 1);
  const Dataset val = make_synthetic(50, 2, 2);
  MLP m(2, 8, 2, 0);
  SGD opt(0.1);
  opt.setup(m);
  SerialIterator it(train, 32, true, 0);
  StandardUpdater up(it, opt, m);
  Trainer trainer(up, 2);
  trainer.extend(make_evaluator(m, val, 64));
  int calls = 0;
  trainer.extend([&](EpochRecord& r) {
    ++calls;
    EXPECT_TRUE(r.val_accuracy.has_value());
  });
  const auto records = trainer.run();
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(records[1].epoch, 2u);
  EXPECT_EQ(up.iteration(), 8u);  // 4 batches per epoch
}

TEST(Training, EvaluateSeparableAndRepeatable) {
  Dataset d;
  for (int i = 0; i < 40; ++i) {
    const double x = i < 20 ? -2.0 - i * 0.1 : 2.0 + i * 0.1;
    d.push_back({Tensor::from_values(Shape{1}, {x}), i < 20 ? 0 : 1});
  }
  MLP m(1, 8, 2, 4);
  SGD opt(0.2);
  opt.setup(m);
  SerialIterator it(d, 8, true, 0);
  StandardUpdater up(it, opt, m);
  for (int i = 0; i < 300; ++i) up.update_one();

  auto& reg = BufferRegistry::instance();
  const auto before = reg.live_count();
  const auto e1 = evaluate(m, d, 7);
  const auto e2 = evaluate(m, d, 7);
  EXPECT_EQ(reg.live_count(), before);
  EXPECT_EQ(e1.accuracy, 1.0);
  EXPECT_EQ(e1.mean_loss, e2.mean_loss);
  for (const auto& p : m.params()) EXPECT_TRUE(p.has_grad());  // untouched by evaluate
}

TEST(Training, UntrainedUniformLogitsNearChance) {
  // Zero weights give uniform logits, so argmax picks class 0 everywhere and
  // accuracy equals the class-0 fraction, ~1/2 within a binomial 4-sigma band.
  const Dataset d = make_synthetic(2000, 2, 8);
  MLP m(2, 4, 2, 0);
  for (auto& p : m.params()) p.mutable_data() = Tensor::zeros(p.shape());
  const auto e = evaluate(m, d, 100);
  EXPECT_NEAR(e.accuracy, 0.5, 4 * std::sqrt(0.25 / 2000));
  EXPECT_NEAR(e.mean_loss, std::log(2.0), 1e-12);
}

TEST(Training, JsonLine) {
  EpochRecord r;
  r.epoch = 3;
  r.mean_loss = 0.5;
  r.val_accuracy = 0.75;
  r.wall_ms = 12.0;
  const std::string s = to_json_line(r);
  EXPECT_EQ(s.find("{\"epoch\":3,\"mean_loss\":0.5"), 0u);
  EXPECT_NE(s.find("\"val_accuracy\":0.75"), std::string::npos);
  EXPECT_NE(s.find("\"wall_ms\""), std::string::npos);
}

TEST(Training, SyntheticIsSeeded) {
  const auto a = make_synthetic(20, 3, 4), b = make_synthetic(20, 3, 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_TRUE(std::ranges::equal(a[i].x.values(), b[i].x.values()));
  }
}
