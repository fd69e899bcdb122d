#include <gtest/gtest.h>

#include "dbr/config.hpp"
#include "dbr/data_parallel.hpp"
#include "dbr/error.hpp"

using namespace dbr;

TEST(Config, RoundTrip) {
  RunConfig c;
  c.seed = 42;
  c.lr = 0.0125;
  c.optimizer = "adam";
  c.no_shuffle = true;
  c.endpoints = "127.0.0.1:1,127.0.0.1:2";
  RunConfig back;
  back.apply(parse_key_values(format_key_values(c.to_key_values())));
  EXPECT_EQ(back, c);
}

TEST(Config, BenchWorkersKey) {
  RunConfig c;
  c.subcommand = "bench-allreduce";
  c.apply(parse_key_values("workers = 1,8\nsizes=4k\n"));
  EXPECT_EQ(c.bench_workers, "1,8");
  EXPECT_EQ(c.workers, 1);
}

TEST(Config, CommentsAndErrors) {
  const auto kv = parse_key_values("# comment\n\nseed=3\n");
  ASSERT_EQ(kv.size(), 1u);
  EXPECT_EQ(kv[0].second, "3");
  EXPECT_THROW(parse_key_values("seed 3"), Error);
  RunConfig c;
  EXPECT_THROW(c.apply({{"bogus", "1"}}), Error);
  EXPECT_THROW(c.apply({{"epochs", "ten"}}), Error);
}

TEST(Config, Sizes) {
  EXPECT_EQ(parse_size("1k"), 1024u);
  EXPECT_EQ(parse_size("64K"), 65536u);
  EXPECT_EQ(parse_size("1m"), 1048576u);
  EXPECT_EQ(parse_size("100"), 100u);
  EXPECT_THROW(parse_size("x"), Error);
}

TEST(Config, JsonLinesDeterministic) {
  // Same config and seed: every field except wall-clock time agrees.
  auto lines = [] {
    ClassifierConfig c;
    c.epochs = 3;
    c.optimizer.lr = 0.1;
    std::vector<std::string> out;
    for (auto r : train_classifier(c, make_synthetic(200, 2, 0), make_synthetic(50, 2, 1))) {
      r.wall_ms = 0;
      out.push_back(to_json_line(r));
    }
    return out;
  };
  EXPECT_EQ(lines(), lines());
}
