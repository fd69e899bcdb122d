#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "dbr/communicator.hpp"
#include "dbr/data_parallel.hpp"
#include "dbr/functions.hpp"
#include "dbr/ops.hpp"

using namespace dbr;
using namespace std::chrono_literals;

namespace {

Tensor case_tensor(int c, int rank) {
  std::mt19937_64 shape_rng(static_cast<std::uint64_t>(c));
  std::vector<std::size_t> dims(shape_rng() % 4);
  for (auto& d : dims) d = shape_rng() % 6;  // zero extents included
  std::mt19937_64 rng(static_cast<std::uint64_t>(c) * 1000 + static_cast<std::uint64_t>(rank));
  std::uniform_real_distribution<double> u(-1, 1);
  const Shape s(dims);
  std::vector<double> v(s.numel());
  for (auto& e : v) e = u(rng);
  return Tensor::from_values(s, std::move(v));
}

void run(bool tcp, int n, const std::function<void(Communicator&)>& fn, std::chrono::milliseconds t = 20000ms) {
  if (tcp) {
    launch_tcp_local(n, fn, t);
  } else {
    launch_inprocess(n, fn, t);
  }
}

class Scalar : public Link {
 public:
  Scalar() {
    auto scope = init_scope();
    w = param("w", Shape{}, Initializer::constant(1.0));
  }
  Variable w;
};

}  // namespace

class AllReduce : public ::testing::TestWithParam<bool> {};

TEST_P(AllReduce, MatchesSerialSumAndAgreesBitwise) {
  const bool tcp = GetParam();
  for (int n : {1, 2, 3, 4, 8}) {
    constexpr int kCases = 100;
    std::vector<std::vector<Tensor>> results(kCases, std::vector<Tensor>(n));
    run(tcp, n, [&](Communicator& comm) {
      for (int c = 0; c < kCases; ++c) results[c][comm.rank()] = comm.allreduce_sum(case_tensor(c, comm.rank()));
    });
    for (int c = 0; c < kCases; ++c) {
      Tensor serial = case_tensor(c, 0);
      for (int r = 1; r < n; ++r) serial = ops::add(serial, case_tensor(c, r));
      for (int r = 0; r < n; ++r) {
        ASSERT_EQ(results[c][r].shape(), serial.shape());
        EXPECT_LE(ops::max_abs_diff(results[c][r], serial), 1e-12) << "n=" << n << " case " << c;
        EXPECT_TRUE(std::ranges::equal(results[c][r].values(), results[c][0].values()));
      }
    }
  }
}

TEST_P(AllReduce, TwoRanksSmall) {
  std::vector<Tensor> got(2);
  run(GetParam(), 2, [&](Communicator& comm) {
    const double base = comm.rank() == 0 ? 1 : 3;
    got[comm.rank()] = comm.allreduce_sum(Tensor::from_values(Shape{2}, {base, base + 1}));
  });
  for (const auto& t : got) EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()), (std::vector<double>{4, 6}));
}

TEST_P(AllReduce, ShapeMismatchOnEveryRank) {
  std::atomic<int> mismatches{0};
  EXPECT_THROW(run(GetParam(), 3,
                   [&](Communicator& comm) {
                     try {
                       comm.allreduce_sum(Tensor::zeros(Shape{comm.rank() == 1 ? 4u : 3u}));
                     } catch (const ShapeMismatchError&) {
                       ++mismatches;
                       throw;
                     }
                   }),
               ShapeMismatchError);
  EXPECT_EQ(mismatches.load(), 3);
}

TEST_P(AllReduce, BroadcastScatterBarrier) {
  run(GetParam(), 4, [&](Communicator& comm) {
    const Tensor b = comm.broadcast(Tensor::scalar(comm.rank() == 2 ? 7.0 : -1.0), 2);
    EXPECT_EQ(b.item(), 7.0);
    std::vector<Tensor> parts;
    if (comm.rank() == 0) {
      for (int r = 0; r < 4; ++r) parts.push_back(Tensor::scalar(10.0 * r));
    }
    EXPECT_EQ(comm.scatter(parts).item(), 10.0 * comm.rank());
    comm.barrier();
  });
}

INSTANTIATE_TEST_SUITE_P(Transports, AllReduce, ::testing::Values(false, true),
                         [](const auto& info) { return info.param ? "tcp" : "inprocess"; });

TEST(Communicator, SizeOneIsIdentity) {
  launch_inprocess(1, [](Communicator& comm) {
    const Tensor t = Tensor::from_values(Shape{2}, {1, 2});
    EXPECT_EQ(comm.allreduce_sum(t).values()[1], 2.0);
    EXPECT_EQ(comm.broadcast(t).values()[0], 1.0);
    comm.barrier();
  });
}

TEST(Communicator, MissingPeerTimesOut) {
  InProcessGroup group(2);
  auto comm = group.communicator(0, 200ms);
  EXPECT_THROW(comm->allreduce_sum(Tensor::ones(Shape{4})), TimeoutError);
  EXPECT_THROW(group.communicator(0), Error);
}

TEST(Communicator, TcpMissingPeerTimesOut) {
  const auto ports = free_local_ports(2);
  std::vector<Endpoint> eps{{"127.0.0.1", ports[0]}, {"127.0.0.1", ports[1]}};
  EXPECT_THROW(create_tcp_communicator(1, eps, 300ms), TimeoutError);
}

TEST(Communicator, TagMismatchDetected) {
  EXPECT_THROW(launch_inprocess(2,
                                [](Communicator& comm) {
                                  if (comm.rank() == 0) {
                                    comm.send(1, Tensor::scalar(1), Tag::broadcast);
                                  } else {
                                    comm.recv(0, Tag::point_to_point);
                                  }
                                },
                                2000ms),
               CommError);
}

TEST(Communicator, ParseEndpoints) {
  const auto eps = parse_endpoints("127.0.0.1:9000,localhost:9001");
  ASSERT_EQ(eps.size(), 2u);
  EXPECT_EQ(eps[1].host, "localhost");
  EXPECT_EQ(eps[1].port, 9001);
  EXPECT_THROW(parse_endpoint("nohost"), Error);
}

TEST(DataParallel, ShardSizes) {
  EXPECT_EQ(shard_sizes(10, 4), (std::vector<std::size_t>{3, 3, 2, 2}));
}

TEST(DataParallel, ScatterContiguousAndComplete) {
  const Dataset data = make_synthetic(10, 2, 1);
  std::vector<Dataset> shards(4);
  launch_inprocess(4, [&](Communicator& comm) { shards[comm.rank()] = scatter_dataset(data, comm, false, 0); });
  std::size_t k = 0;
  for (const auto& s : shards) {
    for (const auto& e : s) {
      EXPECT_TRUE(std::ranges::equal(e.x.values(), data[k].x.values()));
      EXPECT_EQ(e.label, data[k].label);
      ++k;
    }
  }
  EXPECT_EQ(k, data.size());

  std::vector<Dataset> shuffled(3);
  launch_inprocess(3, [&](Communicator& comm) { shuffled[comm.rank()] = scatter_dataset(data, comm, true, 9); });
  std::multiset<double> seen, all;
  for (const auto& s : shuffled)
    for (const auto& e : s) seen.insert(e.x.values()[0]);
  for (const auto& e : data) all.insert(e.x.values()[0]);
  EXPECT_EQ(seen, all);
}

TEST(DataParallel, BroadcastParams) {
  std::vector<std::uint64_t> sums(3);
  launch_inprocess(3, [&](Communicator& comm) {
    MLP m(2, 4, 2, 100 + static_cast<std::uint64_t>(comm.rank()));
    broadcast_params(m, comm);
    sums[comm.rank()] = param_checksum(m);
  });
  EXPECT_EQ(sums[0], sums[1]);
  EXPECT_EQ(sums[0], sums[2]);
  MLP a(2, 4, 2, 100), b(2, 4, 2, 100);
  EXPECT_EQ(sums[0], param_checksum(a));
  launch_inprocess(1, [&](Communicator& comm) { broadcast_params(b, comm); });
  EXPECT_EQ(param_checksum(a), param_checksum(b));
}

TEST(DataParallel, AveragesGradients) {
  std::vector<double> applied(2);
  launch_inprocess(2, [&](Communicator& comm) {
    Scalar m;
    MultiNodeOptimizer opt(std::make_unique<SGD>(1.0), comm);
    opt.setup(m);
    const double g = comm.rank() == 0 ? 1.0 : 3.0;
    m.w.set_grad(Variable(Tensor::scalar(g), false));
    opt.update();
    applied[comm.rank()] = 1.0 - m.w.data().item();
  });
  EXPECT_EQ(applied[0], 2.0);
  EXPECT_EQ(applied[1], 2.0);
}

TEST(DataParallel, SingleRankWrapperMatchesBase) {
  const Dataset d = make_synthetic(32, 2, 3);
  std::vector<std::size_t> idx(32);
  for (std::size_t i = 0; i < 32; ++i) idx[i] = i;
  const Batch b = make_batch(d, idx);
  MLP plain(2, 6, 2, 1), wrapped(2, 6, 2, 1);
  Adam base;
  base.setup(plain);
  std::uint64_t wrapped_sum = 0;
  launch_inprocess(1, [&](Communicator& comm) {
    MultiNodeOptimizer opt(std::make_unique<Adam>(), comm);
    opt.setup(wrapped);
    for (int i = 0; i < 3; ++i) {
      wrapped.cleargrads();
      classification_loss(wrapped, b).backward();
      opt.update();
    }
    wrapped_sum = param_checksum(wrapped);
  });
  for (int i = 0; i < 3; ++i) {
    plain.cleargrads();
    classification_loss(plain, b).backward();
    base.update();
  }
  EXPECT_EQ(param_checksum(plain), wrapped_sum);
}

TEST(DataParallel, StructuralDivergenceNamesPath) {
  std::mutex mu;
  std::vector<std::string> messages;
  EXPECT_THROW(launch_inprocess(2,
                                [&](Communicator& comm) {
                                  Linear l(3, comm.rank() == 0 ? 2 : 4);
                                  MultiNodeOptimizer opt(std::make_unique<SGD>(0.1), comm);
                                  opt.setup(l);
                                  for (auto& p : l.params()) p.set_grad(Variable(Tensor::zeros(p.shape()), false));
                                  try {
                                    opt.update();
                                  } catch (const ShapeMismatchError& e) {
                                    std::lock_guard lock(mu);
                                    messages.emplace_back(e.what());
                                    throw;
                                  }
                                },
                                5000ms),
               ShapeMismatchError);
  ASSERT_FALSE(messages.empty());
  for (const auto& m : messages) EXPECT_NE(m.find("/W"), std::string::npos) << m;
}

TEST(DataParallel, DynamicModelPerRank) {
  // Each rank runs its own data-dependent depth over a shared layer, so the
  // graphs differ per rank while the parameter set is identical.
  std::vector<std::uint64_t> sums(3);
  const Dataset data = make_synthetic(60, 3, 4);
  launch_inprocess(3, [&](Communicator& comm) {
    Linear layer(3, 3, 1);
    const Dataset shard = scatter_dataset(data, comm, true, 2);
    MultiNodeOptimizer opt(std::make_unique<SGD>(0.05), comm);
    opt.setup(layer);
    SerialIterator it(shard, 5, true, static_cast<std::uint64_t>(comm.rank()));
    for (int step = 0; step < 10; ++step) {
      const Batch b = it.next();
      const std::size_t depth = 1 + static_cast<std::size_t>(std::abs(b.x.values()[0]) * 10) % 4;
      Variable h = Variable::constant(b.x);
      for (std::size_t k = 0; k < depth; ++k) h = fn::tanh(layer(h));
      layer.cleargrads();
      fn::softmax_cross_entropy(h, b.labels).backward();
      opt.update();
    }
    sums[comm.rank()] = param_checksum(layer);
  });
  EXPECT_EQ(sums[0], sums[1]);
  EXPECT_EQ(sums[0], sums[2]);
}

TEST(DataParallel, BenchRows) {
  std::vector<BenchRow> rows;
  launch_inprocess(2, [&](Communicator& comm) {
    auto r = bench_allreduce(comm, {1024, 8192}, 3);
    if (comm.rank() == 0) rows = r;
  });
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.n, 2);
    EXPECT_GT(r.comm_ms_mean, 0.0);
    EXPECT_LE(r.comm_ms_mean, r.iter_ms_mean);
  }
  launch_inprocess(1, [&](Communicator& comm) { rows = bench_allreduce(comm, {1024}, 3); });
  EXPECT_LT(rows[0].comm_ms_mean, 0.05);
}
