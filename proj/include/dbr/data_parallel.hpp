#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dbr/communicator.hpp"
#include "dbr/link.hpp"
#include "dbr/optimizer.hpp"
#include "dbr/training.hpp"

namespace dbr {

// Averages every gradient across ranks (in namedparams order), then runs the
// wrapped optimizer. With one rank it is the wrapped optimizer.
class MultiNodeOptimizer final : public Optimizer {
 public:
  MultiNodeOptimizer(std::unique_ptr<Optimizer> base, Communicator& comm);

  void setup(Link& model) override;
  void update() override;

  Optimizer& base() noexcept { return *base_; }

 protected:
  void update_one(Tensor&, const Tensor&, std::vector<Tensor>&) override;

 private:
  std::unique_ptr<Optimizer> base_;
  Communicator& comm_;
};

// Sizes of the n contiguous fragments of N examples: floor(N/n), with the
// first N mod n one larger.
std::vector<std::size_t> shard_sizes(std::size_t count, int n);

// Rank 0's dataset (optionally permuted with `seed`) split into contiguous
// fragments; rank r receives fragment r. Other ranks' `data` is ignored.
Dataset scatter_dataset(const Dataset& data, Communicator& comm, bool shuffle, std::uint64_t seed);

// Overwrites every parameter with root's value.
void broadcast_params(Link& model, Communicator& comm, int root = 0);

// FNV-1a over every parameter's path, dtype, shape and value bits.
std::uint64_t param_checksum(const Link& model);

struct BenchRow {
  int n = 1;
  std::size_t bytes = 0;
  double comm_ms_mean = 0.0;
  double compute_ms_mean = 0.0;
  double iter_ms_mean = 0.0;
};

// For each size, `iters` iterations of a fixed forward/backward workload
// followed by an all-reduce of an f64 gradient of that many bytes. Times are
// measured on this rank.
std::vector<BenchRow> bench_allreduce(Communicator& comm, const std::vector<std::size_t>& sizes_bytes,
                                      std::size_t iters);

struct ClassifierConfig {
  std::size_t n_hid = 16;
  std::size_t batchsize = 32;
  std::size_t epochs = 20;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  bool shuffle = true;
  DType dtype = DType::f64;
};

// Trains an MLP classifier. With a communicator of size n > 1 the training
// set is scattered from rank 0, replicas start from rank 0's parameters, each
// epoch runs ceil(ceil(N/n)/b) synchronous steps, and the reported loss is
// averaged over ranks. Validation uses the full `val` set on every rank.
std::vector<EpochRecord> train_classifier(const ClassifierConfig& config, const Dataset& train, const Dataset& val,
                                          Communicator* comm = nullptr,
                                          const std::function<void(const EpochRecord&)>& on_epoch = {},
                                          std::shared_ptr<MLP>* model_out = nullptr);

}  // namespace dbr
