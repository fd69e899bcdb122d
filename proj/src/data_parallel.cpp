#include "dbr/data_parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <numeric>
#include <random>

#include "dbr/functions.hpp"
#include "dbr/ops.hpp"

namespace dbr {

MultiNodeOptimizer::MultiNodeOptimizer(std::unique_ptr<Optimizer> base, Communicator& comm)
    : base_(std::move(base)), comm_(comm) {
  if (!base_) throw Error("MultiNodeOptimizer needs an optimizer to wrap");
}

void MultiNodeOptimizer::setup(Link& model) {
  Optimizer::setup(model);
  base_->setup(model);
}

void MultiNodeOptimizer::update() {
  if (target_ == nullptr) throw Error("optimizer update() called before setup()");
  if (comm_.size() > 1) {
    const double n = static_cast<double>(comm_.size());
    for (auto& [path, p] : target_->namedparams()) {
      if (!p.has_grad()) throw Error("parameter " + path + " has no gradient");
      Tensor sum;
      try {
        sum = comm_.allreduce_sum(p.grad().data());
      } catch (const ShapeMismatchError& e) {
        throw ShapeMismatchError("model structure differs across ranks at " + path + ": " + e.what());
      }
      p.set_grad(Variable(ops::scale(sum, 1.0 / n), false));
    }
  }
  base_->update();
  t_ = base_->t();
}

void MultiNodeOptimizer::update_one(Tensor&, const Tensor&, std::vector<Tensor>&) {
  throw Error("MultiNodeOptimizer delegates parameter updates to its base optimizer");
}

std::vector<std::size_t> shard_sizes(std::size_t count, int n) {
  const auto un = static_cast<std::size_t>(n);
  std::vector<std::size_t> sizes(un, count / un);
  for (std::size_t r = 0; r < count % un; ++r) ++sizes[r];
  return sizes;
}

Dataset scatter_dataset(const Dataset& data, Communicator& comm, bool shuffle, std::uint64_t seed) {
  std::vector<std::size_t> order;
  if (comm.rank() == 0) {
    order.resize(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) {
      std::mt19937_64 rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
    }
  }
  if (comm.size() == 1) {
    Dataset out;
    for (auto i : order) out.push_back(data[i]);
    return out;
  }

  std::vector<Tensor> xs, labels;
  if (comm.rank() == 0) {
    if (data.empty()) throw Error("scatter_dataset: rank 0 has no data");
    const auto sizes = shard_sizes(data.size(), comm.size());
    std::size_t start = 0;
    std::vector<std::size_t> example_dims{0};
    for (auto d : data[0].x.shape()) example_dims.push_back(d);
    for (auto k : sizes) {
      std::span<const std::size_t> idx(order.data() + start, k);
      if (k == 0) {
        xs.push_back(Tensor::zeros(Shape(example_dims), data[0].x.dtype()));
        labels.push_back(Tensor::zeros(Shape{0}));
      } else {
        Batch b = make_batch(data, idx);
        xs.push_back(b.x);
        std::vector<double> l(b.labels.begin(), b.labels.end());
        labels.push_back(Tensor::from_values(Shape{k}, std::move(l)));
      }
      start += k;
    }
  }
  const Tensor x = comm.scatter(xs);
  const Tensor l = comm.scatter(labels);
  Dataset out;
  if (l.numel() == 0) return out;
  const auto rows = ops::unstack(x);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({rows[i], static_cast<std::int64_t>(l.values()[i])});
  }
  return out;
}

void broadcast_params(Link& model, Communicator& comm, int root) {
  if (comm.size() == 1) return;
  for (auto& [path, p] : model.namedparams()) {
    Tensor t = comm.broadcast(p.data(), root);
    if (comm.rank() == root) continue;
    if (t.shape() != p.shape() || t.dtype() != p.dtype()) {
      throw ShapeMismatchError("broadcast_params: " + path + " is " + p.shape().str() + " here but " +
                               t.shape().str() + " on rank " + std::to_string(root));
    }
    p.mutable_data() = t;
  }
}

std::uint64_t param_checksum(const Link& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [path, p] : model.namedparams()) {
    mix(path.data(), path.size());
    const auto dt = static_cast<std::uint8_t>(p.dtype());
    mix(&dt, 1);
    for (auto d : p.shape()) mix(&d, sizeof d);
    for (double v : p.data().values()) mix(&v, sizeof v);
  }
  return h;
}

std::vector<BenchRow> bench_allreduce(Communicator& comm, const std::vector<std::size_t>& sizes_bytes,
                                      std::size_t iters) {
  using Clock = std::chrono::steady_clock;
  using Ms = std::chrono::duration<double, std::milli>;
  Linear layer(64, 64, 7);
  const Tensor x = initialize(Initializer::he_normal(), Shape{32, 64}, DType::f64, 11, "/bench/x");
  std::vector<BenchRow> rows;
  for (std::size_t bytes : sizes_bytes) {
    const std::size_t elems = std::max<std::size_t>(bytes / sizeof(double), 1);
    const Tensor payload = Tensor::full(Shape{elems}, DType::f64, static_cast<double>(comm.rank() + 1));
    BenchRow row;
    row.n = comm.size();
    row.bytes = elems * sizeof(double);
    comm.barrier();
    for (std::size_t i = 0; i < iters; ++i) {
      const auto t0 = Clock::now();
      layer.cleargrads();
      fn::sum(fn::tanh(layer(Variable::constant(x)))).backward();
      const auto t1 = Clock::now();
      const Tensor reduced = comm.allreduce_sum(payload);
      const auto t2 = Clock::now();
      (void)reduced;
      row.compute_ms_mean += Ms(t1 - t0).count();
      row.comm_ms_mean += Ms(t2 - t1).count();
      row.iter_ms_mean += Ms(t2 - t0).count();
    }
    const double k = static_cast<double>(std::max<std::size_t>(iters, 1));
    row.compute_ms_mean /= k;
    row.comm_ms_mean /= k;
    row.iter_ms_mean /= k;
    rows.push_back(row);
  }
  return rows;
}

std::vector<EpochRecord> train_classifier(const ClassifierConfig& config, const Dataset& train, const Dataset& val,
                                          Communicator* comm, const std::function<void(const EpochRecord&)>& on_epoch,
                                          std::shared_ptr<MLP>* model_out) {
  if (train.empty()) throw Error("training set is empty");
  const std::size_t n_in = train[0].x.numel();
  std::int64_t max_label = 0;
  for (const auto& e : train) max_label = std::max(max_label, e.label);
  for (const auto& e : val) max_label = std::max(max_label, e.label);
  const auto n_out = static_cast<std::size_t>(std::max<std::int64_t>(max_label + 1, 2));
  const int n = comm ? comm->size() : 1;

  auto model = std::make_shared<MLP>(n_in, config.n_hid, n_out, config.seed, config.dtype);
  std::unique_ptr<Optimizer> opt = make_optimizer(config.optimizer);
  Dataset shard;
  if (n > 1) {
    shard = scatter_dataset(train, *comm, config.shuffle, config.seed);
    broadcast_params(*model, *comm);
    opt = std::make_unique<MultiNodeOptimizer>(std::move(opt), *comm);
  } else {
    shard = train;
  }
  opt->setup(*model);
  if (shard.empty()) throw Error("rank received no training examples");

  const std::uint64_t iter_seed = config.seed + 1000003ULL * static_cast<std::uint64_t>(comm ? comm->rank() : 0);
  SerialIterator it(shard, config.batchsize, config.shuffle, iter_seed);
  StandardUpdater updater(it, *opt, *model);
  Trainer trainer(updater, config.epochs);
  if (n > 1) {
    const std::size_t largest = shard_sizes(train.size(), n).front();
    trainer.set_iterations_per_epoch((largest + config.batchsize - 1) / config.batchsize);
    trainer.set_loss_reducer([comm, n](double local) {
      return comm->allreduce_sum(Tensor::scalar(local)).item() / static_cast<double>(n);
    });
  }
  if (!val.empty()) trainer.extend(make_evaluator(*model, val, 256));
  if (on_epoch) trainer.extend([&on_epoch](EpochRecord& rec) { on_epoch(rec); });
  auto records = trainer.run();
  if (model_out) *model_out = model;
  return records;
}

}  // namespace dbr
