#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dbr/link.hpp"
#include "dbr/optimizer.hpp"

namespace dbr {

struct Example {
  Tensor x;
  std::int64_t label = 0;
};

using Dataset = std::vector<Example>;

struct Batch {
  Tensor x;  // stacked inputs, (batch, ...)
  std::vector<std::int64_t> labels;
  std::vector<std::size_t> indices;
  std::size_t size() const noexcept { return labels.size(); }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

// Walks a dataset in batches. Every epoch visits each example once; the last
// batch of an epoch may be short. With shuffling, a new permutation is drawn
// at the start of every epoch from a seeded generator.
class SerialIterator {
 public:
  SerialIterator(const Dataset& data, std::size_t batch_size, bool shuffle = true, std::uint64_t seed = 0);

  Batch next();

  std::size_t epoch() const noexcept { return epoch_; }
  // True right after the batch that completed an epoch.
  bool is_new_epoch() const noexcept { return is_new_epoch_; }
  std::size_t batch_size() const noexcept { return batch_size_; }
  const Dataset& dataset() const noexcept { return data_; }

 private:
  void reorder();

  const Dataset& data_;
  std::size_t batch_size_;
  bool shuffle_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t position_ = 0;
  std::size_t epoch_ = 0;
  bool is_new_epoch_ = false;
};

using LossFn = std::function<Variable(Link& model, const Batch& batch)>;

// softmax_cross_entropy(model(x), labels)
Variable classification_loss(Link& model, const Batch& batch);

class StandardUpdater {
 public:
  StandardUpdater(SerialIterator& iterator, Optimizer& optimizer, Link& model, LossFn loss = classification_loss);

  // cleargrads, forward, backward, update. Returns the loss value.
  double update_one();

  SerialIterator& iterator() noexcept { return iterator_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  SerialIterator& iterator_;
  Optimizer& optimizer_;
  Link& model_;
  LossFn loss_;
  std::size_t iteration_ = 0;
};

struct EvalResult {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

// Example-weighted mean loss and argmax accuracy. Parameters are untouched.
EvalResult evaluate(Link& model, const Dataset& data, std::size_t batch_size);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
  double wall_ms = 0.0;
};

using Extension = std::function<void(EpochRecord&)>;

class Trainer {
 public:
  Trainer(StandardUpdater& updater, std::size_t epochs) : updater_(updater), epochs_(epochs) {}

  // Extensions run in registration order at every epoch boundary.
  void extend(Extension ext) { extensions_.push_back(std::move(ext)); }

  // Fixes the number of updates per epoch instead of following the
  // iterator's epoch boundaries.
  void set_iterations_per_epoch(std::size_t n) { iterations_per_epoch_ = n; }

  // Maps the epoch's mean of local losses to the reported value.
  void set_loss_reducer(std::function<double(double)> reduce) { reduce_loss_ = std::move(reduce); }

  std::vector<EpochRecord> run();

 private:
  StandardUpdater& updater_;
  std::size_t epochs_;
  std::optional<std::size_t> iterations_per_epoch_;
  std::function<double(double)> reduce_loss_;
  std::vector<Extension> extensions_;
};

// Fills val_loss / val_accuracy.
Extension make_evaluator(Link& model, const Dataset& data, std::size_t batch_size);

std::string to_json_line(const EpochRecord& record);

// Two classes with means at -1.5 and +1.5 in every coordinate, unit variance.
Dataset make_synthetic(std::size_t count, std::size_t dim, std::uint64_t seed, DType dtype = DType::f64);

// IDX image and label files. Pixels are scaled to [0,1] and flattened; the
// result is f32.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

}  // namespace dbr
