#include "dbr/training.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "dbr/functions.hpp"
#include "dbr/ops.hpp"

namespace dbr {

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch b;
  std::vector<Tensor> xs;
  xs.reserve(indices.size());
  for (auto i : indices) {
    const Example& e = data.at(i);
    xs.push_back(e.x);
    b.labels.push_back(e.label);
  }
  b.x = ops::stack(xs);
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

SerialIterator::SerialIterator(const Dataset& data, std::size_t batch_size, bool shuffle, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
  if (data_.empty()) throw Error("SerialIterator: dataset is empty");
  if (batch_size_ == 0) throw Error("SerialIterator: batch size must be positive");
  reorder();
}

void SerialIterator::reorder() {
  order_.resize(data_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
}

Batch SerialIterator::next() {
  const std::size_t end = std::min(position_ + batch_size_, order_.size());
  Batch b = make_batch(data_, std::span<const std::size_t>(order_).subspan(position_, end - position_));
  position_ = end;
  is_new_epoch_ = false;
  if (position_ == order_.size()) {
    ++epoch_;
    is_new_epoch_ = true;
    position_ = 0;
    reorder();
  }
  return b;
}

Variable classification_loss(Link& model, const Batch& batch) {
  return fn::softmax_cross_entropy(model(Variable::constant(batch.x)), batch.labels);
}

StandardUpdater::StandardUpdater(SerialIterator& iterator, Optimizer& optimizer, Link& model, LossFn loss)
    : iterator_(iterator), optimizer_(optimizer), model_(model), loss_(std::move(loss)) {}

double StandardUpdater::update_one() {
  Batch batch = iterator_.next();
  model_.cleargrads();
  double value;
  {
    Variable loss = loss_(model_, batch);
    loss.backward();
    value = loss.data().item();
  }
  optimizer_.update();
  ++iteration_;
  return value;
}

EvalResult evaluate(Link& model, const Dataset& data, std::size_t batch_size) {
  NoBackpropScope no_record;
  EvalResult r;
  if (data.empty()) return r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(start + batch_size, data.size()); ++i) idx.push_back(i);
    Batch b = make_batch(data, idx);
    Variable logits = model(Variable::constant(b.x));
    loss_sum += fn::softmax_cross_entropy(logits, b.labels).data().item() * static_cast<double>(b.size());
    const auto pred = ops::argmax_rows(logits.data());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (static_cast<std::int64_t>(pred[i]) == b.labels[i]) ++correct;
    }
  }
  r.mean_loss = loss_sum / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

std::vector<EpochRecord> Trainer::run() {
  std::vector<EpochRecord> records;
  for (std::size_t e = 1; e <= epochs_; ++e) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t steps = 0;
    if (iterations_per_epoch_) {
      for (; steps < *iterations_per_epoch_; ++steps) loss_sum += updater_.update_one();
    } else {
      do {
        loss_sum += updater_.update_one();
        ++steps;
      } while (!updater_.iterator().is_new_epoch());
    }
    EpochRecord rec;
    rec.epoch = e;
    rec.mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    if (reduce_loss_) rec.mean_loss = reduce_loss_(rec.mean_loss);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    for (auto& ext : extensions_) ext(rec);
    records.push_back(rec);
  }
  return records;
}

Extension make_evaluator(Link& model, const Dataset& data, std::size_t batch_size) {
  return [&model, &data, batch_size](EpochRecord& rec) {
    const EvalResult r = evaluate(model, data, batch_size);
    rec.val_loss = r.mean_loss;
    rec.val_accuracy = r.accuracy;
  };
}

std::string to_json_line(const EpochRecord& record) {
  nlohmann::ordered_json j;
  j["epoch"] = record.epoch;
  j["mean_loss"] = record.mean_loss;
  j["val_accuracy"] = record.val_accuracy ? nlohmann::ordered_json(*record.val_accuracy) : nullptr;
  j["wall_ms"] = record.wall_ms;
  return j.dump();
}

Dataset make_synthetic(std::size_t count, std::size_t dim, std::uint64_t seed, DType dtype) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset d;
  d.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const bool positive = coin(rng);
    std::vector<double> x(dim);
    for (auto& v : x) v = (positive ? 1.5 : -1.5) + noise(rng);
    d.push_back({Tensor::from_values(Shape{dim}, std::move(x), dtype), positive ? 1 : 0});
  }
  return d;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& file) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw SerializationError("truncated IDX header in " + file.string());
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

// Returns dims and the raw unsigned bytes.
std::pair<std::vector<std::size_t>, std::vector<unsigned char>> read_idx(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw SerializationError("cannot open " + file.string());
  const std::uint32_t magic = read_be32(in, file);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    throw SerializationError(file.string() + ": only unsigned-byte IDX files are supported");
  }
  std::vector<std::size_t> dims(magic & 0xff);
  std::size_t total = 1;
  for (auto& d : dims) {
    d = read_be32(in, file);
    total *= d;
  }
  std::vector<unsigned char> bytes(total);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total))) {
    throw SerializationError(file.string() + ": payload shorter than its header says");
  }
  return {dims, bytes};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  auto [idims, pixels] = read_idx(images);
  auto [ldims, label_bytes] = read_idx(labels);
  if (idims.empty() || ldims.size() != 1 || idims[0] != ldims[0]) {
    throw SerializationError("IDX image and label files disagree on the number of examples");
  }
  const std::size_t n = idims[0];
  const std::size_t per = n ? pixels.size() / n : 0;
  Dataset d;
  d.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(per);
    for (std::size_t j = 0; j < per; ++j) x[j] = pixels[i * per + j] / 255.0;
    d.push_back({Tensor::from_values(Shape{per}, std::move(x), DType::f32), label_bytes[i]});
  }
  return d;
}

}  // namespace dbr
