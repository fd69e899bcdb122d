#include "dbr/communicator.hpp"

#include <algorithm>
#include <exception>
#include <thread>

namespace dbr {

const char* tag_name(Tag tag) {
  switch (tag) {
    case Tag::header: return "header";
    case Tag::reduce_scatter: return "reduce-scatter";
    case Tag::all_gather: return "all-gather";
    case Tag::broadcast: return "broadcast";
    case Tag::barrier: return "barrier";
    case Tag::scatter: return "scatter";
    case Tag::point_to_point: return "point-to-point";
  }
  return "unknown";
}

Mailbox::Mailbox(int size) : queues_(static_cast<std::size_t>(size)), closed_(static_cast<std::size_t>(size)) {}

void Mailbox::push(int source, Message m) {
  {
    std::lock_guard lock(mutex_);
    queues_.at(static_cast<std::size_t>(source)).push_back(std::move(m));
  }
  cv_.notify_all();
}

void Mailbox::close(int source, std::string reason) {
  {
    std::lock_guard lock(mutex_);
    closed_.at(static_cast<std::size_t>(source)) = std::move(reason);
  }
  cv_.notify_all();
}

Message Mailbox::pop(int source, std::chrono::milliseconds timeout) {
  const auto s = static_cast<std::size_t>(source);
  std::unique_lock lock(mutex_);
  const bool ready = cv_.wait_for(lock, timeout, [&] { return !queues_.at(s).empty() || closed_.at(s).has_value(); });
  if (!queues_[s].empty()) {
    Message m = std::move(queues_[s].front());
    queues_[s].pop_front();
    return m;
  }
  if (ready) throw CommError(*closed_[s]);
  throw TimeoutError("timed out after " + std::to_string(timeout.count()) + " ms waiting for rank " +
                     std::to_string(source));
}

Communicator::Communicator(int rank, int size, std::unique_ptr<Transport> transport, std::chrono::milliseconds timeout)
    : rank_(rank),
      size_(size),
      transport_(std::move(transport)),
      timeout_(timeout),
      sent_(static_cast<std::size_t>(size)),
      received_(static_cast<std::size_t>(size)) {
  if (size < 1 || rank < 0 || rank >= size) {
    throw CommError("invalid rank " + std::to_string(rank) + " for size " + std::to_string(size));
  }
}

void Communicator::send(int dest, const Tensor& t, Tag tag) {
  Message m;
  m.seq = sent_.at(static_cast<std::size_t>(dest))++;
  m.tag = tag;
  m.payload = t;
  transport_->send(dest, m);
}

Tensor Communicator::recv(int source, Tag tag) {
  Message m = transport_->receive(source, timeout_);
  const std::uint64_t expected = received_.at(static_cast<std::size_t>(source))++;
  if (m.seq != expected || m.tag != tag) {
    throw CommError("rank " + std::to_string(rank_) + " expected " + tag_name(tag) + " #" + std::to_string(expected) +
                    " from rank " + std::to_string(source) + " but got " + tag_name(m.tag) + " #" +
                    std::to_string(m.seq) + "; collectives were issued in different orders");
  }
  return m.payload;
}

namespace {

Tensor header_of(const Tensor& t) {
  std::vector<double> h{static_cast<double>(t.dtype()), static_cast<double>(t.rank())};
  for (auto d : t.shape()) h.push_back(static_cast<double>(d));
  const Shape shape{h.size()};
  return Tensor::from_values(shape, std::move(h));
}

std::string describe_header(const Tensor& h) {
  auto v = h.values();
  std::string s = dtype_name(static_cast<DType>(static_cast<int>(v[0])));
  s += " (";
  for (std::size_t i = 2; i < v.size(); ++i) s += (i > 2 ? ", " : "") + std::to_string(static_cast<std::size_t>(v[i]));
  return s + ")";
}

}  // namespace

void Communicator::check_headers(const Tensor& t) {
  const int next = (rank_ + 1) % size_;
  const int prev = (rank_ + size_ - 1) % size_;
  const Tensor mine = header_of(t);
  Tensor passing = mine;
  std::optional<std::string> mismatch;
  // Ring all-gather of headers; every rank sees every header, so every rank
  // reaches the same verdict.
  for (int s = 0; s < size_ - 1; ++s) {
    send(next, passing, Tag::header);
    passing = recv(prev, Tag::header);
    if (!mismatch && !std::ranges::equal(passing.values(), mine.values())) {
      mismatch = "allreduce: local tensor is " + describe_header(mine) + " but another rank has " +
                 describe_header(passing);
    }
  }
  if (mismatch) throw ShapeMismatchError(*mismatch);
}

Tensor Communicator::allreduce_sum(const Tensor& t) {
  if (size_ == 1) return t;
  check_headers(t);
  const DType dt = t.dtype();
  const std::size_t n = static_cast<std::size_t>(size_);
  const std::size_t len = t.numel();
  const std::size_t chunk = (len + n - 1) / n;
  auto lo = [&](std::size_t k) { return std::min(k * chunk, len); };
  auto hi = [&](std::size_t k) { return std::min((k + 1) * chunk, len); };
  auto mod = [&](long v) { return static_cast<std::size_t>(((v % size_) + size_) % size_); };
  std::vector<double> buf(t.values().begin(), t.values().end());
  auto chunk_tensor = [&](std::size_t k) {
    return Tensor::from_values(Shape{hi(k) - lo(k)}, std::vector<double>(buf.begin() + static_cast<long>(lo(k)),
                                                                         buf.begin() + static_cast<long>(hi(k))),
                               dt);
  };
  const int next = (rank_ + 1) % size_;
  const int prev = (rank_ + size_ - 1) % size_;

  for (int s = 0; s < size_ - 1; ++s) {
    const std::size_t out = mod(rank_ - s);
    const std::size_t in = mod(rank_ - s - 1);
    send(next, chunk_tensor(out), Tag::reduce_scatter);
    const Tensor got = recv(prev, Tag::reduce_scatter);
    auto g = got.values();
    if (g.size() != hi(in) - lo(in)) throw CommError("allreduce: received a chunk of the wrong length");
    for (std::size_t i = 0; i < g.size(); ++i) buf[lo(in) + i] = round_to(dt, g[i] + buf[lo(in) + i]);
  }
  for (int s = 0; s < size_ - 1; ++s) {
    const std::size_t out = mod(rank_ + 1 - s);
    const std::size_t in = mod(rank_ - s);
    send(next, chunk_tensor(out), Tag::all_gather);
    const Tensor got = recv(prev, Tag::all_gather);
    auto g = got.values();
    if (g.size() != hi(in) - lo(in)) throw CommError("allreduce: received a chunk of the wrong length");
    std::copy(g.begin(), g.end(), buf.begin() + static_cast<long>(lo(in)));
  }
  return Tensor::from_values(t.shape(), std::move(buf), dt);
}

Tensor Communicator::broadcast(const Tensor& t, int root) {
  if (size_ == 1) return t;
  if (rank_ == root) {
    for (int r = 0; r < size_; ++r) {
      if (r != root) send(r, t, Tag::broadcast);
    }
    return t;
  }
  return recv(root, Tag::broadcast);
}

void Communicator::barrier() {
  if (size_ == 1) return;
  const Tensor token = Tensor::scalar(0.0);
  if (rank_ == 0) {
    for (int r = 1; r < size_; ++r) recv(r, Tag::barrier);
    for (int r = 1; r < size_; ++r) send(r, token, Tag::barrier);
  } else {
    send(0, token, Tag::barrier);
    recv(0, Tag::barrier);
  }
}

Tensor Communicator::scatter(const std::vector<Tensor>& parts, int root) {
  if (rank_ == root) {
    if (parts.size() != static_cast<std::size_t>(size_)) {
      throw CommError("scatter: root supplied " + std::to_string(parts.size()) + " parts for " +
                      std::to_string(size_) + " ranks");
    }
    for (int r = 0; r < size_; ++r) {
      if (r != root) send(r, parts[static_cast<std::size_t>(r)], Tag::scatter);
    }
    return parts[static_cast<std::size_t>(root)];
  }
  return recv(root, Tag::scatter);
}

namespace {

class InProcessTransport final : public Transport {
 public:
  InProcessTransport(int rank, std::vector<std::shared_ptr<Mailbox>> boxes) : rank_(rank), boxes_(std::move(boxes)) {}

  void send(int dest, const Message& m) override {
    Message copy = m;
    // Receivers must not share storage with the sender's tensors.
    copy.payload = m.payload.clone();
    boxes_.at(static_cast<std::size_t>(dest))->push(rank_, std::move(copy));
  }

  Message receive(int source, std::chrono::milliseconds timeout) override {
    return boxes_.at(static_cast<std::size_t>(rank_))->pop(source, timeout);
  }

 private:
  int rank_;
  std::vector<std::shared_ptr<Mailbox>> boxes_;
};

}  // namespace

InProcessGroup::InProcessGroup(int size) : claimed_(static_cast<std::size_t>(std::max(size, 0))) {
  if (size < 1) throw CommError("group size must be at least 1");
  for (int r = 0; r < size; ++r) boxes_.push_back(std::make_shared<Mailbox>(size));
}

std::unique_ptr<Communicator> InProcessGroup::communicator(int rank, std::chrono::milliseconds timeout) {
  {
    std::lock_guard lock(mutex_);
    if (rank < 0 || rank >= size()) throw CommError("rank " + std::to_string(rank) + " is outside the group");
    if (claimed_[static_cast<std::size_t>(rank)]) throw CommError("rank " + std::to_string(rank) + " claimed twice");
    claimed_[static_cast<std::size_t>(rank)] = true;
  }
  return std::make_unique<Communicator>(rank, size(), std::make_unique<InProcessTransport>(rank, boxes_), timeout);
}

void launch_inprocess(int size, const std::function<void(Communicator&)>& fn, std::chrono::milliseconds timeout) {
  InProcessGroup group(size);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(size));
  std::vector<std::thread> threads;
  for (int r = 0; r < size; ++r) {
    threads.emplace_back([&, r] {
      try {
        auto comm = group.communicator(r, timeout);
        fn(*comm);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dbr
