#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dbr/tensor.hpp"

namespace dbr {

enum class Tag : std::uint8_t {
  header = 1,
  reduce_scatter = 2,
  all_gather = 3,
  broadcast = 4,
  barrier = 5,
  scatter = 6,
  point_to_point = 7,
};

const char* tag_name(Tag tag);

struct Message {
  std::uint64_t seq = 0;
  Tag tag = Tag::point_to_point;
  Tensor payload;
};

// Per-source FIFO queues for one receiving rank.
class Mailbox {
 public:
  explicit Mailbox(int size);

  void push(int source, Message m);
  // Marks `source` as gone; pending and future receives from it fail.
  void close(int source, std::string reason);
  Message pop(int source, std::chrono::milliseconds timeout);

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::deque<Message>> queues_;
  std::vector<std::optional<std::string>> closed_;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(int dest, const Message& m) = 0;
  virtual Message receive(int source, std::chrono::milliseconds timeout) = 0;
};

inline constexpr std::chrono::milliseconds kDefaultTimeout{30000};

// Blocking collectives over a transport. All ranks must issue the same
// collectives in the same order; per-peer sequence numbers and tags check
// that on every receive.
class Communicator {
 public:
  Communicator(int rank, int size, std::unique_ptr<Transport> transport,
               std::chrono::milliseconds timeout = kDefaultTimeout);

  int rank() const noexcept { return rank_; }
  int size() const noexcept { return size_; }
  std::chrono::milliseconds timeout() const noexcept { return timeout_; }

  // Ring all-reduce: reduce-scatter then all-gather over ceil(len/n) chunks.
  // Every rank receives bitwise identical values. Shapes and dtypes are
  // checked across ranks first (ShapeMismatchError on disagreement).
  Tensor allreduce_sum(const Tensor& t);

  // Root's tensor on every rank.
  Tensor broadcast(const Tensor& t, int root = 0);

  void barrier();

  // Root passes one tensor per rank; every rank gets its own.
  Tensor scatter(const std::vector<Tensor>& parts, int root = 0);

  void send(int dest, const Tensor& t, Tag tag = Tag::point_to_point);
  Tensor recv(int source, Tag tag = Tag::point_to_point);

 private:
  void check_headers(const Tensor& t);

  int rank_;
  int size_;
  std::unique_ptr<Transport> transport_;
  std::chrono::milliseconds timeout_;
  std::vector<std::uint64_t> sent_;
  std::vector<std::uint64_t> received_;
};

// Channels shared by the ranks of one process.
class InProcessGroup {
 public:
  explicit InProcessGroup(int size);
  int size() const noexcept { return static_cast<int>(boxes_.size()); }

  // Each rank may be claimed once.
  std::unique_ptr<Communicator> communicator(int rank, std::chrono::milliseconds timeout = kDefaultTimeout);

 private:
  std::mutex mutex_;
  std::vector<bool> claimed_;
  std::vector<std::shared_ptr<Mailbox>> boxes_;
};

// Runs fn(comm) on `size` threads with in-process communicators, rethrowing
// the first failure.
void launch_inprocess(int size, const std::function<void(Communicator&)>& fn,
                      std::chrono::milliseconds timeout = kDefaultTimeout);

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

Endpoint parse_endpoint(const std::string& text);
std::vector<Endpoint> parse_endpoints(const std::string& comma_separated);

// Full mesh over TCP: rank r listens on endpoints[r], connects to lower ranks
// and accepts higher ones.
std::unique_ptr<Communicator> create_tcp_communicator(int rank, const std::vector<Endpoint>& endpoints,
                                                      std::chrono::milliseconds timeout = kDefaultTimeout);

// Ports currently free on the loopback interface.
std::vector<std::uint16_t> free_local_ports(int count);

// launch_inprocess over loopback TCP sockets instead of in-memory channels.
void launch_tcp_local(int size, const std::function<void(Communicator&)>& fn,
                      std::chrono::milliseconds timeout = kDefaultTimeout);

}  // namespace dbr
