#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <exception>
#include <sstream>
#include <streambuf>
#include <thread>

#include "dbr/communicator.hpp"
#include "dbr/snapshot.hpp"

namespace dbr {
namespace {

constexpr std::uint32_t kHandshakeMagic = 0x44425231;  // "DBR1"

using Clock = std::chrono::steady_clock;

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

[[noreturn]] void fail(const std::string& what) { throw CommError(what + ": " + std::strerror(errno)); }

sockaddr_in resolve(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res); rc != 0 || res == nullptr) {
    throw CommError("cannot resolve host '" + ep.host + "': " + ::gai_strerror(rc));
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(ep.port);
  return addr;
}

void write_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      fail("send failed");
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Reads with a deadline; used only during the handshake.
void read_exact(int fd, char* data, std::size_t n, Clock::time_point deadline) {
  while (n > 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) throw TimeoutError("timed out during connection handshake");
    pollfd p{fd, POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(left)) <= 0) continue;
    const ssize_t r = ::recv(fd, data, n, 0);
    if (r == 0) throw CommError("peer closed the connection during handshake");
    if (r < 0) {
      if (errno == EINTR) continue;
      fail("recv failed");
    }
    data += r;
    n -= static_cast<std::size_t>(r);
  }
}

std::string encode_handshake(int rank, int size) {
  std::ostringstream out;
  le::put_u32(out, kHandshakeMagic);
  le::put_u32(out, static_cast<std::uint32_t>(rank));
  le::put_u32(out, static_cast<std::uint32_t>(size));
  return out.str();
}

std::pair<int, int> read_handshake(int fd, Clock::time_point deadline) {
  char buf[12];
  read_exact(fd, buf, sizeof buf, deadline);
  std::istringstream in(std::string(buf, sizeof buf));
  if (le::get_u32(in) != kHandshakeMagic) throw CommError("unexpected handshake from a peer");
  const int rank = static_cast<int>(le::get_u32(in));
  const int size = static_cast<int>(le::get_u32(in));
  return {rank, size};
}

void configure(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

// Blocking stream over a connected socket.
class SocketBuf final : public std::streambuf {
 public:
  explicit SocketBuf(int fd) : fd_(fd) {}

 protected:
  int_type underflow() override {
    for (;;) {
      const ssize_t r = ::recv(fd_, buf_, sizeof buf_, 0);
      if (r > 0) {
        setg(buf_, buf_, buf_ + r);
        return traits_type::to_int_type(buf_[0]);
      }
      if (r < 0 && errno == EINTR) continue;
      return traits_type::eof();
    }
  }

 private:
  int fd_;
  char buf_[1 << 16];
};

class TcpTransport final : public Transport {
 public:
  TcpTransport(int rank, int size, std::vector<Socket> peers)
      : rank_(rank), peers_(std::move(peers)), send_locks_(peers_.size()), box_(std::make_shared<Mailbox>(size)) {
    for (int r = 0; r < size; ++r) {
      if (r == rank_) continue;
      readers_.emplace_back([this, r] { read_loop(r); });
    }
  }

  ~TcpTransport() override {
    for (auto& s : peers_) {
      if (s.valid()) ::shutdown(s.fd(), SHUT_RDWR);
    }
    for (auto& t : readers_) t.join();
  }

  void send(int dest, const Message& m) override {
    std::ostringstream out;
    le::put_u64(out, m.seq);
    le::put_u8(out, static_cast<std::uint8_t>(m.tag));
    write_tensor(out, m.payload);
    const std::string bytes = out.str();
    std::lock_guard lock(send_locks_.at(static_cast<std::size_t>(dest)));
    write_all(peers_.at(static_cast<std::size_t>(dest)).fd(), bytes.data(), bytes.size());
  }

  Message receive(int source, std::chrono::milliseconds timeout) override { return box_->pop(source, timeout); }

 private:
  void read_loop(int source) {
    SocketBuf buf(peers_[static_cast<std::size_t>(source)].fd());
    std::istream in(&buf);
    try {
      for (;;) {
        if (in.peek() == std::char_traits<char>::eof()) break;
        Message m;
        m.seq = le::get_u64(in);
        m.tag = static_cast<Tag>(le::get_u8(in));
        m.payload = read_tensor(in);
        box_->push(source, std::move(m));
      }
      box_->close(source, "rank " + std::to_string(source) + " disconnected");
    } catch (const std::exception& e) {
      box_->close(source, "connection to rank " + std::to_string(source) + " failed: " + e.what());
    }
  }

  int rank_;
  std::vector<Socket> peers_;
  std::vector<std::mutex> send_locks_;
  std::shared_ptr<Mailbox> box_;
  std::vector<std::thread> readers_;
};

Socket listen_on(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) fail("socket failed");
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve(ep);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    fail("cannot bind " + ep.host + ":" + std::to_string(ep.port));
  }
  if (::listen(s.fd(), 64) != 0) fail("listen failed");
  return s;
}

Socket connect_to(const Endpoint& ep, Clock::time_point deadline) {
  const sockaddr_in addr = resolve(ep);
  for (;;) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) fail("socket failed");
    if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) return s;
    if (Clock::now() >= deadline) {
      throw TimeoutError("timed out connecting to " + ep.host + ":" + std::to_string(ep.port));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw Error("endpoint '" + text + "' is not host:port");
  }
  Endpoint ep;
  ep.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  std::size_t used = 0;
  unsigned long p = 0;
  try {
    p = std::stoul(port, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != port.size() || p == 0 || p > 65535) throw Error("endpoint '" + text + "' has an invalid port");
  ep.port = static_cast<std::uint16_t>(p);
  return ep;
}

std::vector<Endpoint> parse_endpoints(const std::string& comma_separated) {
  std::vector<Endpoint> out;
  std::stringstream ss(comma_separated);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_endpoint(item));
  }
  return out;
}

std::unique_ptr<Communicator> create_tcp_communicator(int rank, const std::vector<Endpoint>& endpoints,
                                                      std::chrono::milliseconds timeout) {
  const int size = static_cast<int>(endpoints.size());
  if (size < 1 || rank < 0 || rank >= size) {
    throw CommError("rank " + std::to_string(rank) + " is outside the " + std::to_string(size) + " endpoints");
  }
  const auto deadline = Clock::now() + timeout;
  std::vector<Socket> peers(static_cast<std::size_t>(size));
  Socket listener = listen_on(endpoints[static_cast<std::size_t>(rank)]);
  const std::string hello = encode_handshake(rank, size);

  for (int r = 0; r < rank; ++r) {
    Socket s = connect_to(endpoints[static_cast<std::size_t>(r)], deadline);
    configure(s.fd());
    write_all(s.fd(), hello.data(), hello.size());
    const auto [peer_rank, peer_size] = read_handshake(s.fd(), deadline);
    if (peer_size != size) {
      throw CommError("rank " + std::to_string(r) + " was started with size " + std::to_string(peer_size) +
                      ", this rank with " + std::to_string(size));
    }
    if (peer_rank != r) throw CommError("endpoint of rank " + std::to_string(r) + " answered as rank " +
                                        std::to_string(peer_rank));
    peers[static_cast<std::size_t>(r)] = std::move(s);
  }

  for (int pending = size - 1 - rank; pending > 0;) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) {
      throw TimeoutError("timed out waiting for " + std::to_string(pending) + " higher rank(s) to connect");
    }
    pollfd p{listener.fd(), POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(left)) <= 0) continue;
    Socket s(::accept(listener.fd(), nullptr, nullptr));
    if (!s.valid()) continue;
    configure(s.fd());
    const auto [peer_rank, peer_size] = read_handshake(s.fd(), deadline);
    write_all(s.fd(), hello.data(), hello.size());
    if (peer_size != size) {
      throw CommError("a peer was started with size " + std::to_string(peer_size) + ", this rank with " +
                      std::to_string(size));
    }
    if (peer_rank <= rank || peer_rank >= size || peers[static_cast<std::size_t>(peer_rank)].valid()) {
      throw CommError("rank collision: unexpected connection claiming rank " + std::to_string(peer_rank));
    }
    peers[static_cast<std::size_t>(peer_rank)] = std::move(s);
    --pending;
  }

  return std::make_unique<Communicator>(rank, size, std::make_unique<TcpTransport>(rank, size, std::move(peers)),
                                        timeout);
}

std::vector<std::uint16_t> free_local_ports(int count) {
  std::vector<Socket> held;
  std::vector<std::uint16_t> ports;
  for (int i = 0; i < count; ++i) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) fail("socket failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) fail("bind failed");
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    ports.push_back(ntohs(addr.sin_port));
    held.push_back(std::move(s));
  }
  return ports;
}

void launch_tcp_local(int size, const std::function<void(Communicator&)>& fn, std::chrono::milliseconds timeout) {
  std::vector<Endpoint> endpoints;
  for (auto port : free_local_ports(size)) endpoints.push_back({"127.0.0.1", port});
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(size));
  std::vector<std::thread> threads;
  for (int r = 0; r < size; ++r) {
    threads.emplace_back([&, r] {
      try {
        auto comm = create_tcp_communicator(r, endpoints, timeout);
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
