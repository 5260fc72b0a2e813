#include "stagespace/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <thread>

namespace stagespace {

namespace {

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (ep.host.empty() || ep.host == "*" || ep.host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    return addr;
  }
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw Error(ErrorKind::kConfig, "cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

// Waits for `events` on fd; false on timeout.
bool wait_fd(int fd, short events, std::optional<std::chrono::steady_clock::time_point> deadline) {
  if (!deadline) return true;
  while (true) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        *deadline - std::chrono::steady_clock::now());
    if (left.count() < 0) return false;
    pollfd p{fd, events, 0};
    int rc = ::poll(&p, 1, static_cast<int>(std::min<std::int64_t>(left.count() + 1, 1 << 30)));
    if (rc > 0) return true;
    if (rc == 0) continue;
    if (errno != EINTR) throw_io("poll");
  }
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos) {
    throw Error(ErrorKind::kConfig, "endpoint '" + std::string(text) + "' lacks ':port'");
  }
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  auto port_text = text.substr(colon + 1);
  unsigned port = 0;
  auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535) {
    throw Error(ErrorKind::kConfig, "bad port in endpoint '" + std::string(text) + "'");
  }
  ep.port = static_cast<std::uint16_t>(port);
  return ep;
}

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.release();
  }
  return *this;
}

void Socket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Socket::shutdown_read() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RD);
}

Socket Socket::connect(const Endpoint& ep) {
  auto addr = resolve(ep);
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw_io("socket");
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw_io("connect " + ep.to_string());
  }
  return s;
}

Socket Socket::connect_retry(const Endpoint& ep,
                             std::chrono::steady_clock::time_point deadline) {
  while (true) {
    try {
      return connect(ep);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kIo || std::chrono::steady_clock::now() >= deadline) throw;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void Socket::send_all(std::span<const std::byte> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_io("send");
    }
    sent += static_cast<std::size_t>(n);
  }
}

void Socket::send_frame(MsgType type, std::uint64_t correlation,
                        std::span<const std::byte> head, std::span<const std::byte> body) {
  auto header = encode_header(
      {static_cast<std::uint8_t>(type), correlation, head.size() + body.size()});
  iovec iov[3] = {
      {header.data(), header.size()},
      {const_cast<std::byte*>(head.data()), head.size()},
      {const_cast<std::byte*>(body.data()), body.size()},
  };
  std::size_t total = header.size() + head.size() + body.size();
  std::size_t sent = 0;
  int first = 0;
  while (sent < total) {
    msghdr msg{};
    msg.msg_iov = iov + first;
    msg.msg_iovlen = 3 - first;
    ssize_t n = ::sendmsg(fd_, &msg, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_io("sendmsg");
    }
    sent += static_cast<std::size_t>(n);
    auto left = static_cast<std::size_t>(n);
    while (first < 3 && left >= iov[first].iov_len) {
      left -= iov[first].iov_len;
      ++first;
    }
    if (first < 3) {
      iov[first].iov_base = static_cast<char*>(iov[first].iov_base) + left;
      iov[first].iov_len -= left;
    }
  }
}

bool Socket::recv_exact(std::span<std::byte> out,
                        std::optional<std::chrono::steady_clock::time_point> deadline,
                        bool eof_ok) {
  std::size_t got = 0;
  while (got < out.size()) {
    if (!wait_fd(fd_, POLLIN, deadline)) {
      throw Error(ErrorKind::kTimeout, "timed out waiting for a response");
    }
    ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_io("recv");
    }
    if (n == 0) {
      if (got == 0 && eof_ok) return false;
      throw Error(ErrorKind::kIo, "connection closed mid-frame");
    }
    got += static_cast<std::size_t>(n);
  }
  return true;
}

std::optional<Frame> Socket::recv_frame(
    std::optional<std::chrono::steady_clock::time_point> deadline) {
  std::array<std::byte, kFrameHeaderSize> head{};
  if (!recv_exact(head, deadline, true)) return std::nullopt;
  auto h = decode_header(head);
  Frame f;
  f.type = h.type;
  f.correlation = h.correlation;
  f.payload.resize(h.payload_len);
  recv_exact(f.payload, deadline, false);
  return f;
}

Listener::Listener(const Endpoint& ep) {
  auto addr = resolve(ep);
  socket_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!socket_.valid()) throw_io("socket");
  int one = 1;
  ::setsockopt(socket_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(socket_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw_io("bind " + ep.to_string());
  }
  if (::listen(socket_.fd(), 1024) != 0) throw_io("listen " + ep.to_string());
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(socket_.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

std::optional<Socket> Listener::accept(std::chrono::milliseconds timeout) {
  pollfd p{socket_.fd(), POLLIN, 0};
  int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  if (rc <= 0) return std::nullopt;
  int fd = ::accept4(socket_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
  if (fd < 0) return std::nullopt;
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return Socket(fd);
}

std::uint16_t pick_free_port() {
  Listener l(Endpoint{"127.0.0.1", 0});
  return l.port();
}

void raise_if_error(const Frame& frame) {
  if (frame.msg_type() != MsgType::kErr) return;
  auto err = decode_error(frame.payload);
  throw RemoteError(err.code, std::string(to_string(err.code)) + ": " + err.message);
}

}  // namespace stagespace
