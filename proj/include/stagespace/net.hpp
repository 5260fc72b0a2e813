#pragma once

// Blocking TCP helpers for the framed protocol.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "stagespace/wire.hpp"

namespace stagespace {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(std::string_view text);  // "host:port"
  std::string to_string() const { return host + ":" + std::to_string(port); }
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  static Socket connect(const Endpoint& ep);
  /// Retries until `deadline`; useful while a freshly spawned server binds.
  static Socket connect_retry(const Endpoint& ep, std::chrono::steady_clock::time_point deadline);

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  int release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void close();
  /// shutdown(2) of the read side; unblocks a thread parked in recv.
  void shutdown_read();

  void send_all(std::span<const std::byte> bytes);
  /// Header, then `head`, then `body` as one frame (no concatenation copy).
  void send_frame(MsgType type, std::uint64_t correlation, std::span<const std::byte> head,
                  std::span<const std::byte> body = {});

  /// Reads one frame. Returns nullopt on clean EOF before any header byte.
  /// Throws kIo on socket errors, kFraming on a corrupt stream, kTimeout if
  /// `deadline` passes first.
  std::optional<Frame> recv_frame(
      std::optional<std::chrono::steady_clock::time_point> deadline = std::nullopt);

 private:
  bool recv_exact(std::span<std::byte> out,
                  std::optional<std::chrono::steady_clock::time_point> deadline, bool eof_ok);
  int fd_ = -1;
};

class Listener {
 public:
  /// Binds host:port (port 0 picks an ephemeral port).
  explicit Listener(const Endpoint& ep);
  std::uint16_t port() const { return port_; }
  int fd() const { return socket_.fd(); }
  /// Waits up to `timeout` for a connection.
  std::optional<Socket> accept(std::chrono::milliseconds timeout);
  void close() { socket_.close(); }

 private:
  Socket socket_;
  std::uint16_t port_ = 0;
};

/// An ephemeral port that was free a moment ago.
std::uint16_t pick_free_port();

/// Throws RemoteError if `frame` is an ERR message.
void raise_if_error(const Frame& frame);

}  // namespace stagespace
