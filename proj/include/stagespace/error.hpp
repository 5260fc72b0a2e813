#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stagespace {

/// Local failure categories. Every exception thrown by the library is an
/// `Error` tagged with one of these.
enum class ErrorKind {
  kUsage,      // caller violated a precondition
  kConfig,     // bad configuration value or incompatible persisted state
  kIo,         // syscall / filesystem / socket failure
  kCapacity,   // tier arena exhausted
  kLifecycle,  // stale, freed or never-written chunk handle
  kFraming,    // malformed wire stream
  kRemote,     // server answered with ERR
  kTimeout,
};

/// Codes carried in ERR messages on the wire.
enum class ErrorCode : std::uint16_t {
  kStagingFull = 1,
  kNotOwner = 2,
  kTimeout = 3,
  kElementSize = 4,
  kShutdown = 5,
  kBadRequest = 6,
  kUnknownType = 7,
  kInternal = 8,
};

std::string_view to_string(ErrorKind kind);
std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// A server-side rejection surfaced to the caller.
class RemoteError : public Error {
 public:
  RemoteError(ErrorCode code, const std::string& what)
      : Error(code == ErrorCode::kTimeout ? ErrorKind::kTimeout : ErrorKind::kRemote,
              what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void throw_usage(const std::string& what);
[[noreturn]] void throw_io(const std::string& what);  // appends strerror(errno)

}  // namespace stagespace
