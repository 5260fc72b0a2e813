#include "stagespace/error.hpp"

#include <cerrno>
#include <cstring>

namespace stagespace {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kLifecycle: return "lifecycle";
    case ErrorKind::kFraming: return "framing";
    case ErrorKind::kRemote: return "remote";
    case ErrorKind::kTimeout: return "timeout";
  }
  return "unknown";
}

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kStagingFull: return "STAGING_FULL";
    case ErrorCode::kNotOwner: return "NOT_OWNER";
    case ErrorCode::kTimeout: return "TIMEOUT";
    case ErrorCode::kElementSize: return "ESIZE";
    case ErrorCode::kShutdown: return "SHUTDOWN";
    case ErrorCode::kBadRequest: return "BAD_REQUEST";
    case ErrorCode::kUnknownType: return "UNKNOWN_TYPE";
    case ErrorCode::kInternal: return "INTERNAL";
  }
  return "UNKNOWN";
}

void throw_usage(const std::string& what) { throw Error(ErrorKind::kUsage, what); }

void throw_io(const std::string& what) {
  const int err = errno;
  throw Error(ErrorKind::kIo, what + ": " + std::strerror(err));
}

}  // namespace stagespace
