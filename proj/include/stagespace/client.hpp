#pragma once

// Writer/reader session. Routes each request to the servers owning the
// distribution blocks it touches, keeps all sub-requests in flight at once
// (one pipelined connection per server), and reassembles GET results.
//
// A session is meant to be driven by one thread at a time.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stagespace/config.hpp"
#include "stagespace/directory.hpp"
#include "stagespace/error.hpp"
#include "stagespace/geometry.hpp"
#include "stagespace/net.hpp"
#include "stagespace/wire.hpp"

namespace stagespace {

struct SessionOptions {
  std::uint32_t element_size = 8;
  std::uint32_t timeout_ms = 10000;  // default GET wait
  /// Transport deadline per operation, on top of the GET wait.
  std::chrono::milliseconds io_timeout{120000};
};

/// One per-owner piece of a request.
struct SubRequest {
  std::uint32_t server = 0;
  NDBox box;
  friend bool operator==(const SubRequest&, const SubRequest&) = default;
};

struct SubFailure {
  SubRequest request;
  ErrorKind kind = ErrorKind::kRemote;
  std::optional<ErrorCode> code;  // set when the server answered ERR
  std::string message;
};

/// Some sub-requests failed. Completed ones are not rolled back.
class RequestFailed : public Error {
 public:
  RequestFailed(ErrorKind kind, const std::string& what, std::vector<SubFailure> failures,
                std::size_t completed)
      : Error(kind, what), failures_(std::move(failures)), completed_(completed) {}
  const std::vector<SubFailure>& failures() const { return failures_; }
  std::size_t completed() const { return completed_; }
  /// True if any sub-request was answered with `code`.
  bool has_code(ErrorCode code) const;

 private:
  std::vector<SubFailure> failures_;
  std::size_t completed_;
};

struct ServerStat {
  std::uint32_t server = 0;
  std::optional<StatResponse> stat;
  std::string error;  // set when the server could not be queried
};

class StagingSession {
 public:
  StagingSession(std::vector<Endpoint> servers, DistGrid grid, SessionOptions options = {});
  explicit StagingSession(const ClusterConfig& cluster, SessionOptions options = {});
  ~StagingSession();

  StagingSession(const StagingSession&) = delete;
  StagingSession& operator=(const StagingSession&) = delete;
  StagingSession(StagingSession&&) noexcept;
  StagingSession& operator=(StagingSession&&) noexcept;

  /// Returns once every owner acknowledged its piece. Element size comes from
  /// the region.
  void put(std::string_view var, std::uint32_t version, const ConstRegionView& region);
  void put(std::string_view var, std::uint32_t version, const RegionBuffer& buf) {
    put(var, version, buf.view());
  }

  /// Blocks until every piece of `box` has been written, or the timeout ends.
  RegionBuffer get(std::string_view var, std::uint32_t version, const NDBox& box,
                   std::optional<std::uint32_t> timeout_ms = std::nullopt,
                   std::optional<std::uint32_t> element_size = std::nullopt);

  std::vector<ServerStat> stat();

  /// Deterministic partition of `box` into per-owner pieces. Same-owner
  /// blocks that tile their bounding box are merged into one piece.
  std::vector<SubRequest> split(std::string_view var, const NDBox& box) const;

  const DistGrid& grid() const { return grid_; }
  std::size_t server_count() const { return servers_.size(); }
  const SessionOptions& options() const { return options_; }

 private:
  struct Link {
    Socket socket;
    std::uint64_t next_correlation = 1;
  };
  struct Outgoing {
    std::size_t index;  // into the caller's sub-request list
    MsgType type;
    std::vector<std::byte> head;
    std::span<const std::byte> body;
  };
  using OnResponse = std::function<void(std::size_t index, Frame& frame)>;

  /// Sends each server its requests and routes replies to `on_response`.
  /// Returns failures; ERR replies are recorded per sub-request.
  std::vector<SubFailure> exchange(const std::vector<SubRequest>& subs,
                                   std::vector<Outgoing> requests,
                                   std::chrono::steady_clock::time_point deadline,
                                   const OnResponse& on_response);
  void exchange_one(std::uint32_t server, std::vector<Outgoing*>& requests,
                    const std::vector<SubRequest>& subs,
                    std::chrono::steady_clock::time_point deadline,
                    const OnResponse& on_response, std::vector<SubFailure>& failures);
  Link& link(std::uint32_t server, std::chrono::steady_clock::time_point deadline);

  std::vector<Endpoint> servers_;
  DistGrid grid_;
  SessionOptions options_;
  std::vector<Link> links_;
};

}  // namespace stagespace
