#pragma once

// The staging server: accepts client and peer connections, stores PUT
// payloads on its tier, answers GETs (parking them until the requested box
// is fully covered), and replicates object descriptors to its peers.
//
// PUT handling order: allocate, write, flush, register, queue NOTIFY to
// peers, send PUT_ACK, then release any parked GETs the put completed.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "stagespace/config.hpp"
#include "stagespace/directory.hpp"
#include "stagespace/net.hpp"
#include "stagespace/tier.hpp"
#include "stagespace/wire.hpp"

namespace stagespace {

/// Key stored in the tier table for a payload (meta = false) or for the
/// record describing it (meta = true).
ChunkKey descriptor_key(std::string_view var, std::uint32_t version, const NDBox& box, bool meta);
bool is_meta_key(const ChunkKey& key);

class StagingServer {
 public:
  /// Observes protocol milestones ("put_ack", "get_resp", "get_err",
  /// "notify_sent"), with the request's correlation id. Test instrumentation.
  using EventHook = std::function<void(std::string_view event, std::uint64_t correlation)>;

  /// Opens the configured tier unless one is supplied. A persistent tier's
  /// flushed objects are recovered into the directory.
  explicit StagingServer(ServerConfig config, std::unique_ptr<Tier> tier = nullptr);
  ~StagingServer();

  StagingServer(const StagingServer&) = delete;
  StagingServer& operator=(const StagingServer&) = delete;

  /// Binds and starts serving. Throws kIo if the address cannot be bound.
  void start();
  std::uint16_t port() const { return port_; }

  /// Graceful drain: stop accepting, answer parked GETs with SHUTDOWN,
  /// let in-flight requests finish, then close everything. Idempotent.
  void shutdown();

  StatResponse stat() const;
  const Directory& directory() const { return directory_; }
  std::size_t recovered_objects() const { return recovered_; }
  void set_event_hook(EventHook hook) { hook_ = std::move(hook); }

 private:
  struct Connection {
    explicit Connection(Socket s) : socket(std::move(s)) {}
    Socket socket;
    std::mutex write_mu;
    std::thread thread;
    std::atomic<bool> finished{false};
  };
  using ConnPtr = std::shared_ptr<Connection>;

  struct ParkedGet {
    ConnPtr conn;
    std::uint64_t correlation;
    GetRequest request;
    std::chrono::steady_clock::time_point deadline;
  };

  struct Peer {
    std::uint32_t id;
    Endpoint endpoint;
    std::deque<ObjectDescriptor> queue;
    Socket socket;
    std::thread thread;
  };

  void accept_loop();
  void serve_connection(const ConnPtr& conn);
  void dispatch(const ConnPtr& conn, Frame& frame);

  void handle_put(const ConnPtr& conn, std::uint64_t corr, const PutRequest& req);
  void handle_get(const ConnPtr& conn, std::uint64_t corr, GetRequest req);
  void handle_notify(const ConnPtr& conn, std::uint64_t corr, std::span<const std::byte> payload);

  void respond_get(const ConnPtr& conn, std::uint64_t corr, const GetRequest& req);
  void wake_parked(std::string_view var, std::uint32_t version);
  void timer_loop();

  /// Frees payload and record chunks of descriptors this server owns.
  void release_local(const std::vector<ObjectDescriptor>& descs);
  void store_record(const ObjectDescriptor& desc);
  void recover();

  void enqueue_notify(const ObjectDescriptor& desc);
  void notify_loop(Peer& peer);
  bool deliver(Peer& peer, const std::vector<ObjectDescriptor>& batch);

  void send(const ConnPtr& conn, MsgType type, std::uint64_t corr,
            std::span<const std::byte> head, std::span<const std::byte> body = {});
  void send_error(const ConnPtr& conn, std::uint64_t corr, ErrorCode code, const std::string& msg);
  std::optional<std::string> check_ownership(std::string_view var, const NDBox& box) const;
  void emit(std::string_view event, std::uint64_t corr) const {
    if (hook_) hook_(event, corr);
  }

  ServerConfig config_;
  std::unique_ptr<Tier> tier_;
  Directory directory_;
  EventHook hook_;

  std::unique_ptr<Listener> listener_;
  std::uint16_t port_ = 0;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  bool started_ = false;
  std::mutex lifecycle_mu_;

  std::mutex conns_mu_;
  std::list<ConnPtr> conns_;

  std::counting_semaphore<4096> slots_;

  // Evictions and replacements take this exclusively; GET assembly shares it.
  std::shared_mutex data_mu_;

  mutable std::mutex park_mu_;
  std::condition_variable park_cv_;
  std::list<ParkedGet> parked_;
  std::thread timer_;

  std::mutex record_mu_;
  std::unordered_map<std::uint64_t, ChunkHandle> records_;  // payload generation -> record

  std::mutex notify_mu_;
  std::condition_variable notify_cv_;
  std::vector<std::unique_ptr<Peer>> peers_;
  std::atomic<std::uint64_t> notify_failures_{0};
  std::atomic<std::uint64_t> notify_sent_{0};

  std::size_t recovered_ = 0;
};

/// Runs a server until SIGTERM or SIGINT, then drains. Returns the process
/// exit code.
int serve(const ServerConfig& config);

}  // namespace stagespace
