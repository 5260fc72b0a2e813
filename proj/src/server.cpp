#include "stagespace/server.hpp"

#include <pthread.h>

#include <algorithm>
#include <csignal>
#include <iostream>
#include <map>
#include <tuple>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

constexpr std::size_t kNotifyBatch = 4096;
constexpr auto kPeerAckTimeout = std::chrono::seconds(5);

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<4096>& sem) : sem_(sem) { sem_.acquire(); }
  ~SlotGuard() { sem_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<4096>& sem_;
};

}  // namespace

ChunkKey descriptor_key(std::string_view var, std::uint32_t version, const NDBox& box, bool meta) {
  std::vector<std::byte> bytes;
  PayloadWriter w(bytes);
  w.str8(var);
  w.u32(version);
  w.box(box);
  ChunkKey key;
  key.hi = fnv(0xcbf29ce484222325ull, bytes.data(), bytes.size());
  key.lo = fnv(0x84222325cbf29ce4ull, bytes.data(), bytes.size());
  key.lo = (key.lo & ~1ull) | (meta ? 1 : 0);
  return key;
}

bool is_meta_key(const ChunkKey& key) { return (key.lo & 1) != 0; }

StagingServer::StagingServer(ServerConfig config, std::unique_ptr<Tier> tier)
    : config_(std::move(config)),
      tier_(std::move(tier)),
      directory_(config_.grid, config_.max_versions),
      slots_(static_cast<std::ptrdiff_t>(std::min<std::uint32_t>(config_.workers, 4096))) {
  config_.validate();
  if (!tier_) tier_ = open_tier(config_.tier);
  for (std::uint32_t i = 0; i < config_.servers.size(); ++i) {
    if (i == config_.server_id) continue;
    auto peer = std::make_unique<Peer>();
    peer->id = i;
    peer->endpoint = config_.servers[i];
    peers_.push_back(std::move(peer));
  }
  if (tier_->persistent()) recover();
}

StagingServer::~StagingServer() { shutdown(); }

void StagingServer::start() {
  std::lock_guard lock(lifecycle_mu_);
  if (started_) return;
  listener_ = std::make_unique<Listener>(config_.listen_endpoint());
  port_ = listener_->port();
  started_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
  timer_ = std::thread([this] { timer_loop(); });
  for (auto& peer : peers_) {
    Peer* p = peer.get();
    p->thread = std::thread([this, p] { notify_loop(*p); });
  }
}

void StagingServer::shutdown() {
  std::lock_guard lock(lifecycle_mu_);
  if (!started_ || stopping_) return;
  {
    std::scoped_lock both(park_mu_, notify_mu_);
    stopping_ = true;
  }
  if (acceptor_.joinable()) acceptor_.join();
  listener_->close();

  auto fail_parked = [this] {
    std::list<ParkedGet> drained;
    {
      std::lock_guard pl(park_mu_);
      drained.swap(parked_);
    }
    for (auto& p : drained) {
      send_error(p.conn, p.correlation, ErrorCode::kShutdown, "server shutting down");
    }
  };
  fail_parked();
  park_cv_.notify_all();

  std::list<ConnPtr> conns;
  {
    std::lock_guard cl(conns_mu_);
    conns.swap(conns_);
  }
  for (auto& c : conns) c->socket.shutdown_read();
  for (auto& c : conns) {
    if (c->thread.joinable()) c->thread.join();
  }
  fail_parked();
  if (timer_.joinable()) timer_.join();

  notify_cv_.notify_all();
  for (auto& peer : peers_) {
    if (peer->thread.joinable()) peer->thread.join();
  }
  for (auto& c : conns) c->socket.close();
}

void StagingServer::accept_loop() {
  while (!stopping_) {
    auto sock = listener_->accept(std::chrono::milliseconds(100));
    std::lock_guard lock(conns_mu_);
    for (auto it = conns_.begin(); it != conns_.end();) {
      if ((*it)->finished) {
        (*it)->thread.join();
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
    if (!sock || stopping_) continue;
    auto conn = std::make_shared<Connection>(std::move(*sock));
    Connection* raw = conn.get();
    conns_.push_back(conn);
    // The list entry owns the connection; the thread must not hold the last
    // reference or it would destroy its own std::thread.
    raw->thread = std::thread([this, raw] {
      ConnPtr self;
      {
        std::lock_guard l(conns_mu_);
        for (auto& c : conns_) {
          if (c.get() == raw) self = c;
        }
      }
      if (self) serve_connection(self);
      raw->finished = true;
    });
  }
}

void StagingServer::serve_connection(const ConnPtr& conn) {
  try {
    while (!stopping_) {
      auto frame = conn->socket.recv_frame();
      if (!frame) break;
      dispatch(conn, *frame);
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFraming) {
      send_error(conn, 0, ErrorCode::kBadRequest, e.what());
    }
  }
}

void StagingServer::dispatch(const ConnPtr& conn, Frame& frame) {
  const auto corr = frame.correlation;
  try {
    switch (frame.msg_type()) {
      case MsgType::kPut: {
        auto req = decode_put(frame.payload);
        SlotGuard slot(slots_);
        handle_put(conn, corr, req);
        return;
      }
      case MsgType::kGet:
        handle_get(conn, corr, decode_get(frame.payload));
        return;
      case MsgType::kNotify: {
        SlotGuard slot(slots_);
        handle_notify(conn, corr, frame.payload);
        return;
      }
      case MsgType::kStat: {
        auto payload = encode(stat());
        send(conn, MsgType::kStatResp, corr, payload);
        return;
      }
      default:
        send_error(conn, corr, ErrorCode::kUnknownType,
                   "unsupported msg_type " + std::to_string(frame.type));
        return;
    }
  } catch (const Error& e) {
    // Malformed payloads leave the framing intact; the connection survives.
    auto code = e.kind() == ErrorKind::kFraming || e.kind() == ErrorKind::kUsage
                    ? ErrorCode::kBadRequest
                    : ErrorCode::kInternal;
    send_error(conn, corr, code, e.what());
  }
}

std::optional<std::string> StagingServer::check_ownership(std::string_view var,
                                                          const NDBox& box) const {
  for (const auto& block : blocks_of(config_.grid, box)) {
    auto owner = shard_owner(config_.grid, var, block);
    if (owner != config_.server_id) {
      return "block " + config_.grid.block_box(block).to_string() + " belongs to server " +
             std::to_string(owner);
    }
  }
  return std::nullopt;
}

void StagingServer::handle_put(const ConnPtr& conn, std::uint64_t corr, const PutRequest& req) {
  const auto& global = config_.grid.global_box;
  if (req.var.empty() || req.element_size == 0 || req.box.ndims() != global.ndims() ||
      !contains(global, req.box)) {
    send_error(conn, corr, ErrorCode::kBadRequest,
               "put of " + req.var + " " + req.box.to_string() + " outside domain " +
                   global.to_string() + " or malformed");
    return;
  }
  if (auto why = check_ownership(req.var, req.box)) {
    send_error(conn, corr, ErrorCode::kNotOwner, *why);
    return;
  }
  if (auto es = directory_.element_size_of(req.var, req.version); es && *es != req.element_size) {
    send_error(conn, corr, ErrorCode::kElementSize,
               "element size " + std::to_string(req.element_size) + " != stored " +
                   std::to_string(*es));
    return;
  }

  ChunkHandle handle;
  try {
    handle = tier_->allocate(req.data.size(), descriptor_key(req.var, req.version, req.box, false));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kCapacity) throw;
    send_error(conn, corr, ErrorCode::kStagingFull, e.what());
    return;
  }

  ObjectDescriptor desc{req.var, req.version, req.box, req.element_size, config_.server_id, handle};
  try {
    tier_->write_chunk(handle, req.data);
    tier_->flush_chunk(handle);
    if (tier_->persistent()) store_record(desc);
  } catch (const Error& e) {
    release_local({desc});
    send_error(conn, corr,
               e.kind() == ErrorKind::kCapacity ? ErrorCode::kStagingFull : ErrorCode::kInternal,
               e.what());
    return;
  }

  RegisterOutcome outcome;
  try {
    outcome = directory_.register_object(desc);
  } catch (const Error& e) {
    // Lost a race with a put that fixed a different element size.
    release_local({desc});
    send_error(conn, corr, ErrorCode::kElementSize, e.what());
    return;
  }
  std::vector<ObjectDescriptor> dropped = std::move(outcome.evicted);
  if (outcome.replaced) dropped.push_back(*outcome.replaced);
  if (!dropped.empty()) release_local(dropped);

  enqueue_notify(desc);
  send(conn, MsgType::kPutAck, corr, {});
  emit("put_ack", corr);
  wake_parked(req.var, req.version);
}

void StagingServer::handle_get(const ConnPtr& conn, std::uint64_t corr, GetRequest req) {
  const auto& global = config_.grid.global_box;
  if (req.var.empty() || req.element_size == 0 || req.box.ndims() != global.ndims() ||
      !contains(global, req.box)) {
    send_error(conn, corr, ErrorCode::kBadRequest,
               "get of " + req.box.to_string() + " outside domain " + global.to_string());
    return;
  }
  if (auto why = check_ownership(req.var, req.box)) {
    send_error(conn, corr, ErrorCode::kNotOwner, *why);
    return;
  }
  if (auto es = directory_.element_size_of(req.var, req.version); es && *es != req.element_size) {
    send_error(conn, corr, ErrorCode::kElementSize,
               "element size " + std::to_string(req.element_size) + " != stored " +
                   std::to_string(*es));
    return;
  }

  bool ready = false;
  {
    std::lock_guard lock(park_mu_);
    if (directory_.is_covered(req.var, req.version, req.box)) {
      ready = true;
    } else if (stopping_) {
      // fall through to the SHUTDOWN reply below
    } else if (req.timeout_ms > 0) {
      auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(req.timeout_ms);
      parked_.push_back(ParkedGet{conn, corr, std::move(req), deadline});
      park_cv_.notify_all();
      return;
    }
  }
  if (ready) {
    SlotGuard slot(slots_);
    respond_get(conn, corr, req);
  } else if (stopping_) {
    send_error(conn, corr, ErrorCode::kShutdown, "server shutting down");
  } else {
    send_error(conn, corr, ErrorCode::kTimeout,
               req.var + "@" + std::to_string(req.version) + " " + req.box.to_string() +
                   " not available");
    emit("get_err", corr);
  }
}

void StagingServer::respond_get(const ConnPtr& conn, std::uint64_t corr, const GetRequest& req) {
  std::shared_lock lock(data_mu_);
  auto es = directory_.element_size_of(req.var, req.version);
  if (!es) {
    lock.unlock();
    send_error(conn, corr, ErrorCode::kTimeout,
               req.var + "@" + std::to_string(req.version) + " was evicted");
    emit("get_err", corr);
    return;
  }
  if (*es != req.element_size) {
    lock.unlock();
    send_error(conn, corr, ErrorCode::kElementSize,
               "element size " + std::to_string(req.element_size) + " != stored " +
                   std::to_string(*es));
    emit("get_err", corr);
    return;
  }

  RegionBuffer out(req.box, *es);
  const auto dst = out.mutable_view();
  try {
    for (const auto& desc : directory_.query(req.var, req.version, req.box)) {
      if (desc.owner != config_.server_id) continue;
      auto region = intersect(desc.box, req.box);
      tier_->visit_chunk(desc.handle, volume(*region) * *es, [&](std::span<const std::byte> bytes) {
        copy_region(ConstRegionView{desc.box, *es, bytes}, dst, *region);
      });
    }
  } catch (const Error& e) {
    lock.unlock();
    send_error(conn, corr, ErrorCode::kInternal, e.what());
    emit("get_err", corr);
    return;
  }
  lock.unlock();

  auto head = encode_get_resp_head(GetResponse{req.box, *es, {}});
  send(conn, MsgType::kGetResp, corr, head, out.bytes());
  emit("get_resp", corr);
}

void StagingServer::wake_parked(std::string_view var, std::uint32_t version) {
  std::vector<ParkedGet> ready;
  {
    std::lock_guard lock(park_mu_);
    for (auto it = parked_.begin(); it != parked_.end();) {
      if (it->request.var == var && it->request.version == version &&
          directory_.is_covered(var, version, it->request.box)) {
        ready.push_back(std::move(*it));
        it = parked_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto& p : ready) respond_get(p.conn, p.correlation, p.request);
}

void StagingServer::timer_loop() {
  std::unique_lock lock(park_mu_);
  while (!stopping_) {
    const auto now = std::chrono::steady_clock::now();
    auto next = std::chrono::steady_clock::time_point::max();
    std::vector<ParkedGet> expired;
    for (auto it = parked_.begin(); it != parked_.end();) {
      if (it->deadline <= now) {
        expired.push_back(std::move(*it));
        it = parked_.erase(it);
      } else {
        next = std::min(next, it->deadline);
        ++it;
      }
    }
    if (!expired.empty()) {
      lock.unlock();
      for (auto& p : expired) {
        send_error(p.conn, p.correlation, ErrorCode::kTimeout,
                   p.request.var + "@" + std::to_string(p.request.version) + " " +
                       p.request.box.to_string() + " not covered within " +
                       std::to_string(p.request.timeout_ms) + " ms");
        emit("get_err", p.correlation);
      }
      lock.lock();
      continue;
    }
    if (next == std::chrono::steady_clock::time_point::max()) {
      park_cv_.wait(lock);
    } else {
      park_cv_.wait_until(lock, next);
    }
  }
}

void StagingServer::handle_notify(const ConnPtr& conn, std::uint64_t corr,
                                  std::span<const std::byte> payload) {
  auto descs = decode_notify(payload);
  std::vector<ObjectDescriptor> dropped;
  for (auto& desc : descs) {
    if (desc.owner == config_.server_id) continue;
    try {
      auto outcome = directory_.register_object(std::move(desc));
      for (auto& e : outcome.evicted) dropped.push_back(std::move(e));
    } catch (const Error&) {
      // Inconsistent element size or out-of-domain box from a peer; skip it.
    }
  }
  if (!dropped.empty()) release_local(dropped);
  send(conn, MsgType::kNotifyAck, corr, {});
}

void StagingServer::release_local(const std::vector<ObjectDescriptor>& descs) {
  std::unique_lock lock(data_mu_);
  for (const auto& d : descs) {
    if (d.owner != config_.server_id) continue;
    try {
      tier_->free(d.handle);
    } catch (const Error&) {
    }
    std::optional<ChunkHandle> record;
    {
      std::lock_guard rl(record_mu_);
      if (auto it = records_.find(d.handle.generation); it != records_.end()) {
        record = it->second;
        records_.erase(it);
      }
    }
    if (record) {
      try {
        tier_->free(*record);
      } catch (const Error&) {
      }
    }
  }
}

void StagingServer::store_record(const ObjectDescriptor& desc) {
  std::vector<std::byte> bytes;
  PayloadWriter w(bytes);
  encode_descriptor(w, desc);
  auto record = tier_->allocate(bytes.size(), descriptor_key(desc.var, desc.version, desc.box, true));
  try {
    tier_->write_chunk(record, bytes);
    tier_->flush_chunk(record);
  } catch (...) {
    tier_->free(record);
    throw;
  }
  std::lock_guard lock(record_mu_);
  records_[desc.handle.generation] = record;
}

void StagingServer::recover() {
  std::unordered_map<std::uint64_t, RecoveredChunk> payloads;
  std::vector<RecoveredChunk> records;
  for (const auto& c : tier_->recovered_chunks()) {
    if (is_meta_key(c.key)) {
      records.push_back(c);
    } else {
      payloads.emplace(c.handle.generation, c);
    }
  }

  struct Candidate {
    ObjectDescriptor desc;
    ChunkHandle record;
  };
  using Identity = std::tuple<std::string, std::uint32_t, NDBox>;
  std::map<Identity, Candidate> best;
  std::vector<ChunkHandle> garbage;

  for (const auto& r : records) {
    std::optional<ObjectDescriptor> desc;
    try {
      auto bytes = tier_->read_chunk(r.handle);
      PayloadReader reader(bytes);
      desc = decode_descriptor(reader);
    } catch (const Error&) {
      garbage.push_back(r.handle);
      continue;
    }
    auto p = payloads.find(desc->handle.generation);
    if (p == payloads.end() || p->second.handle != desc->handle ||
        p->second.key != descriptor_key(desc->var, desc->version, desc->box, false) ||
        !contains(config_.grid.global_box, desc->box)) {
      garbage.push_back(r.handle);
      continue;
    }
    desc->owner = config_.server_id;
    Identity id{desc->var, desc->version, desc->box};
    auto it = best.find(id);
    if (it == best.end()) {
      best.emplace(id, Candidate{*desc, r.handle});
    } else if (it->second.desc.handle.generation < desc->handle.generation) {
      garbage.push_back(it->second.record);
      it->second = Candidate{*desc, r.handle};
    } else {
      garbage.push_back(r.handle);
    }
  }

  std::vector<Candidate> ordered;
  for (auto& [id, c] : best) ordered.push_back(std::move(c));
  // Re-register in original write order so overlapping puts keep last-writer-wins.
  std::sort(ordered.begin(), ordered.end(), [](const Candidate& a, const Candidate& b) {
    return a.desc.handle.generation < b.desc.handle.generation;
  });

  std::unordered_map<std::uint64_t, bool> used;
  for (auto& c : ordered) {
    try {
      auto outcome = directory_.register_object(c.desc);
      {
        std::lock_guard lock(record_mu_);
        records_[c.desc.handle.generation] = c.record;
      }
      used[c.desc.handle.generation] = true;
      if (!outcome.evicted.empty()) {
        for (const auto& e : outcome.evicted) used.erase(e.handle.generation);
        release_local(outcome.evicted);
      }
      ++recovered_;
    } catch (const Error&) {
      garbage.push_back(c.record);
    }
  }
  for (const auto& [gen, p] : payloads) {
    if (!used.count(gen) && !records_.count(gen)) garbage.push_back(p.handle);
  }
  for (const auto& h : garbage) {
    try {
      tier_->free(h);
    } catch (const Error&) {
    }
  }
  for (const auto& d : directory_.snapshot()) enqueue_notify(d);
}

void StagingServer::enqueue_notify(const ObjectDescriptor& desc) {
  if (peers_.empty()) return;
  {
    std::lock_guard lock(notify_mu_);
    for (auto& peer : peers_) peer->queue.push_back(desc);
  }
  notify_cv_.notify_all();
}

void StagingServer::notify_loop(Peer& peer) {
  std::unique_lock lock(notify_mu_);
  while (true) {
    notify_cv_.wait(lock, [&] { return stopping_ || !peer.queue.empty(); });
    if (peer.queue.empty()) return;  // stopping with nothing left
    std::vector<ObjectDescriptor> batch;
    while (!peer.queue.empty() && batch.size() < kNotifyBatch) {
      batch.push_back(std::move(peer.queue.front()));
      peer.queue.pop_front();
    }
    lock.unlock();
    bool delivered = false;
    auto backoff = config_.notify_backoff;
    for (std::uint32_t attempt = 0; attempt < config_.notify_attempts; ++attempt) {
      if (deliver(peer, batch)) {
        delivered = true;
        break;
      }
      if (attempt + 1 < config_.notify_attempts) {
        std::unique_lock wait_lock(notify_mu_);
        notify_cv_.wait_for(wait_lock, backoff, [&] { return stopping_.load(); });
        backoff *= 2;
      }
    }
    if (delivered) {
      notify_sent_ += batch.size();
    } else {
      ++notify_failures_;
      std::cerr << "stagespace server " << config_.server_id << ": NOTIFY of " << batch.size()
                << " descriptors to peer " << peer.id << " (" << peer.endpoint.to_string()
                << ") failed after " << config_.notify_attempts << " attempts\n";
    }
    lock.lock();
  }
}

bool StagingServer::deliver(Peer& peer, const std::vector<ObjectDescriptor>& batch) {
  try {
    if (!peer.socket.valid()) peer.socket = Socket::connect(peer.endpoint);
    auto payload = encode_notify(batch);
    peer.socket.send_frame(MsgType::kNotify, 0, payload);
    auto reply = peer.socket.recv_frame(std::chrono::steady_clock::now() + kPeerAckTimeout);
    if (!reply || reply->msg_type() != MsgType::kNotifyAck) {
      peer.socket.close();
      return false;
    }
    emit("notify_sent", batch.size());
    return true;
  } catch (const Error&) {
    peer.socket.close();
    return false;
  }
}

void StagingServer::send(const ConnPtr& conn, MsgType type, std::uint64_t corr,
                         std::span<const std::byte> head, std::span<const std::byte> body) {
  std::lock_guard lock(conn->write_mu);
  try {
    conn->socket.send_frame(type, corr, head, body);
  } catch (const Error&) {
    // Client went away; nothing to deliver to.
  }
}

void StagingServer::send_error(const ConnPtr& conn, std::uint64_t corr, ErrorCode code,
                               const std::string& msg) {
  auto payload = encode(ErrorReply{code, msg});
  send(conn, MsgType::kErr, corr, payload);
}

StatResponse StagingServer::stat() const {
  StatResponse s;
  s.server_id = config_.server_id;
  s.tier = tier_->stats();
  s.descriptor_count = directory_.size();
  {
    std::lock_guard lock(park_mu_);
    s.pending_gets = parked_.size();
  }
  s.notify_failures = notify_failures_.load();
  s.notify_sent = notify_sent_.load();
  return s;
}

int serve(const ServerConfig& config) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  try {
    StagingServer server(config);
    server.start();
    std::cout << "stagespace server " << config.server_id << " listening on port "
              << server.port() << " (recovered " << server.recovered_objects() << " objects)"
              << std::endl;
    int sig = 0;
    sigwait(&set, &sig);
    server.shutdown();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "stagespace server: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace stagespace
