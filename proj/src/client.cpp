#include "stagespace/client.hpp"

#include <atomic>
#include <cassert>
#include <exception>
#include <map>
#include <thread>
#include <unordered_map>

namespace stagespace {

namespace {

std::string describe(const SubFailure& f) {
  std::string s = "server " + std::to_string(f.request.server) + " " + f.request.box.to_string() + ": ";
  if (f.code) s += std::string(to_string(*f.code)) + ": ";
  return s + f.message;
}

[[noreturn]] void raise_failures(const std::string& what, std::vector<SubFailure> failures,
                                 std::size_t completed, std::size_t total) {
  ErrorKind kind = failures.front().kind;
  for (const auto& f : failures) {
    if (f.kind == ErrorKind::kTimeout) kind = ErrorKind::kTimeout;
  }
  std::string msg = what + ": " + std::to_string(failures.size()) + " of " +
                    std::to_string(total) + " pieces failed; first: " + describe(failures.front());
  throw RequestFailed(kind, msg, std::move(failures), completed);
}

// A piece whose box spans the full extent of `outer` in every dimension
// but the first is a contiguous slice of the row-major buffer.
std::optional<std::span<const std::byte>> contiguous_slice(const ConstRegionView& v,
                                                           const NDBox& piece) {
  std::uint64_t row = v.element_size;
  for (std::size_t d = 1; d < piece.ndims(); ++d) {
    if (piece.lower(d) != v.box.lower(d) || piece.upper(d) != v.box.upper(d)) return std::nullopt;
    row *= piece.extent(d);
  }
  auto offset = (piece.lower(0) - v.box.lower(0)) * row;
  return v.bytes.subspan(offset, piece.extent(0) * row);
}

}  // namespace

bool RequestFailed::has_code(ErrorCode code) const {
  for (const auto& f : failures_) {
    if (f.code == code) return true;
  }
  return false;
}

StagingSession::StagingSession(std::vector<Endpoint> servers, DistGrid grid,
                               SessionOptions options)
    : servers_(std::move(servers)), grid_(std::move(grid)), options_(options) {
  if (servers_.size() != grid_.server_count) {
    throw Error(ErrorKind::kConfig, "session has " + std::to_string(servers_.size()) +
                                        " servers but the grid expects " +
                                        std::to_string(grid_.server_count));
  }
  if (options_.element_size == 0) throw_usage("element_size must be positive");
  grid_.validate();
  links_.resize(servers_.size());
}

StagingSession::StagingSession(const ClusterConfig& cluster, SessionOptions options)
    : StagingSession(cluster.servers, cluster.grid, options) {}

StagingSession::~StagingSession() = default;
StagingSession::StagingSession(StagingSession&&) noexcept = default;
StagingSession& StagingSession::operator=(StagingSession&&) noexcept = default;

std::vector<SubRequest> StagingSession::split(std::string_view var, const NDBox& box) const {
  std::map<std::uint32_t, std::vector<NDBox>> by_owner;
  for (const auto& coords : blocks_of(grid_, box)) {
    by_owner[shard_owner(grid_, var, coords)].push_back(*intersect(grid_.block_box(coords), box));
  }
  std::vector<SubRequest> out;
  for (auto& [owner, pieces] : by_owner) {
    NDBox bb = pieces.front();
    std::uint64_t sum = 0;
    for (const auto& p : pieces) {
      bb = bounding_box(bb, p);
      sum += volume(p);
    }
    if (sum == volume(bb)) {
      out.push_back({owner, bb});
    } else {
      for (auto& p : pieces) out.push_back({owner, std::move(p)});
    }
  }
  return out;
}

StagingSession::Link& StagingSession::link(std::uint32_t server,
                                           std::chrono::steady_clock::time_point deadline) {
  auto& l = links_.at(server);
  if (!l.socket.valid()) {
    l.socket = Socket::connect_retry(servers_[server],
                                     std::min(deadline, std::chrono::steady_clock::now() +
                                                            std::chrono::seconds(5)));
  }
  return l;
}

void StagingSession::exchange_one(std::uint32_t server, std::vector<Outgoing*>& requests,
                                  const std::vector<SubRequest>& subs,
                                  std::chrono::steady_clock::time_point deadline,
                                  const OnResponse& on_response,
                                  std::vector<SubFailure>& failures) {
  std::unordered_map<std::uint64_t, Outgoing*> pending;
  std::optional<std::pair<ErrorKind, std::string>> transport;
  std::exception_ptr send_error;
  std::thread sender;
  Link* l = nullptr;
  try {
    l = &link(server, deadline);
    std::vector<std::uint64_t> corrs;
    for (auto* r : requests) {
      corrs.push_back(l->next_correlation++);
      pending.emplace(corrs.back(), r);
    }
    auto send_all = [&requests, &corrs, &send_error, l] {
      try {
        for (std::size_t i = 0; i < requests.size(); ++i) {
          l->socket.send_frame(requests[i]->type, corrs[i], requests[i]->head, requests[i]->body);
        }
      } catch (...) {
        send_error = std::current_exception();
        l->socket.shutdown_read();
      }
    };
    if (requests.size() == 1) {
      send_all();
      if (send_error) std::rethrow_exception(send_error);
    } else {
      sender = std::thread(send_all);
    }
    while (!pending.empty()) {
      auto frame = l->socket.recv_frame(deadline);
      if (!frame) throw Error(ErrorKind::kIo, "server closed the connection");
      auto it = pending.find(frame->correlation);
      if (it == pending.end()) {
        throw Error(ErrorKind::kFraming,
                    "reply with unknown correlation id " + std::to_string(frame->correlation));
      }
      const auto index = it->second->index;
      pending.erase(it);
      if (frame->msg_type() == MsgType::kErr) {
        auto err = decode_error(frame->payload);
        failures.push_back({subs[index],
                            err.code == ErrorCode::kTimeout ? ErrorKind::kTimeout : ErrorKind::kRemote,
                            err.code, err.message});
        continue;
      }
      try {
        on_response(index, *frame);
      } catch (const Error& e) {
        failures.push_back({subs[index], e.kind(), std::nullopt, e.what()});
      }
    }
  } catch (const Error& e) {
    transport = std::make_pair(e.kind(), std::string(e.what()));
  }
  if (sender.joinable()) sender.join();
  if (send_error) {
    try {
      std::rethrow_exception(send_error);
    } catch (const Error& e) {
      transport = std::make_pair(e.kind(), std::string(e.what()));
    }
  }
  if (!transport) return;
  if (l) l->socket.close();
  if (pending.empty() && l == nullptr) {
    for (auto* r : requests) failures.push_back({subs[r->index], transport->first, std::nullopt, transport->second});
    return;
  }
  for (auto& [corr, r] : pending) {
    failures.push_back({subs[r->index], transport->first, std::nullopt, transport->second});
  }
}

std::vector<SubFailure> StagingSession::exchange(const std::vector<SubRequest>& subs,
                                                 std::vector<Outgoing> requests,
                                                 std::chrono::steady_clock::time_point deadline,
                                                 const OnResponse& on_response) {
  std::vector<std::vector<Outgoing*>> by_server(servers_.size());
  for (auto& r : requests) by_server[subs[r.index].server].push_back(&r);
  std::vector<std::vector<SubFailure>> failures(servers_.size());
  std::vector<std::thread> workers;
  std::optional<std::uint32_t> inline_server;
  for (std::uint32_t s = 0; s < servers_.size(); ++s) {
    if (by_server[s].empty()) continue;
    if (!inline_server) {
      inline_server = s;
      continue;
    }
    workers.emplace_back([&, s] {
      exchange_one(s, by_server[s], subs, deadline, on_response, failures[s]);
    });
  }
  if (inline_server) {
    exchange_one(*inline_server, by_server[*inline_server], subs, deadline, on_response,
                 failures[*inline_server]);
  }
  for (auto& w : workers) w.join();
  std::vector<SubFailure> all;
  for (auto& f : failures) {
    for (auto& x : f) all.push_back(std::move(x));
  }
  return all;
}

void StagingSession::put(std::string_view var, std::uint32_t version,
                         const ConstRegionView& region) {
  if (region.element_size == 0 || region.bytes.size() != volume(region.box) * region.element_size) {
    throw_usage("put region of " + region.box.to_string() + " has inconsistent size");
  }
  if (region.box.ndims() != grid_.global_box.ndims() || !contains(grid_.global_box, region.box)) {
    throw_usage("put box " + region.box.to_string() + " outside global domain " +
                grid_.global_box.to_string());
  }
  const auto subs = split(var, region.box);
  std::vector<RegionBuffer> copies;
  copies.reserve(subs.size());
  std::vector<Outgoing> requests;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    std::span<const std::byte> data;
    if (auto slice = contiguous_slice(region, subs[i].box)) {
      data = *slice;
    } else {
      copies.emplace_back(subs[i].box, region.element_size);
      copy_region(region, copies.back().mutable_view(), subs[i].box);
      data = copies.back().bytes();
    }
    PutRequest req{std::string(var), version, static_cast<std::uint32_t>(region.element_size),
                   subs[i].box, {}};
    requests.push_back({i, MsgType::kPut, encode_put_head(req), data});
  }
  std::atomic<std::size_t> acked{0};
  auto failures = exchange(subs, std::move(requests),
                           std::chrono::steady_clock::now() + options_.io_timeout,
                           [&](std::size_t index, Frame& frame) {
                             if (frame.msg_type() != MsgType::kPutAck) {
                               throw Error(ErrorKind::kFraming,
                                           "expected PUT_ACK for " + subs[index].box.to_string());
                             }
                             ++acked;
                           });
  if (!failures.empty()) {
    raise_failures("put " + std::string(var) + "@" + std::to_string(version), std::move(failures),
                   acked.load(), subs.size());
  }
}

RegionBuffer StagingSession::get(std::string_view var, std::uint32_t version, const NDBox& box,
                                 std::optional<std::uint32_t> timeout_ms,
                                 std::optional<std::uint32_t> element_size) {
  const auto es = element_size.value_or(options_.element_size);
  const auto wait = timeout_ms.value_or(options_.timeout_ms);
  if (es == 0) throw_usage("element_size must be positive");
  if (box.ndims() != grid_.global_box.ndims() || !contains(grid_.global_box, box)) {
    throw_usage("get box " + box.to_string() + " outside global domain " +
                grid_.global_box.to_string());
  }
  const auto subs = split(var, box);
#ifndef NDEBUG
  {
    std::vector<NDBox> pieces;
    for (const auto& s : subs) pieces.push_back(s.box);
    assert(covers(box, pieces));
  }
#endif
  std::vector<Outgoing> requests;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    requests.push_back(
        {i, MsgType::kGet, encode(GetRequest{std::string(var), version, es, subs[i].box, wait}), {}});
  }
  RegionBuffer out(box, es);
  const auto dst = out.mutable_view();
  std::atomic<std::size_t> done{0};
  auto failures = exchange(
      subs, std::move(requests),
      std::chrono::steady_clock::now() + std::chrono::milliseconds(wait) + options_.io_timeout,
      [&](std::size_t index, Frame& frame) {
        if (frame.msg_type() != MsgType::kGetResp) {
          throw Error(ErrorKind::kFraming, "expected GET_RESP for " + subs[index].box.to_string());
        }
        auto resp = decode_get_resp(frame.payload);
        if (resp.box != subs[index].box || resp.element_size != es ||
            resp.data.size() != volume(resp.box) * es) {
          throw Error(ErrorKind::kFraming, "GET_RESP for " + resp.box.to_string() +
                                               " does not match request " +
                                               subs[index].box.to_string());
        }
        copy_region(ConstRegionView{resp.box, es, resp.data}, dst, resp.box);
        ++done;
      });
  if (!failures.empty()) {
    raise_failures("get " + std::string(var) + "@" + std::to_string(version) + " " +
                       box.to_string(),
                   std::move(failures), done.load(), subs.size());
  }
  return out;
}

std::vector<ServerStat> StagingSession::stat() {
  std::vector<SubRequest> subs;
  std::vector<Outgoing> requests;
  for (std::uint32_t s = 0; s < servers_.size(); ++s) {
    subs.push_back({s, grid_.global_box});
    requests.push_back({s, MsgType::kStat, {}, {}});
  }
  std::vector<ServerStat> out(servers_.size());
  for (std::uint32_t s = 0; s < servers_.size(); ++s) out[s].server = s;
  auto failures = exchange(subs, std::move(requests),
                           std::chrono::steady_clock::now() + std::chrono::seconds(10),
                           [&](std::size_t index, Frame& frame) {
                             if (frame.msg_type() != MsgType::kStatResp) {
                               throw Error(ErrorKind::kFraming, "expected STAT_RESP");
                             }
                             out[index].stat = decode_stat_resp(frame.payload);
                           });
  for (const auto& f : failures) {
    out[f.request.server].error = describe(f);
  }
  return out;
}

}  // namespace stagespace
