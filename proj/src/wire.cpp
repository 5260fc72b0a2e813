#include "stagespace/wire.hpp"

#include <cstring>

namespace stagespace {

namespace {

constexpr std::byte kMagic[4] = {std::byte{'S'}, std::byte{'T'}, std::byte{'G'},
                                 std::byte{'1'}};

[[noreturn]] void framing(const std::string& what) { throw Error(ErrorKind::kFraming, what); }

void put_le(std::byte* p, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

std::uint64_t get_le(const std::byte* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= std::uint64_t(std::to_integer<std::uint8_t>(p[i])) << (8 * i);
  return v;
}

}  // namespace

bool is_known(std::uint8_t type) {
  return (type >= 1 && type <= 9) || type == 255;
}

std::array<std::byte, kFrameHeaderSize> encode_header(const FrameHeader& header) {
  std::array<std::byte, kFrameHeaderSize> out{};
  std::memcpy(out.data(), kMagic, 4);
  out[4] = static_cast<std::byte>(header.type);
  put_le(out.data() + 5, header.correlation, 8);
  put_le(out.data() + 13, header.payload_len, 8);
  return out;
}

FrameHeader decode_header(std::span<const std::byte, kFrameHeaderSize> bytes) {
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) framing("bad frame magic");
  FrameHeader h;
  h.type = std::to_integer<std::uint8_t>(bytes[4]);
  h.correlation = get_le(bytes.data() + 5, 8);
  h.payload_len = get_le(bytes.data() + 13, 8);
  if (h.payload_len > kMaxPayload) {
    framing("frame payload length " + std::to_string(h.payload_len) + " exceeds limit");
  }
  return h;
}

void append_frame(std::vector<std::byte>& out, MsgType type, std::uint64_t correlation,
                  std::span<const std::byte> payload) {
  auto head = encode_header({static_cast<std::uint8_t>(type), correlation, payload.size()});
  out.insert(out.end(), head.begin(), head.end());
  out.insert(out.end(), payload.begin(), payload.end());
}

void FrameDecoder::feed(std::span<const std::byte> bytes) {
  if (consumed_ > 0 && consumed_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed_));
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameDecoder::next() {
  if (buffered() < kFrameHeaderSize) {
    // Reject garbage early rather than waiting for a full header.
    const auto n = std::min<std::size_t>(buffered(), 4);
    if (std::memcmp(buffer_.data() + consumed_, kMagic, n) != 0) framing("bad frame magic");
    return std::nullopt;
  }
  auto header = decode_header(
      std::span<const std::byte, kFrameHeaderSize>(buffer_.data() + consumed_, kFrameHeaderSize));
  if (buffered() < kFrameHeaderSize + header.payload_len) return std::nullopt;
  Frame f;
  f.type = header.type;
  f.correlation = header.correlation;
  const auto* start = buffer_.data() + consumed_ + kFrameHeaderSize;
  f.payload.assign(start, start + header.payload_len);
  consumed_ += kFrameHeaderSize + header.payload_len;
  return f;
}

void FrameDecoder::finish() const {
  if (buffered() != 0) {
    framing("stream ended inside a frame (" + std::to_string(buffered()) + " bytes pending)");
  }
}

void PayloadWriter::u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }

void PayloadWriter::u16(std::uint16_t v) {
  std::byte b[2];
  put_le(b, v, 2);
  out_.insert(out_.end(), b, b + 2);
}

void PayloadWriter::u32(std::uint32_t v) {
  std::byte b[4];
  put_le(b, v, 4);
  out_.insert(out_.end(), b, b + 4);
}

void PayloadWriter::u64(std::uint64_t v) {
  std::byte b[8];
  put_le(b, v, 8);
  out_.insert(out_.end(), b, b + 8);
}

void PayloadWriter::str8(std::string_view s) {
  if (s.size() > 255) throw_usage("string field longer than 255 bytes");
  u8(static_cast<std::uint8_t>(s.size()));
  const auto* p = reinterpret_cast<const std::byte*>(s.data());
  out_.insert(out_.end(), p, p + s.size());
}

void PayloadWriter::box(const NDBox& b) {
  u8(static_cast<std::uint8_t>(b.ndims()));
  for (std::size_t d = 0; d < b.ndims(); ++d) {
    u64(b.lower(d));
    u64(b.upper(d));
  }
}

void PayloadWriter::bytes(std::span<const std::byte> b) { out_.insert(out_.end(), b.begin(), b.end()); }

std::span<const std::byte> PayloadReader::take(std::size_t n) {
  if (remaining() < n) {
    framing("payload truncated: need " + std::to_string(n) + " bytes, have " +
            std::to_string(remaining()));
  }
  auto s = in_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t PayloadReader::u8() { return std::to_integer<std::uint8_t>(take(1)[0]); }
std::uint16_t PayloadReader::u16() { return static_cast<std::uint16_t>(get_le(take(2).data(), 2)); }
std::uint32_t PayloadReader::u32() { return static_cast<std::uint32_t>(get_le(take(4).data(), 4)); }
std::uint64_t PayloadReader::u64() { return get_le(take(8).data(), 8); }

std::string PayloadReader::str8() {
  auto n = u8();
  auto s = take(n);
  return std::string(reinterpret_cast<const char*>(s.data()), s.size());
}

NDBox PayloadReader::box() {
  auto n = u8();
  if (n == 0 || n > kMaxDims) framing("box with " + std::to_string(n) + " dimensions");
  std::array<Coord, kMaxDims> lo{};
  std::array<Coord, kMaxDims> hi{};
  for (std::size_t d = 0; d < n; ++d) {
    lo[d] = u64();
    hi[d] = u64();
    if (lo[d] >= hi[d]) framing("empty box extent on the wire");
  }
  return NDBox(std::span<const Coord>(lo.data(), n), std::span<const Coord>(hi.data(), n));
}

std::span<const std::byte> PayloadReader::bytes(std::size_t n) { return take(n); }

std::span<const std::byte> PayloadReader::rest() { return take(remaining()); }

void PayloadReader::expect_end() const {
  if (remaining() != 0) framing(std::to_string(remaining()) + " trailing payload bytes");
}

std::vector<std::byte> encode_put_head(const PutRequest& req) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.str8(req.var);
  w.u32(req.version);
  w.u32(req.element_size);
  w.box(req.box);
  return out;
}

std::vector<std::byte> encode(const PutRequest& req) {
  auto out = encode_put_head(req);
  out.insert(out.end(), req.data.begin(), req.data.end());
  return out;
}

PutRequest decode_put(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  auto var = r.str8();
  auto version = r.u32();
  auto element_size = r.u32();
  auto box = r.box();
  auto data = r.rest();
  if (data.size() != volume(box) * element_size) {
    framing("PUT data length " + std::to_string(data.size()) + " does not match box " +
            box.to_string() + " x " + std::to_string(element_size));
  }
  return PutRequest{std::move(var), version, element_size, box, data};
}

std::vector<std::byte> encode(const GetRequest& req) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.str8(req.var);
  w.u32(req.version);
  w.u32(req.element_size);
  w.box(req.box);
  w.u32(req.timeout_ms);
  return out;
}

GetRequest decode_get(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  auto var = r.str8();
  auto version = r.u32();
  auto element_size = r.u32();
  auto box = r.box();
  auto timeout = r.u32();
  r.expect_end();
  return GetRequest{std::move(var), version, element_size, box, timeout};
}

std::vector<std::byte> encode_get_resp_head(const GetResponse& resp) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.box(resp.box);
  w.u32(resp.element_size);
  return out;
}

std::vector<std::byte> encode(const GetResponse& resp) {
  auto out = encode_get_resp_head(resp);
  out.insert(out.end(), resp.data.begin(), resp.data.end());
  return out;
}

GetResponse decode_get_resp(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  auto box = r.box();
  auto element_size = r.u32();
  auto data = r.rest();
  if (data.size() != volume(box) * element_size) {
    framing("GET_RESP data length " + std::to_string(data.size()) + " does not match box " +
            box.to_string());
  }
  return GetResponse{box, element_size, data};
}

void encode_descriptor(PayloadWriter& w, const ObjectDescriptor& desc) {
  w.str8(desc.var);
  w.u32(desc.version);
  w.u32(desc.element_size);
  w.box(desc.box);
  w.u32(desc.owner);
  w.u64(desc.handle.offset);
  w.u64(desc.handle.length);
  w.u64(desc.handle.generation);
}

ObjectDescriptor decode_descriptor(PayloadReader& r) {
  auto var = r.str8();
  auto version = r.u32();
  auto element_size = r.u32();
  auto box = r.box();
  auto owner = r.u32();
  ChunkHandle h;
  h.offset = r.u64();
  h.length = r.u64();
  h.generation = r.u64();
  return ObjectDescriptor{std::move(var), version, box, element_size, owner, h};
}

std::vector<std::byte> encode_notify(std::span<const ObjectDescriptor> descs) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.u32(static_cast<std::uint32_t>(descs.size()));
  for (const auto& d : descs) encode_descriptor(w, d);
  return out;
}

std::vector<ObjectDescriptor> decode_notify(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  const auto n = r.u32();
  std::vector<ObjectDescriptor> out;
  out.reserve(std::min<std::size_t>(n, payload.size() / 16));
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(decode_descriptor(r));
  r.expect_end();
  return out;
}

std::vector<std::byte> encode(const StatResponse& resp) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.u32(resp.server_id);
  w.u64(resp.tier.used_bytes);
  w.u64(resp.tier.capacity_bytes);
  w.u64(resp.tier.chunk_count);
  w.u64(resp.tier.cumulative_read_bytes);
  w.u64(resp.tier.cumulative_write_bytes);
  w.u64(resp.descriptor_count);
  w.u64(resp.pending_gets);
  w.u64(resp.notify_failures);
  w.u64(resp.notify_sent);
  return out;
}

StatResponse decode_stat_resp(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  StatResponse s;
  s.server_id = r.u32();
  s.tier.used_bytes = r.u64();
  s.tier.capacity_bytes = r.u64();
  s.tier.chunk_count = r.u64();
  s.tier.cumulative_read_bytes = r.u64();
  s.tier.cumulative_write_bytes = r.u64();
  s.descriptor_count = r.u64();
  s.pending_gets = r.u64();
  s.notify_failures = r.u64();
  s.notify_sent = r.u64();
  r.expect_end();
  return s;
}

std::vector<std::byte> encode(const ErrorReply& err) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.u16(static_cast<std::uint16_t>(err.code));
  w.u32(static_cast<std::uint32_t>(err.message.size()));
  w.bytes({reinterpret_cast<const std::byte*>(err.message.data()), err.message.size()});
  return out;
}

ErrorReply decode_error(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  ErrorReply e;
  e.code = static_cast<ErrorCode>(r.u16());
  auto n = r.u32();
  auto msg = r.bytes(n);
  e.message.assign(reinterpret_cast<const char*>(msg.data()), msg.size());
  r.expect_end();
  return e;
}

std::vector<std::byte> encode(const BarrierRequest& req) {
  std::vector<std::byte> out;
  PayloadWriter w(out);
  w.u64(req.epoch);
  w.u32(req.participants);
  return out;
}

BarrierRequest decode_barrier(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  BarrierRequest b;
  b.epoch = r.u64();
  b.participants = r.u32();
  r.expect_end();
  return b;
}

}  // namespace stagespace
