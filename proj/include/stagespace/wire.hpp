#pragma once

// Binary framing shared by clients, servers and the benchmark barrier.
//
// Every message is
//   "STG1" | u8 msg_type | u64 correlation id | u64 payload_len | payload
// with all integers little-endian.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagespace/directory.hpp"
#include "stagespace/error.hpp"
#include "stagespace/geometry.hpp"

namespace stagespace {

enum class MsgType : std::uint8_t {
  kPut = 1,
  kPutAck = 2,
  kGet = 3,
  kGetResp = 4,
  kNotify = 5,
  kNotifyAck = 6,
  kStat = 7,
  kStatResp = 8,
  kBarrier = 9,
  kErr = 255,
};

inline constexpr std::size_t kFrameHeaderSize = 21;
inline constexpr std::uint64_t kMaxPayload = 1ull << 34;

bool is_known(std::uint8_t type);

struct FrameHeader {
  std::uint8_t type = 0;
  std::uint64_t correlation = 0;
  std::uint64_t payload_len = 0;
};

struct Frame {
  std::uint8_t type = 0;
  std::uint64_t correlation = 0;
  std::vector<std::byte> payload;

  MsgType msg_type() const { return static_cast<MsgType>(type); }
  friend bool operator==(const Frame&, const Frame&) = default;
};

std::array<std::byte, kFrameHeaderSize> encode_header(const FrameHeader& header);
/// Throws ErrorKind::kFraming on bad magic or an oversized length.
FrameHeader decode_header(std::span<const std::byte, kFrameHeaderSize> bytes);

void append_frame(std::vector<std::byte>& out, MsgType type, std::uint64_t correlation,
                  std::span<const std::byte> payload);

/// Incremental frame parser for a byte stream.
class FrameDecoder {
 public:
  void feed(std::span<const std::byte> bytes);
  /// Next complete frame, or nullopt if more bytes are needed. Throws
  /// ErrorKind::kFraming on corrupt input; the decoder is unusable after.
  std::optional<Frame> next();
  /// Throws ErrorKind::kFraming if a partial frame is buffered.
  void finish() const;
  std::size_t buffered() const { return buffer_.size() - consumed_; }

 private:
  std::vector<std::byte> buffer_;
  std::size_t consumed_ = 0;
};

// Little-endian field writer/reader for payload codecs.
class PayloadWriter {
 public:
  explicit PayloadWriter(std::vector<std::byte>& out) : out_(out) {}
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void str8(std::string_view s);  // u8 length prefix
  void box(const NDBox& b);
  void bytes(std::span<const std::byte> b);

 private:
  std::vector<std::byte>& out_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::span<const std::byte> in) : in_(in) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::string str8();
  NDBox box();
  std::span<const std::byte> bytes(std::size_t n);
  std::span<const std::byte> rest();
  std::size_t remaining() const { return in_.size() - pos_; }
  /// Throws if unread bytes remain.
  void expect_end() const;

 private:
  std::span<const std::byte> take(std::size_t n);
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

/// PUT payload. `data` views the caller's (or the decoded frame's) buffer.
struct PutRequest {
  std::string var;
  std::uint32_t version = 0;
  std::uint32_t element_size = 0;
  NDBox box;
  std::span<const std::byte> data;
};

struct GetRequest {
  std::string var;
  std::uint32_t version = 0;
  std::uint32_t element_size = 0;
  NDBox box;
  std::uint32_t timeout_ms = 0;
  friend bool operator==(const GetRequest&, const GetRequest&) = default;
};

struct GetResponse {
  NDBox box;
  std::uint32_t element_size = 0;
  std::span<const std::byte> data;
};

struct StatResponse {
  std::uint32_t server_id = 0;
  TierStats tier;
  std::uint64_t descriptor_count = 0;
  std::uint64_t pending_gets = 0;
  std::uint64_t notify_failures = 0;
  std::uint64_t notify_sent = 0;
  friend bool operator==(const StatResponse&, const StatResponse&) = default;
};

struct ErrorReply {
  ErrorCode code = ErrorCode::kInternal;
  std::string message;
  friend bool operator==(const ErrorReply&, const ErrorReply&) = default;
};

struct BarrierRequest {
  std::uint64_t epoch = 0;
  std::uint32_t participants = 0;
  friend bool operator==(const BarrierRequest&, const BarrierRequest&) = default;
};

/// Everything in a PUT payload except the trailing data bytes.
std::vector<std::byte> encode_put_head(const PutRequest& req);
std::vector<std::byte> encode(const PutRequest& req);
PutRequest decode_put(std::span<const std::byte> payload);

std::vector<std::byte> encode(const GetRequest& req);
GetRequest decode_get(std::span<const std::byte> payload);

std::vector<std::byte> encode_get_resp_head(const GetResponse& resp);
std::vector<std::byte> encode(const GetResponse& resp);
GetResponse decode_get_resp(std::span<const std::byte> payload);

void encode_descriptor(PayloadWriter& w, const ObjectDescriptor& desc);
ObjectDescriptor decode_descriptor(PayloadReader& r);

std::vector<std::byte> encode_notify(std::span<const ObjectDescriptor> descs);
std::vector<ObjectDescriptor> decode_notify(std::span<const std::byte> payload);

std::vector<std::byte> encode(const StatResponse& resp);
StatResponse decode_stat_resp(std::span<const std::byte> payload);

std::vector<std::byte> encode(const ErrorReply& err);
ErrorReply decode_error(std::span<const std::byte> payload);

std::vector<std::byte> encode(const BarrierRequest& req);
BarrierRequest decode_barrier(std::span<const std::byte> payload);

}  // namespace stagespace
