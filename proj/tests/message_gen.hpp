#pragma once

// Random valid protocol messages and a checker that decodes a frame back
// into the value it was generated from. Shared by the wire tests and the
// acceptance binary.

#include <algorithm>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "stagespace/wire.hpp"

namespace stagespace::testing {

struct OwnedPut {
  std::string var;
  std::uint32_t version;
  std::uint32_t element_size;
  NDBox box;
  std::vector<std::byte> data;
};

struct OwnedGetResp {
  NDBox box;
  std::uint32_t element_size;
  std::vector<std::byte> data;
};

struct RawFrame {
  std::vector<std::byte> payload;
};

using Message = std::variant<OwnedPut, GetRequest, OwnedGetResp, std::vector<ObjectDescriptor>,
                             StatResponse, ErrorReply, BarrierRequest, RawFrame>;

struct Generated {
  MsgType type;
  std::uint64_t correlation;
  Message value;
};

class MessageGen {
 public:
  explicit MessageGen(std::uint64_t seed) : rng_(seed) {}

  Generated next() {
    Generated g{MsgType::kPut, rng_(), RawFrame{}};
    switch (rng_() % 9) {
      case 0: {
        auto box = small_box();
        auto es = element_size();
        g.type = MsgType::kPut;
        g.value = OwnedPut{name(), u32(), es, box, bytes(volume(box) * es)};
        break;
      }
      case 1:
        g.type = MsgType::kGet;
        g.value = GetRequest{name(), u32(), element_size(), any_box(), u32()};
        break;
      case 2: {
        auto box = small_box();
        auto es = element_size();
        g.type = MsgType::kGetResp;
        g.value = OwnedGetResp{box, es, bytes(volume(box) * es)};
        break;
      }
      case 3: {
        std::vector<ObjectDescriptor> descs;
        for (auto n = rng_() % 5; n > 0; --n) {
          auto box = any_box();
          descs.push_back(ObjectDescriptor{name(), u32(), box, element_size(), u32(),
                                           ChunkHandle{rng_(), rng_(), rng_()}});
        }
        g.type = MsgType::kNotify;
        g.value = std::move(descs);
        break;
      }
      case 4:
        g.type = MsgType::kStatResp;
        g.value = StatResponse{u32(), TierStats{rng_(), rng_(), rng_(), rng_(), rng_()},
                               rng_(), rng_(), rng_(), rng_()};
        break;
      case 5:
        g.type = MsgType::kErr;
        g.value = ErrorReply{static_cast<ErrorCode>(1 + rng_() % 8), text(rng_() % 200)};
        break;
      case 6:
        g.type = MsgType::kBarrier;
        g.value = BarrierRequest{rng_(), u32()};
        break;
      default: {
        // Messages with empty or opaque payloads.
        const MsgType kinds[] = {MsgType::kPutAck, MsgType::kNotifyAck, MsgType::kStat};
        g.type = kinds[rng_() % 3];
        g.value = RawFrame{bytes(g.type == MsgType::kStat ? 0 : rng_() % 16)};
        break;
      }
    }
    return g;
  }

  static std::vector<std::byte> payload_of(const Generated& g) {
    return std::visit(
        [](const auto& v) -> std::vector<std::byte> {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, OwnedPut>) {
            return encode(PutRequest{v.var, v.version, v.element_size, v.box, v.data});
          } else if constexpr (std::is_same_v<T, OwnedGetResp>) {
            return encode(GetResponse{v.box, v.element_size, v.data});
          } else if constexpr (std::is_same_v<T, std::vector<ObjectDescriptor>>) {
            return encode_notify(v);
          } else if constexpr (std::is_same_v<T, RawFrame>) {
            return v.payload;
          } else {
            return encode(v);
          }
        },
        g.value);
  }

  static void append(std::vector<std::byte>& stream, const Generated& g) {
    append_frame(stream, g.type, g.correlation, payload_of(g));
  }

  /// True when `f` decodes to exactly the generated value.
  static bool matches(const Frame& f, const Generated& g) {
    if (f.msg_type() != g.type || f.correlation != g.correlation) return false;
    return std::visit(
        [&](const auto& v) -> bool {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, OwnedPut>) {
            auto p = decode_put(f.payload);
            return p.var == v.var && p.version == v.version && p.element_size == v.element_size &&
                   p.box == v.box && std::ranges::equal(p.data, v.data);
          } else if constexpr (std::is_same_v<T, GetRequest>) {
            return decode_get(f.payload) == v;
          } else if constexpr (std::is_same_v<T, OwnedGetResp>) {
            auto r = decode_get_resp(f.payload);
            return r.box == v.box && r.element_size == v.element_size &&
                   std::ranges::equal(r.data, v.data);
          } else if constexpr (std::is_same_v<T, std::vector<ObjectDescriptor>>) {
            return decode_notify(f.payload) == v;
          } else if constexpr (std::is_same_v<T, StatResponse>) {
            return decode_stat_resp(f.payload) == v;
          } else if constexpr (std::is_same_v<T, ErrorReply>) {
            return decode_error(f.payload) == v;
          } else if constexpr (std::is_same_v<T, BarrierRequest>) {
            return decode_barrier(f.payload) == v;
          } else {
            return f.payload == v.payload;
          }
        },
        g.value);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::uint32_t u32() { return static_cast<std::uint32_t>(rng_()); }
  std::uint32_t element_size() { return 1 + static_cast<std::uint32_t>(rng_() % 16); }

  std::string text(std::size_t n) {
    std::string s(n, ' ');
    for (auto& c : s) c = static_cast<char>(rng_());
    return s;
  }
  std::string name() { return text(rng_() % 256); }

  std::vector<std::byte> bytes(std::size_t n) {
    std::vector<std::byte> out(n);
    for (auto& b : out) b = static_cast<std::byte>(rng_());
    return out;
  }

  NDBox shaped(std::size_t nd, Coord max_lower, Coord max_extent) {
    std::array<Coord, 3> lo{}, hi{};
    for (std::size_t d = 0; d < nd; ++d) {
      lo[d] = rng_() % max_lower;
      hi[d] = lo[d] + 1 + rng_() % max_extent;
    }
    return NDBox(std::span<const Coord>(lo.data(), nd), std::span<const Coord>(hi.data(), nd));
  }
  // Boxes carrying data stay small; metadata-only boxes span the full range.
  NDBox small_box() { return shaped(1 + rng_() % 3, 1ull << 40, 6); }
  NDBox any_box() { return shaped(1 + rng_() % 3, 1ull << 62, 1ull << 60); }

  std::mt19937_64 rng_;
};

}  // namespace stagespace::testing
