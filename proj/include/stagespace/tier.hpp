#pragma once

// Chunk storage backends. A tier owns a byte arena of fixed capacity and
// hands out non-overlapping chunk handles inside it.
//
//   heap      anonymous memory (the DRAM role)
//   mmap      a memory-mapped file on a block device; flushed chunks and
//             their handle table survive process death
//   delayed   wraps one of the above and adds an affine per-op latency
//             (fixed + per-MiB) to every read and write

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stagespace {

enum class TierKind { kHeap, kMmapFile, kDelayed };

struct TierConfig {
  TierKind kind = TierKind::kHeap;
  /// Backend wrapped by kDelayed; never kDelayed itself.
  TierKind inner = TierKind::kHeap;
  std::filesystem::path backing_path;
  std::uint64_t capacity_bytes = 64ull << 20;
  std::chrono::microseconds delay_per_op{0};
  std::chrono::microseconds delay_per_mib{0};

  TierKind backend() const { return kind == TierKind::kDelayed ? inner : kind; }
  void validate() const;
};

/// Parses "heap[:SIZE]", "mmap:PATH[:SIZE]" and
/// "delayed:OP_US,MIB_US:<heap or mmap spec>". SIZE accepts k/m/g suffixes.
TierConfig parse_tier_spec(std::string_view spec);
std::string format_tier_spec(const TierConfig& config);

/// "64m" -> 67108864.
std::uint64_t parse_size(std::string_view text);

struct ChunkKey {
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;
  friend bool operator==(const ChunkKey&, const ChunkKey&) = default;
};

struct ChunkHandle {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t generation = 0;
  friend bool operator==(const ChunkHandle&, const ChunkHandle&) = default;
};

struct TierStats {
  std::uint64_t used_bytes = 0;
  std::uint64_t capacity_bytes = 0;
  std::uint64_t chunk_count = 0;
  std::uint64_t cumulative_read_bytes = 0;
  std::uint64_t cumulative_write_bytes = 0;
  friend bool operator==(const TierStats&, const TierStats&) = default;
};

/// A flushed chunk found in a persistent tier at open time.
struct RecoveredChunk {
  ChunkHandle handle;
  ChunkKey key;
};

class Tier {
 public:
  virtual ~Tier() = default;

  /// Reserves `length` bytes. Throws ErrorKind::kCapacity when full.
  virtual ChunkHandle allocate(std::uint64_t length, ChunkKey key = {}) = 0;
  /// Releases a live handle; its bytes may be reused by later allocations.
  virtual void free(const ChunkHandle& handle) = 0;

  virtual void write_chunk(const ChunkHandle& handle, std::span<const std::byte> bytes) = 0;
  /// Makes the chunk and its table entry durable (no-op for heap).
  virtual void flush_chunk(const ChunkHandle& handle) = 0;
  virtual void read_chunk(const ChunkHandle& handle, std::span<std::byte> out) = 0;
  std::vector<std::byte> read_chunk(const ChunkHandle& handle);

  /// Zero-copy read: calls `fn` with the chunk's bytes. `accessed_bytes` is
  /// what the caller will actually touch; it drives read accounting and
  /// injected latency.
  virtual void visit_chunk(const ChunkHandle& handle, std::uint64_t accessed_bytes,
                           const std::function<void(std::span<const std::byte>)>& fn) = 0;

  virtual TierStats stats() const = 0;
  virtual bool persistent() const { return false; }
  virtual std::vector<RecoveredChunk> recovered_chunks() const { return {}; }
};

std::unique_ptr<Tier> open_tier(const TierConfig& config);
std::unique_ptr<Tier> wrap_delayed(std::unique_ptr<Tier> inner, std::chrono::microseconds per_op,
                                   std::chrono::microseconds per_mib);

/// Fixed-size table slots reserved in an mmap tier file of this capacity.
std::uint64_t mmap_table_slots(std::uint64_t capacity_bytes);

}  // namespace stagespace
