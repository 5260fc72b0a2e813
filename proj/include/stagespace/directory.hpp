#pragma once

// Object metadata: which server owns which distribution block, and which
// chunks have been registered for each (variable, version).

#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stagespace/geometry.hpp"
#include "stagespace/tier.hpp"

namespace stagespace {

struct ObjectDescriptor {
  std::string var;
  std::uint32_t version = 0;
  NDBox box;
  std::uint32_t element_size = 0;
  std::uint32_t owner = 0;
  ChunkHandle handle;  // meaningful only on `owner`

  std::uint64_t byte_length() const { return volume(box) * element_size; }
  friend bool operator==(const ObjectDescriptor&, const ObjectDescriptor&) = default;
};

inline constexpr std::size_t kMaxVarLength = 255;

using BlockCoords = std::vector<std::uint64_t>;

/// The global domain cut into equal distribution blocks; each block is
/// owned by exactly one server.
struct DistGrid {
  NDBox global_box;
  std::vector<Coord> block_extent;
  std::uint32_t server_count = 1;

  /// Splits only the leading dimension into about 4 blocks per server (the
  /// block extent is rounded down to a divisor of the global extent).
  static DistGrid make_default(const NDBox& global, std::uint32_t servers);

  std::uint64_t blocks_along(std::size_t d) const {
    return global_box.extent(d) / block_extent[d];
  }
  std::uint64_t block_count() const;
  NDBox block_box(std::span<const std::uint64_t> coords) const;
  void validate() const;
};

/// 64-bit FNV-1a over `var` and the block coordinates, reduced mod
/// server_count. Independent of version.
std::uint32_t shard_owner(const DistGrid& grid, std::string_view var,
                          std::span<const std::uint64_t> block_coords);

/// Blocks whose extent intersects `box`, row-major.
std::vector<BlockCoords> blocks_of(const DistGrid& grid, const NDBox& box);

struct RegisterOutcome {
  /// Descriptor displaced by an identical (var, version, box) registration.
  std::optional<ObjectDescriptor> replaced;
  /// Descriptors dropped by the version ring.
  std::vector<ObjectDescriptor> evicted;
  /// False when an identical descriptor was already present.
  bool changed = true;
};

class Directory {
 public:
  explicit Directory(DistGrid grid, std::uint32_t max_versions = 10);

  const DistGrid& grid() const { return grid_; }

  /// Registers or replaces. A (var, version) keeps the element size of its
  /// first registration; a mismatch throws ErrorKind::kUsage.
  RegisterOutcome register_object(ObjectDescriptor desc);

  /// Matching descriptors intersecting `box`, oldest registration first.
  std::vector<ObjectDescriptor> query(std::string_view var, std::uint32_t version,
                                      const NDBox& box) const;

  bool is_covered(std::string_view var, std::uint32_t version, const NDBox& box) const;

  std::optional<std::uint32_t> element_size_of(std::string_view var,
                                               std::uint32_t version) const;

  /// Removes one descriptor (exact key match). Returns it if present.
  std::optional<ObjectDescriptor> remove(std::string_view var, std::uint32_t version,
                                         const NDBox& box);

  std::size_t size() const;

  /// All descriptors sorted by (var, version, box).
  std::vector<ObjectDescriptor> snapshot() const;

 private:
  struct Entry {
    ObjectDescriptor desc;
    std::uint64_t seq = 0;
  };
  struct VersionSlot {
    std::uint32_t element_size = 0;
    std::map<NDBox, Entry> entries;
    std::unordered_map<std::uint64_t, std::vector<NDBox>> by_block;
  };
  using VarVersions = std::map<std::uint32_t, VersionSlot>;

  std::uint64_t block_linear(std::span<const std::uint64_t> coords) const;
  void index(VersionSlot& slot, const NDBox& box);
  void unindex(VersionSlot& slot, const NDBox& box);
  std::vector<const Entry*> collect(const VersionSlot& slot, const NDBox& box) const;

  DistGrid grid_;
  std::uint32_t max_versions_;
  mutable std::shared_mutex mu_;
  std::map<std::string, VarVersions, std::less<>> vars_;
  std::uint64_t next_seq_ = 0;
  std::size_t count_ = 0;
};

}  // namespace stagespace
