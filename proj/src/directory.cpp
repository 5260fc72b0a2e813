#include "stagespace/directory.hpp"

#include <algorithm>
#include <mutex>
#include <set>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

// FNV-1a's low bits are weak for short inputs; the modulus only sees those.
std::uint64_t finalize(std::uint64_t h) {
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  h *= 0xc4ceb9fe1a85ec53ull;
  h ^= h >> 33;
  return h;
}

}  // namespace

DistGrid DistGrid::make_default(const NDBox& global, std::uint32_t servers) {
  if (servers == 0) throw_usage("DistGrid: server_count must be >= 1");
  DistGrid grid{global, {}, servers};
  for (std::size_t d = 0; d < global.ndims(); ++d) grid.block_extent.push_back(global.extent(d));
  const Coord lead = global.extent(0);
  Coord extent = std::max<Coord>(1, lead / (4ull * servers));
  while (lead % extent != 0) --extent;
  grid.block_extent[0] = extent;
  return grid;
}

std::uint64_t DistGrid::block_count() const {
  std::uint64_t n = 1;
  for (std::size_t d = 0; d < global_box.ndims(); ++d) n *= blocks_along(d);
  return n;
}

NDBox DistGrid::block_box(std::span<const std::uint64_t> coords) const {
  std::array<Coord, kMaxDims> lo{};
  std::array<Coord, kMaxDims> hi{};
  const auto n = global_box.ndims();
  for (std::size_t d = 0; d < n; ++d) {
    lo[d] = global_box.lower(d) + coords[d] * block_extent[d];
    hi[d] = lo[d] + block_extent[d];
  }
  return NDBox(std::span<const Coord>(lo.data(), n), std::span<const Coord>(hi.data(), n));
}

void DistGrid::validate() const {
  if (server_count == 0) throw_usage("DistGrid: server_count must be >= 1");
  if (block_extent.size() != global_box.ndims()) {
    throw_usage("DistGrid: block_extent has " + std::to_string(block_extent.size()) +
                " dims, global box has " + std::to_string(global_box.ndims()));
  }
  for (std::size_t d = 0; d < block_extent.size(); ++d) {
    if (block_extent[d] == 0 || global_box.extent(d) % block_extent[d] != 0) {
      throw_usage("DistGrid: block extent " + std::to_string(block_extent[d]) +
                  " does not divide global extent " + std::to_string(global_box.extent(d)));
    }
  }
}

std::uint32_t shard_owner(const DistGrid& grid, std::string_view var,
                          std::span<const std::uint64_t> block_coords) {
  if (block_coords.size() != grid.global_box.ndims()) {
    throw_usage("shard_owner: coordinate dimension mismatch");
  }
  for (std::size_t d = 0; d < block_coords.size(); ++d) {
    if (block_coords[d] >= grid.blocks_along(d)) {
      throw_usage("shard_owner: block coordinate " + std::to_string(block_coords[d]) +
                  " out of range in dimension " + std::to_string(d));
    }
  }
  if (grid.server_count == 1) return 0;
  std::uint64_t h = fnv1a(kFnvOffset, var.data(), var.size());
  for (auto c : block_coords) {
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(c >> (8 * i));
    h = fnv1a(h, le, sizeof le);
  }
  return static_cast<std::uint32_t>(finalize(h) % grid.server_count);
}

std::vector<BlockCoords> blocks_of(const DistGrid& grid, const NDBox& box) {
  if (!contains(grid.global_box, box)) {
    throw_usage("blocks_of: " + box.to_string() + " outside global domain " +
                grid.global_box.to_string());
  }
  const auto n = box.ndims();
  BlockCoords first(n), last(n);
  for (std::size_t d = 0; d < n; ++d) {
    first[d] = (box.lower(d) - grid.global_box.lower(d)) / grid.block_extent[d];
    last[d] = (box.upper(d) - 1 - grid.global_box.lower(d)) / grid.block_extent[d];
  }
  std::vector<BlockCoords> out;
  BlockCoords cur = first;
  while (true) {
    out.push_back(cur);
    std::size_t d = n;
    while (d-- > 0) {
      if (++cur[d] <= last[d]) break;
      cur[d] = first[d];
    }
    if (d == static_cast<std::size_t>(-1)) break;
  }
  return out;
}

Directory::Directory(DistGrid grid, std::uint32_t max_versions)
    : grid_(std::move(grid)), max_versions_(max_versions) {
  grid_.validate();
  if (max_versions_ == 0) throw_usage("Directory: max_versions must be >= 1");
}

std::uint64_t Directory::block_linear(std::span<const std::uint64_t> coords) const {
  std::uint64_t idx = 0;
  for (std::size_t d = 0; d < coords.size(); ++d) idx = idx * grid_.blocks_along(d) + coords[d];
  return idx;
}

void Directory::index(VersionSlot& slot, const NDBox& box) {
  for (const auto& b : blocks_of(grid_, box)) slot.by_block[block_linear(b)].push_back(box);
}

void Directory::unindex(VersionSlot& slot, const NDBox& box) {
  for (const auto& b : blocks_of(grid_, box)) {
    auto it = slot.by_block.find(block_linear(b));
    if (it == slot.by_block.end()) continue;
    auto& v = it->second;
    v.erase(std::remove(v.begin(), v.end(), box), v.end());
    if (v.empty()) slot.by_block.erase(it);
  }
}

RegisterOutcome Directory::register_object(ObjectDescriptor desc) {
  if (desc.var.size() > kMaxVarLength) throw_usage("register: variable name longer than 255 bytes");
  if (desc.element_size == 0) throw_usage("register: element_size is zero");
  if (!contains(grid_.global_box, desc.box)) {
    throw_usage("register: " + desc.box.to_string() + " outside global domain");
  }

  RegisterOutcome outcome;
  std::unique_lock lock(mu_);
  auto var_it = vars_.find(desc.var);
  if (var_it == vars_.end()) var_it = vars_.emplace(desc.var, VarVersions{}).first;
  auto& versions = var_it->second;

  auto [slot_it, fresh] = versions.try_emplace(desc.version);
  auto& slot = slot_it->second;
  if (fresh) {
    slot.element_size = desc.element_size;
  } else if (slot.element_size != desc.element_size) {
    throw_usage("register: element size " + std::to_string(desc.element_size) + " for " +
                desc.var + "@" + std::to_string(desc.version) + " already fixed at " +
                std::to_string(slot.element_size));
  }

  auto existing = slot.entries.find(desc.box);
  if (existing != slot.entries.end()) {
    if (existing->second.desc == desc) {
      outcome.changed = false;
    } else {
      outcome.replaced = existing->second.desc;
      existing->second = Entry{std::move(desc), next_seq_++};
    }
  } else {
    const NDBox box = desc.box;
    slot.entries.emplace(box, Entry{std::move(desc), next_seq_++});
    index(slot, box);
    ++count_;
  }

  while (versions.size() > max_versions_) {
    auto oldest = versions.begin();
    for (auto& [box, entry] : oldest->second.entries) outcome.evicted.push_back(entry.desc);
    count_ -= oldest->second.entries.size();
    versions.erase(oldest);
  }
  return outcome;
}

std::vector<const Directory::Entry*> Directory::collect(const VersionSlot& slot,
                                                        const NDBox& box) const {
  std::vector<const Entry*> hits;
  auto clipped = intersect(box, grid_.global_box);
  if (!clipped) return hits;
  std::set<NDBox> seen;
  for (const auto& b : blocks_of(grid_, *clipped)) {
    auto it = slot.by_block.find(block_linear(b));
    if (it == slot.by_block.end()) continue;
    for (const auto& candidate : it->second) {
      if (!seen.insert(candidate).second) continue;
      if (!intersect(candidate, box)) continue;
      hits.push_back(&slot.entries.at(candidate));
    }
  }
  std::sort(hits.begin(), hits.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
  return hits;
}

std::vector<ObjectDescriptor> Directory::query(std::string_view var, std::uint32_t version,
                                               const NDBox& box) const {
  std::vector<ObjectDescriptor> out;
  if (box.ndims() != grid_.global_box.ndims()) throw_usage("query: dimension mismatch");
  std::shared_lock lock(mu_);
  auto var_it = vars_.find(var);
  if (var_it == vars_.end()) return out;
  auto slot_it = var_it->second.find(version);
  if (slot_it == var_it->second.end()) return out;
  for (const Entry* e : collect(slot_it->second, box)) out.push_back(e->desc);
  return out;
}

bool Directory::is_covered(std::string_view var, std::uint32_t version,
                           const NDBox& box) const {
  if (box.ndims() != grid_.global_box.ndims()) throw_usage("is_covered: dimension mismatch");
  std::vector<NDBox> pieces;
  {
    std::shared_lock lock(mu_);
    auto var_it = vars_.find(var);
    if (var_it == vars_.end()) return false;
    auto slot_it = var_it->second.find(version);
    if (slot_it == var_it->second.end()) return false;
    for (const Entry* e : collect(slot_it->second, box)) pieces.push_back(e->desc.box);
  }
  return covers(box, pieces);
}

std::optional<std::uint32_t> Directory::element_size_of(std::string_view var,
                                                        std::uint32_t version) const {
  std::shared_lock lock(mu_);
  auto var_it = vars_.find(var);
  if (var_it == vars_.end()) return std::nullopt;
  auto slot_it = var_it->second.find(version);
  if (slot_it == var_it->second.end()) return std::nullopt;
  return slot_it->second.element_size;
}

std::optional<ObjectDescriptor> Directory::remove(std::string_view var, std::uint32_t version,
                                                  const NDBox& box) {
  std::unique_lock lock(mu_);
  auto var_it = vars_.find(var);
  if (var_it == vars_.end()) return std::nullopt;
  auto slot_it = var_it->second.find(version);
  if (slot_it == var_it->second.end()) return std::nullopt;
  auto& slot = slot_it->second;
  auto it = slot.entries.find(box);
  if (it == slot.entries.end()) return std::nullopt;
  ObjectDescriptor removed = std::move(it->second.desc);
  slot.entries.erase(it);
  unindex(slot, box);
  --count_;
  if (slot.entries.empty()) var_it->second.erase(slot_it);
  if (var_it->second.empty()) vars_.erase(var_it);
  return removed;
}

std::size_t Directory::size() const {
  std::shared_lock lock(mu_);
  return count_;
}

std::vector<ObjectDescriptor> Directory::snapshot() const {
  std::vector<ObjectDescriptor> out;
  std::shared_lock lock(mu_);
  out.reserve(count_);
  for (const auto& [var, versions] : vars_) {
    for (const auto& [version, slot] : versions) {
      for (const auto& [box, entry] : slot.entries) out.push_back(entry.desc);
    }
  }
  return out;
}

}  // namespace stagespace
