#include "stagespace/tier.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <thread>
#include <unordered_map>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

constexpr char kTierMagic[16] = {'S', 'T', 'A', 'G', 'E', 'S', 'P', 'A',
                                 'C', 'E', '-', 'T', 'I', 'E', 'R', '1'};
constexpr std::size_t kHeaderFixed = 32;  // magic + capacity + chunk_count
constexpr std::size_t kEntrySize = 40;    // offset, length, generation, key(16)

std::size_t page_size() {
  static const std::size_t size = static_cast<std::size_t>(::sysconf(_SC_PAGESIZE));
  return size;
}

std::uint64_t round_up(std::uint64_t v, std::uint64_t align) {
  return (v + align - 1) / align * align;
}

void store_u64(std::byte* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

std::uint64_t load_u64(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::to_integer<std::uint8_t>(p[i])) << (8 * i);
  return v;
}

Error lifecycle(const std::string& what, const ChunkHandle& h) {
  return Error(ErrorKind::kLifecycle, what + " (offset " + std::to_string(h.offset) +
                                          ", length " + std::to_string(h.length) +
                                          ", generation " + std::to_string(h.generation) + ")");
}

// Shared arena bookkeeping for heap and mmap tiers. Subclasses provide the
// memory and persist table changes.
class ArenaTier : public Tier {
 public:
  ChunkHandle allocate(std::uint64_t length, ChunkKey key) override {
    if (length == 0) throw_usage("allocate: zero-length chunk");
    std::unique_lock lock(mu_);
    auto slot = take_slot();
    auto offset = take_extent(length);
    if (!offset) {
      release_slot(slot);
      throw Error(ErrorKind::kCapacity,
                  "tier full: need " + std::to_string(length) + " bytes, " +
                      std::to_string(capacity_ - used_) + " of " + std::to_string(capacity_) +
                      " free (or fragmented)");
    }
    ChunkHandle h{*offset, length, next_generation_++};
    live_.emplace(h.generation, Live{h, key, slot, false, false});
    used_ += length;
    return h;
  }

  void free(const ChunkHandle& handle) override {
    std::unique_lock lock(mu_);
    auto it = find_live(handle, "free");
    if (it->second.persisted) erase_entry(it->second.slot);
    release_slot(it->second.slot);
    give_extent(handle.offset, handle.length);
    used_ -= handle.length;
    live_.erase(it);
  }

  void write_chunk(const ChunkHandle& handle, std::span<const std::byte> bytes) override {
    if (bytes.size() != handle.length) {
      throw_usage("write_chunk: " + std::to_string(bytes.size()) + " bytes for a " +
                  std::to_string(handle.length) + "-byte chunk");
    }
    {
      std::shared_lock lock(mu_);
      find_live(handle, "write_chunk");
    }
    std::memcpy(base_ + handle.offset, bytes.data(), bytes.size());
    {
      std::unique_lock lock(mu_);
      find_live(handle, "write_chunk")->second.written = true;
    }
    write_bytes_.fetch_add(bytes.size(), std::memory_order_relaxed);
  }

  void flush_chunk(const ChunkHandle& handle) override {
    Live entry;
    {
      std::shared_lock lock(mu_);
      auto it = find_live(handle, "flush_chunk");
      if (!it->second.written) throw lifecycle("flush_chunk: chunk never written", handle);
      entry = it->second;
    }
    if (!persistent()) return;
    sync_range(handle.offset + arena_offset(), handle.length);
    {
      std::unique_lock lock(mu_);
      auto it = find_live(handle, "flush_chunk");
      persist_entry(entry.slot, entry.handle, entry.key);
      it->second.persisted = true;
    }
    sync_entry(entry.slot);
  }

  void read_chunk(const ChunkHandle& handle, std::span<std::byte> out) override {
    if (out.size() != handle.length) {
      throw_usage("read_chunk: output buffer size " + std::to_string(out.size()) +
                  " differs from chunk length " + std::to_string(handle.length));
    }
    check_readable(handle);
    std::memcpy(out.data(), base_ + handle.offset, out.size());
    read_bytes_.fetch_add(out.size(), std::memory_order_relaxed);
  }

  void visit_chunk(const ChunkHandle& handle, std::uint64_t accessed_bytes,
                   const std::function<void(std::span<const std::byte>)>& fn) override {
    check_readable(handle);
    fn(std::span<const std::byte>(base_ + handle.offset, handle.length));
    read_bytes_.fetch_add(accessed_bytes, std::memory_order_relaxed);
  }

  TierStats stats() const override {
    std::shared_lock lock(mu_);
    return {used_, capacity_, live_.size(), read_bytes_.load(), write_bytes_.load()};
  }

 protected:
  struct Live {
    ChunkHandle handle;
    ChunkKey key;
    std::uint64_t slot = 0;
    bool written = false;
    bool persisted = false;
  };

  void init_arena(std::byte* base, std::uint64_t capacity) {
    base_ = base;
    capacity_ = capacity;
    bump_ = 0;
  }

  // Re-registers a chunk found on disk; used only while opening.
  void adopt(const ChunkHandle& h, const ChunkKey& key, std::uint64_t slot) {
    live_.emplace(h.generation, Live{h, key, slot, true, true});
    used_ += h.length;
    next_generation_ = std::max(next_generation_, h.generation + 1);
  }

  // Rebuilds free extents from adopted chunks; used only while opening.
  void rebuild_free_space() {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& [gen, live] : live_) spans.emplace_back(live.handle.offset, live.handle.length);
    std::sort(spans.begin(), spans.end());
    std::uint64_t cursor = 0;
    for (const auto& [off, len] : spans) {
      if (off > cursor) free_.emplace(cursor, off - cursor);
      cursor = std::max(cursor, off + len);
    }
    bump_ = cursor;
  }

  virtual std::uint64_t take_slot() { return 0; }
  virtual void release_slot(std::uint64_t) {}
  virtual void persist_entry(std::uint64_t, const ChunkHandle&, const ChunkKey&) {}
  virtual void erase_entry(std::uint64_t) {}
  virtual void sync_entry(std::uint64_t) {}
  virtual void sync_range(std::uint64_t, std::uint64_t) {}
  virtual std::uint64_t arena_offset() const { return 0; }

  mutable std::shared_mutex mu_;
  std::unordered_map<std::uint64_t, Live> live_;  // by generation

 private:
  std::unordered_map<std::uint64_t, Live>::iterator find_live(const ChunkHandle& h,
                                                              const char* op) {
    auto it = live_.find(h.generation);
    if (it == live_.end() || it->second.handle != h) {
      throw lifecycle(std::string(op) + ": stale or unknown handle", h);
    }
    return it;
  }

  void check_readable(const ChunkHandle& handle) {
    std::shared_lock lock(mu_);
    auto it = find_live(handle, "read_chunk");
    if (!it->second.written) throw lifecycle("read_chunk: chunk never written", handle);
  }

  // First fit over released extents, then the untouched tail.
  std::optional<std::uint64_t> take_extent(std::uint64_t length) {
    for (auto it = free_.begin(); it != free_.end(); ++it) {
      if (it->second < length) continue;
      const auto off = it->first;
      const auto rest = it->second - length;
      free_.erase(it);
      if (rest) free_.emplace(off + length, rest);
      return off;
    }
    if (capacity_ - bump_ < length) return std::nullopt;
    const auto off = bump_;
    bump_ += length;
    return off;
  }

  void give_extent(std::uint64_t off, std::uint64_t len) {
    auto next = free_.lower_bound(off);
    if (next != free_.end() && off + len == next->first) {
      len += next->second;
      next = free_.erase(next);
    }
    if (next != free_.begin()) {
      auto prev = std::prev(next);
      if (prev->first + prev->second == off) {
        off = prev->first;
        len += prev->second;
        free_.erase(prev);
      }
    }
    if (off + len == bump_) {
      bump_ = off;
    } else {
      free_.emplace(off, len);
    }
  }

  std::byte* base_ = nullptr;
  std::uint64_t capacity_ = 0;
  std::uint64_t bump_ = 0;
  std::uint64_t used_ = 0;
  std::uint64_t next_generation_ = 1;
  std::map<std::uint64_t, std::uint64_t> free_;  // offset -> length
  std::atomic<std::uint64_t> read_bytes_{0};
  std::atomic<std::uint64_t> write_bytes_{0};
};

class HeapTier final : public ArenaTier {
 public:
  explicit HeapTier(std::uint64_t capacity) : length_(capacity) {
    void* p = ::mmap(nullptr, length_, PROT_READ | PROT_WRITE,
                     MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (p == MAP_FAILED) throw_io("heap tier: mmap of " + std::to_string(capacity) + " bytes");
    init_arena(static_cast<std::byte*>(p), capacity);
    mapping_ = p;
  }
  ~HeapTier() override { ::munmap(mapping_, length_); }

 private:
  void* mapping_ = nullptr;
  std::uint64_t length_;
};

class MmapFileTier final : public ArenaTier {
 public:
  explicit MmapFileTier(const TierConfig& config) : path_(config.backing_path) {
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw_io("mmap tier: open " + path_.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw_io("mmap tier: fstat " + path_.string());

    bool fresh = st.st_size == 0;
    std::uint64_t capacity = config.capacity_bytes;
    if (!fresh) {
      std::byte head[kHeaderFixed];
      if (st.st_size < static_cast<off_t>(kHeaderFixed) ||
          ::pread(fd_, head, sizeof head, 0) != static_cast<ssize_t>(sizeof head) ||
          std::memcmp(head, kTierMagic, sizeof kTierMagic) != 0) {
        close_fd();
        throw Error(ErrorKind::kConfig, "mmap tier: " + path_.string() + " is not a tier file");
      }
      const auto persisted = load_u64(head + 16);
      if (config.capacity_bytes < persisted) {
        close_fd();
        throw Error(ErrorKind::kConfig, "mmap tier: configured capacity " +
                                            std::to_string(config.capacity_bytes) +
                                            " smaller than persisted arena " +
                                            std::to_string(persisted));
      }
      capacity = persisted;
    }

    slots_ = mmap_table_slots(capacity);
    arena_offset_ = round_up(kHeaderFixed + kEntrySize * slots_, page_size());
    length_ = arena_offset_ + capacity;
    if (fresh || static_cast<std::uint64_t>(st.st_size) < length_) {
      if (::ftruncate(fd_, static_cast<off_t>(length_)) != 0) {
        close_fd();
        throw_io("mmap tier: ftruncate " + path_.string());
      }
    }
    void* p = ::mmap(nullptr, length_, PROT_READ | PROT_WRITE, MAP_SHARED, fd_, 0);
    if (p == MAP_FAILED) {
      close_fd();
      throw_io("mmap tier: mmap " + path_.string());
    }
    map_ = static_cast<std::byte*>(p);
    init_arena(map_ + arena_offset_, capacity);

    if (fresh) {
      std::memcpy(map_, kTierMagic, sizeof kTierMagic);
      store_u64(map_ + 16, capacity);
      store_u64(map_ + 24, 0);
      sync_bytes(0, kHeaderFixed);
    } else {
      load_table();
    }
  }

  ~MmapFileTier() override {
    if (map_) ::munmap(map_, length_);
    close_fd();
  }

  bool persistent() const override { return true; }

  std::vector<RecoveredChunk> recovered_chunks() const override { return recovered_; }

 private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  std::byte* entry_ptr(std::uint64_t slot) const {
    return map_ + kHeaderFixed + slot * kEntrySize;
  }

  void load_table() {
    const auto count = load_u64(map_ + 24);
    if (count > slots_) {
      throw Error(ErrorKind::kConfig, "mmap tier: corrupt chunk_count in " + path_.string());
    }
    chunk_count_ = count;
    high_water_ = count;
    for (std::uint64_t slot = 0; slot < count; ++slot) {
      const std::byte* e = entry_ptr(slot);
      ChunkHandle h{load_u64(e), load_u64(e + 8), load_u64(e + 16)};
      if (h.length == 0) {
        free_slots_.push_back(slot);
        continue;
      }
      ChunkKey key{load_u64(e + 24), load_u64(e + 32)};
      adopt(h, key, slot);
      recovered_.push_back({h, key});
    }
    rebuild_free_space();
  }

  std::uint64_t take_slot() override {
    if (!free_slots_.empty()) {
      auto s = free_slots_.back();
      free_slots_.pop_back();
      return s;
    }
    if (high_water_ >= slots_) {
      throw Error(ErrorKind::kCapacity, "mmap tier: chunk table full (" +
                                            std::to_string(slots_) + " slots)");
    }
    return high_water_++;
  }

  void release_slot(std::uint64_t slot) override { free_slots_.push_back(slot); }

  // Length is stored last so a torn entry never looks live.
  void persist_entry(std::uint64_t slot, const ChunkHandle& h, const ChunkKey& key) override {
    std::byte* e = entry_ptr(slot);
    store_u64(e + 8, 0);
    store_u64(e, h.offset);
    store_u64(e + 16, h.generation);
    store_u64(e + 24, key.hi);
    store_u64(e + 32, key.lo);
    store_u64(e + 8, h.length);
    if (slot + 1 > chunk_count_) {
      chunk_count_ = slot + 1;
      store_u64(map_ + 24, chunk_count_);
    }
  }

  void erase_entry(std::uint64_t slot) override {
    store_u64(entry_ptr(slot) + 8, 0);
    sync_bytes(kHeaderFixed + slot * kEntrySize, kEntrySize);
  }

  void sync_entry(std::uint64_t slot) override {
    sync_bytes(16, 16);
    sync_bytes(kHeaderFixed + slot * kEntrySize, kEntrySize);
  }

  void sync_range(std::uint64_t file_offset, std::uint64_t length) override {
    sync_bytes(file_offset, length);
  }

  std::uint64_t arena_offset() const override { return arena_offset_; }

  void sync_bytes(std::uint64_t file_offset, std::uint64_t length) {
    const auto page = page_size();
    const auto start = file_offset / page * page;
    const auto end = file_offset + length;
    if (::msync(map_ + start, end - start, MS_SYNC) != 0) {
      throw_io("mmap tier: msync " + path_.string());
    }
  }

  std::filesystem::path path_;
  int fd_ = -1;
  std::byte* map_ = nullptr;
  std::uint64_t length_ = 0;
  std::uint64_t slots_ = 0;
  std::uint64_t arena_offset_ = 0;
  std::uint64_t chunk_count_ = 0;
  std::uint64_t high_water_ = 0;
  std::vector<std::uint64_t> free_slots_;
  std::vector<RecoveredChunk> recovered_;
};

class DelayedTier final : public Tier {
 public:
  DelayedTier(std::unique_ptr<Tier> inner, std::chrono::microseconds per_op,
              std::chrono::microseconds per_mib)
      : inner_(std::move(inner)), per_op_(per_op), per_mib_(per_mib) {}

  ChunkHandle allocate(std::uint64_t length, ChunkKey key) override {
    return inner_->allocate(length, key);
  }
  void free(const ChunkHandle& handle) override { inner_->free(handle); }

  void write_chunk(const ChunkHandle& handle, std::span<const std::byte> bytes) override {
    const auto deadline = deadline_for(bytes.size());
    inner_->write_chunk(handle, bytes);
    std::this_thread::sleep_until(deadline);
  }

  void flush_chunk(const ChunkHandle& handle) override { inner_->flush_chunk(handle); }

  void read_chunk(const ChunkHandle& handle, std::span<std::byte> out) override {
    const auto deadline = deadline_for(out.size());
    inner_->read_chunk(handle, out);
    std::this_thread::sleep_until(deadline);
  }

  void visit_chunk(const ChunkHandle& handle, std::uint64_t accessed_bytes,
                   const std::function<void(std::span<const std::byte>)>& fn) override {
    const auto deadline = deadline_for(accessed_bytes);
    inner_->visit_chunk(handle, accessed_bytes, fn);
    std::this_thread::sleep_until(deadline);
  }

  TierStats stats() const override { return inner_->stats(); }
  bool persistent() const override { return inner_->persistent(); }
  std::vector<RecoveredChunk> recovered_chunks() const override {
    return inner_->recovered_chunks();
  }

 private:
  std::chrono::steady_clock::time_point deadline_for(std::uint64_t bytes) const {
    const auto extra = std::chrono::nanoseconds(
        static_cast<std::int64_t>(static_cast<double>(per_mib_.count()) * 1000.0 *
                                  static_cast<double>(bytes) / (1024.0 * 1024.0)));
    return std::chrono::steady_clock::now() + per_op_ + extra;
  }

  std::unique_ptr<Tier> inner_;
  std::chrono::microseconds per_op_;
  std::chrono::microseconds per_mib_;
};

std::string_view next_field(std::string_view& rest) {
  auto pos = rest.find(':');
  auto field = rest.substr(0, pos);
  rest = pos == std::string_view::npos ? std::string_view{} : rest.substr(pos + 1);
  return field;
}

std::string format_size(std::uint64_t bytes) {
  if (bytes && bytes % (1ull << 30) == 0) return std::to_string(bytes >> 30) + "g";
  if (bytes && bytes % (1ull << 20) == 0) return std::to_string(bytes >> 20) + "m";
  if (bytes && bytes % (1ull << 10) == 0) return std::to_string(bytes >> 10) + "k";
  return std::to_string(bytes);
}

}  // namespace

std::vector<std::byte> Tier::read_chunk(const ChunkHandle& handle) {
  std::vector<std::byte> out(handle.length);
  read_chunk(handle, out);
  return out;
}

void TierConfig::validate() const {
  if (capacity_bytes == 0) throw Error(ErrorKind::kConfig, "tier capacity must be > 0");
  if (kind == TierKind::kDelayed && inner == TierKind::kDelayed) {
    throw Error(ErrorKind::kConfig, "delayed tier must wrap heap or mmap");
  }
  if (backend() == TierKind::kMmapFile && backing_path.empty()) {
    throw Error(ErrorKind::kConfig, "mmap tier requires a backing path");
  }
  if (delay_per_op.count() < 0 || delay_per_mib.count() < 0) {
    throw Error(ErrorKind::kConfig, "tier delays must be non-negative");
  }
}

std::uint64_t parse_size(std::string_view text) {
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr == text.data()) {
    throw Error(ErrorKind::kConfig, "bad size '" + std::string(text) + "'");
  }
  std::string_view suffix(ptr, text.data() + text.size() - ptr);
  if (suffix.empty() || suffix == "b") return value;
  if (suffix == "k" || suffix == "K" || suffix == "KB" || suffix == "KiB") return value << 10;
  if (suffix == "m" || suffix == "M" || suffix == "MB" || suffix == "MiB") return value << 20;
  if (suffix == "g" || suffix == "G" || suffix == "GB" || suffix == "GiB") return value << 30;
  throw Error(ErrorKind::kConfig, "bad size suffix in '" + std::string(text) + "'");
}

TierConfig parse_tier_spec(std::string_view spec) {
  TierConfig config;
  std::string_view rest = spec;
  auto kind = next_field(rest);
  if (kind == "heap") {
    config.kind = TierKind::kHeap;
    if (!rest.empty()) config.capacity_bytes = parse_size(rest);
  } else if (kind == "mmap") {
    config.kind = TierKind::kMmapFile;
    // The size, if any, follows the last ':' and must start with a digit.
    auto colon = rest.rfind(':');
    if (colon != std::string_view::npos && colon + 1 < rest.size() &&
        std::isdigit(static_cast<unsigned char>(rest[colon + 1]))) {
      config.capacity_bytes = parse_size(rest.substr(colon + 1));
      rest = rest.substr(0, colon);
    }
    config.backing_path = std::string(rest);
  } else if (kind == "delayed") {
    auto delays = next_field(rest);
    auto comma = delays.find(',');
    if (comma == std::string_view::npos) {
      throw Error(ErrorKind::kConfig, "delayed spec needs OP_US,MIB_US: " + std::string(spec));
    }
    auto inner = parse_tier_spec(rest.empty() ? "heap" : rest);
    if (inner.kind == TierKind::kDelayed) {
      throw Error(ErrorKind::kConfig, "delayed tier cannot wrap another delayed tier");
    }
    config = inner;
    config.inner = inner.kind;
    config.kind = TierKind::kDelayed;
    config.delay_per_op = std::chrono::microseconds(parse_size(delays.substr(0, comma)));
    config.delay_per_mib = std::chrono::microseconds(parse_size(delays.substr(comma + 1)));
  } else {
    throw Error(ErrorKind::kConfig, "unknown tier kind in '" + std::string(spec) + "'");
  }
  config.validate();
  return config;
}

std::string format_tier_spec(const TierConfig& config) {
  std::string base;
  if (config.backend() == TierKind::kHeap) {
    base = "heap:" + format_size(config.capacity_bytes);
  } else {
    base = "mmap:" + config.backing_path.string() + ":" + format_size(config.capacity_bytes);
  }
  if (config.kind != TierKind::kDelayed) return base;
  return "delayed:" + std::to_string(config.delay_per_op.count()) + "," +
         std::to_string(config.delay_per_mib.count()) + ":" + base;
}

std::uint64_t mmap_table_slots(std::uint64_t capacity_bytes) {
  return std::clamp<std::uint64_t>(capacity_bytes / 4096, 1024, 1u << 20);
}

std::unique_ptr<Tier> open_tier(const TierConfig& config) {
  config.validate();
  std::unique_ptr<Tier> base;
  if (config.backend() == TierKind::kHeap) {
    base = std::make_unique<HeapTier>(config.capacity_bytes);
  } else {
    base = std::make_unique<MmapFileTier>(config);
  }
  if (config.kind != TierKind::kDelayed) return base;
  return wrap_delayed(std::move(base), config.delay_per_op, config.delay_per_mib);
}

std::unique_ptr<Tier> wrap_delayed(std::unique_ptr<Tier> inner, std::chrono::microseconds per_op,
                                   std::chrono::microseconds per_mib) {
  return std::make_unique<DelayedTier>(std::move(inner), per_op, per_mib);
}

}  // namespace stagespace
