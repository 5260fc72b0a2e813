#include "stagespace/bench.hpp"

#include <fcntl.h>
#include <sys/prctl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <latch>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <thread>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

std::uint64_t fmix64(std::uint64_t k) {
  k ^= k >> 33;
  k *= 0xff51afd7ed558ccdull;
  k ^= k >> 33;
  k *= 0xc4ceb9fe1a85ec53ull;
  k ^= k >> 33;
  return k;
}

// Calls fn(point_of_row_start, row_length) for every last-dimension row of box.
template <typename Fn>
void for_each_row(const NDBox& box, Fn&& fn) {
  const auto nd = box.ndims();
  if (volume(box) == 0) return;
  std::vector<Coord> p(box.lower().begin(), box.lower().end());
  const auto row = box.extent(nd - 1);
  while (true) {
    fn(std::span<const Coord>(p), row);
    std::size_t d = nd - 1;
    while (d > 0) {
      --d;
      if (++p[d] < box.upper(d)) break;
      p[d] = box.lower(d);
      if (d == 0) return;
    }
    if (nd == 1) return;
  }
}

void element_bytes(std::uint64_t h, std::uint32_t version, std::uint64_t linear, std::size_t es,
                   std::byte* out) {
  for (std::size_t off = 0, w = 0; off < es; off += 8, ++w) {
    auto v = pattern_word(h, version, linear, w);
    std::memcpy(out + off, &v, std::min<std::size_t>(8, es - off));
  }
}

}  // namespace

std::uint64_t var_hash(std::string_view var) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : var) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t pattern_word(std::uint64_t h, std::uint32_t version, std::uint64_t linear,
                           std::uint64_t word) {
  return fmix64(h ^ fmix64((std::uint64_t{version} << 32) ^ word) ^
                (linear * 0x9e3779b97f4a7c15ull));
}

void fill_pattern(const MutableRegionView& dst, const NDBox& global, std::string_view var,
                  std::uint32_t version) {
  if (!contains(global, dst.box) || dst.bytes.size() != volume(dst.box) * dst.element_size) {
    throw_usage("pattern region " + dst.box.to_string() + " does not fit " + global.to_string());
  }
  const auto h = var_hash(var);
  const auto es = dst.element_size;
  std::byte* out = dst.bytes.data();
  for_each_row(dst.box, [&](std::span<const Coord> p, Coord n) {
    const auto base = linear_index(global, p);
    for (Coord k = 0; k < n; ++k, out += es) element_bytes(h, version, base + k, es, out);
  });
}

std::string PatternMismatch::to_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < coordinate.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(coordinate[i]);
  }
  return s + ")";
}

std::optional<PatternMismatch> verify_pattern(const ConstRegionView& src, const NDBox& global,
                                              std::string_view var, std::uint32_t version) {
  if (!contains(global, src.box) || src.bytes.size() != volume(src.box) * src.element_size) {
    throw_usage("pattern region " + src.box.to_string() + " does not fit " + global.to_string());
  }
  const auto h = var_hash(var);
  const auto es = src.element_size;
  std::vector<std::byte> expect(es);
  const std::byte* in = src.bytes.data();
  std::optional<PatternMismatch> first;
  for_each_row(src.box, [&](std::span<const Coord> p, Coord n) {
    if (first) return;
    const auto base = linear_index(global, p);
    for (Coord k = 0; k < n; ++k, in += es) {
      element_bytes(h, version, base + k, es, expect.data());
      if (std::memcmp(expect.data(), in, es) != 0) {
        PatternMismatch m;
        m.coordinate.assign(p.begin(), p.end());
        m.coordinate.back() += k;
        first = std::move(m);
        return;
      }
    }
  });
  return first;
}

// ---- devbench ---------------------------------------------------------------

std::string_view to_string(AccessPattern p) { return p == AccessPattern::kSeq ? "seq" : "rand"; }

std::string_view to_string(RwMode m) {
  switch (m) {
    case RwMode::kRead: return "read";
    case RwMode::kWrite: return "write";
    case RwMode::kMix50: return "mix50";
  }
  return "?";
}

AccessPattern parse_access_pattern(std::string_view text) {
  if (text == "seq") return AccessPattern::kSeq;
  if (text == "rand") return AccessPattern::kRand;
  throw_usage("pattern must be seq or rand, got '" + std::string(text) + "'");
}

RwMode parse_rw_mode(std::string_view text) {
  if (text == "read") return RwMode::kRead;
  if (text == "write") return RwMode::kWrite;
  if (text == "mix50") return RwMode::kMix50;
  throw_usage("rw must be read, write or mix50, got '" + std::string(text) + "'");
}

void DevbenchConfig::validate() const {
  if (target.empty()) throw Error(ErrorKind::kConfig, "devbench target is empty");
  if (transfer_size < 512) throw Error(ErrorKind::kConfig, "transfer size must be >= 512");
  if (jobs == 0 || queue_depth == 0) throw Error(ErrorKind::kConfig, "jobs and qd must be >= 1");
  if (runtime_s < 0) throw Error(ErrorKind::kConfig, "runtime must be >= 0");
  if (runtime_s == 0 && total_bytes == 0) {
    throw Error(ErrorKind::kConfig, "runtime and total bytes cannot both be unbounded");
  }
}

bool DevbenchRow::same_columns(const DevbenchRow& o) const {
  return pattern == o.pattern && rw == o.rw && bs == o.bs && jobs == o.jobs && qd == o.qd &&
         direct == o.direct && mib_per_s == o.mib_per_s && iops == o.iops &&
         mean_lat_us == o.mean_lat_us && p99_lat_us == o.p99_lat_us;
}

bool is_tier_target(std::string_view target) {
  return target == "heap" || target.starts_with("heap:") || target.starts_with("mmap:") ||
         target.starts_with("delayed:");
}

namespace {

struct AlignedFree {
  void operator()(std::byte* p) const { std::free(p); }
};
using AlignedBuffer = std::unique_ptr<std::byte, AlignedFree>;

AlignedBuffer aligned_buffer(std::size_t n) {
  auto* p = static_cast<std::byte*>(std::aligned_alloc(4096, (n + 4095) / 4096 * 4096));
  if (!p) throw std::bad_alloc();
  return AlignedBuffer(p);
}

// Fixed-size slots addressed by index.
class Target {
 public:
  virtual ~Target() = default;
  virtual void read(std::uint64_t slot, std::span<std::byte> buf) = 0;
  virtual void write(std::uint64_t slot, std::span<const std::byte> buf) = 0;
  std::uint64_t slots = 0;
  bool direct = false;
};

class FileTarget final : public Target {
 public:
  FileTarget(const std::filesystem::path& path, std::uint64_t bs, std::uint64_t size,
             bool want_direct, bool prefill)
      : bs_(bs) {
    slots = size / bs;
    if (slots == 0) throw Error(ErrorKind::kConfig, "file size smaller than one transfer");
    if (prefill) fill(path, slots * bs);
    if (want_direct) {
      fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC | O_DIRECT, 0644);
      if (fd_ >= 0) {
        // Some filesystems accept the flag at open but refuse the I/O.
        auto probe = aligned_buffer(4096);
        if (::pread(fd_, probe.get(), 4096, 0) < 0 && errno == EINVAL) {
          ::close(fd_);
          fd_ = -1;
        }
      }
      if (fd_ >= 0) {
        direct = true;
      } else {
        std::cerr << "devbench: O_DIRECT refused for " << path.string()
                  << ", using buffered I/O\n";
      }
    }
    if (fd_ < 0) fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw_io("open " + path.string());
  }
  ~FileTarget() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void read(std::uint64_t slot, std::span<std::byte> buf) override {
    std::size_t done = 0;
    while (done < buf.size()) {
      auto n = ::pread(fd_, buf.data() + done, buf.size() - done,
                       static_cast<off_t>(slot * bs_ + done));
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw_io("pread");
      if (n == 0) throw Error(ErrorKind::kIo, "short read in devbench target");
      done += static_cast<std::size_t>(n);
    }
  }

  void write(std::uint64_t slot, std::span<const std::byte> buf) override {
    std::size_t done = 0;
    while (done < buf.size()) {
      auto n = ::pwrite(fd_, buf.data() + done, buf.size() - done,
                        static_cast<off_t>(slot * bs_ + done));
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw_io("pwrite");
      done += static_cast<std::size_t>(n);
    }
  }

 private:
  static void fill(const std::filesystem::path& path, std::uint64_t size) {
    std::error_code ec;
    auto have = std::filesystem::file_size(path, ec);
    if (!ec && have >= size) return;
    int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw_io("open " + path.string());
    std::vector<std::byte> chunk(1 << 20);
    std::mt19937_64 rng(size);
    for (std::size_t i = 0; i + 8 <= chunk.size(); i += 8) {
      auto v = rng();
      std::memcpy(chunk.data() + i, &v, 8);
    }
    std::uint64_t off = ec ? 0 : have;
    while (off < size) {
      auto n = std::min<std::uint64_t>(chunk.size(), size - off);
      auto w = ::pwrite(fd, chunk.data(), n, static_cast<off_t>(off));
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) {
        ::close(fd);
        throw_io("prefill " + path.string());
      }
      off += static_cast<std::uint64_t>(w);
    }
    ::fsync(fd);
    ::close(fd);
  }

  std::uint64_t bs_;
  int fd_ = -1;
};

class TierTarget final : public Target {
 public:
  TierTarget(const TierConfig& config, std::uint64_t bs, std::uint64_t extent) {
    TierConfig base = config;
    base.kind = config.backend();
    tier_ = open_tier(base);
    const auto want = std::max<std::uint64_t>(1, std::min(extent, config.capacity_bytes / 2) / bs);
    std::vector<std::byte> fill(bs, std::byte{0x5a});
    for (std::uint64_t i = 0; i < want; ++i) {
      try {
        handles_.push_back(tier_->allocate(bs));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kCapacity) throw;
        break;
      }
      // Every slot is written once so reads never hit an unwritten chunk.
      tier_->write_chunk(handles_.back(), fill);
    }
    if (handles_.empty()) throw Error(ErrorKind::kConfig, "tier too small for one transfer");
    if (config.kind == TierKind::kDelayed) {
      tier_ = wrap_delayed(std::move(tier_), config.delay_per_op, config.delay_per_mib);
    }
    slots = handles_.size();
    persistent_ = tier_->persistent();
  }

  void read(std::uint64_t slot, std::span<std::byte> buf) override {
    tier_->read_chunk(handles_[slot], buf);
  }
  void write(std::uint64_t slot, std::span<const std::byte> buf) override {
    tier_->write_chunk(handles_[slot], buf);
    if (persistent_) tier_->flush_chunk(handles_[slot]);
  }

 private:
  std::unique_ptr<Tier> tier_;
  std::vector<ChunkHandle> handles_;
  bool persistent_ = false;
};

}  // namespace

DevbenchRow run_devbench(const DevbenchConfig& config) {
  config.validate();
  const auto bs = config.transfer_size;
  const bool needs_data = config.rw != RwMode::kWrite;
  std::unique_ptr<Target> target;
  if (is_tier_target(config.target)) {
    target = std::make_unique<TierTarget>(parse_tier_spec(config.target), bs, config.file_size);
  } else {
    target = std::make_unique<FileTarget>(config.target, bs, config.file_size, config.direct,
                                          needs_data);
  }

  const std::uint32_t jobs = config.jobs;
  const std::uint32_t qd = config.queue_depth;
  const std::uint64_t stripe = target->slots / jobs;
  if (config.pattern == AccessPattern::kSeq && stripe == 0) {
    throw Error(ErrorKind::kConfig, "target holds " + std::to_string(target->slots) +
                                        " transfers, too few for " + std::to_string(jobs) +
                                        " sequential stripes");
  }
  const std::uint64_t max_ops =
      config.total_bytes ? config.total_bytes / bs : std::numeric_limits<std::uint64_t>::max();
  if (max_ops == 0) throw Error(ErrorKind::kConfig, "total bytes smaller than one transfer");

  std::vector<std::atomic<std::uint64_t>> cursors(jobs);
  std::atomic<std::uint64_t> issued{0};
  std::vector<std::vector<std::uint64_t>> latencies(std::size_t{jobs} * qd);
  std::vector<std::exception_ptr> errors(latencies.size());
  std::latch ready(static_cast<std::ptrdiff_t>(latencies.size()) + 1);
  std::atomic<std::int64_t> start_ns{0};
  std::atomic<std::int64_t> last_end_ns{0};

  auto worker = [&](std::uint32_t job, std::uint32_t slot_in_job) {
    const auto me = std::size_t{job} * qd + slot_in_job;
    // Default 50us timer slack would inflate injected sleeps.
    ::prctl(PR_SET_TIMERSLACK, 1UL);
    try {
      std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ull + me);
      std::uniform_int_distribution<std::uint64_t> pick(0, target->slots - 1);
      std::bernoulli_distribution coin(0.5);
      auto buf = aligned_buffer(bs);
      std::span<std::byte> data(buf.get(), bs);
      for (auto& b : data) b = static_cast<std::byte>(rng());
      auto& lat = latencies[me];
      lat.reserve(1 << 16);
      ready.arrive_and_wait();
      const auto t0 = std::chrono::steady_clock::time_point(std::chrono::nanoseconds(start_ns.load()));
      const auto stop = config.runtime_s > 0
                            ? t0 + std::chrono::duration_cast<std::chrono::nanoseconds>(
                                       std::chrono::duration<double>(config.runtime_s))
                            : std::chrono::steady_clock::time_point::max();
      while (true) {
        auto now = std::chrono::steady_clock::now();
        if (now >= stop) break;
        if (issued.fetch_add(1) >= max_ops) break;
        std::uint64_t slot;
        if (config.pattern == AccessPattern::kSeq) {
          slot = std::uint64_t{job} * stripe + cursors[job].fetch_add(1) % stripe;
        } else {
          slot = pick(rng);
        }
        bool read = config.rw == RwMode::kRead || (config.rw == RwMode::kMix50 && coin(rng));
        if (read) {
          target->read(slot, data);
        } else {
          target->write(slot, data);
        }
        auto end = std::chrono::steady_clock::now();
        lat.push_back(static_cast<std::uint64_t>((end - now).count()));
        auto end_ns = end.time_since_epoch().count();
        auto prev = last_end_ns.load();
        while (prev < end_ns && !last_end_ns.compare_exchange_weak(prev, end_ns)) {
        }
      }
    } catch (...) {
      errors[me] = std::current_exception();
    }
  };

  std::vector<std::thread> threads;
  for (std::uint32_t j = 0; j < jobs; ++j) {
    for (std::uint32_t q = 0; q < qd; ++q) threads.emplace_back(worker, j, q);
  }
  start_ns = std::chrono::steady_clock::now().time_since_epoch().count();
  last_end_ns = start_ns.load();
  ready.arrive_and_wait();
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<std::uint64_t> all;
  for (auto& l : latencies) all.insert(all.end(), l.begin(), l.end());
  DevbenchRow row;
  row.pattern = config.pattern;
  row.rw = config.rw;
  row.bs = bs;
  row.jobs = jobs;
  row.qd = qd;
  row.direct = target->direct;
  row.ops = all.size();
  row.bytes = row.ops * bs;
  row.elapsed_s = std::max(1e-9, static_cast<double>(last_end_ns - start_ns) * 1e-9);
  row.mib_per_s = static_cast<double>(row.bytes) / (1024.0 * 1024.0) / row.elapsed_s;
  row.iops = static_cast<double>(row.ops) / row.elapsed_s;
  if (!all.empty()) {
    long double sum = 0;
    for (auto v : all) sum += v;
    row.mean_lat_us = static_cast<double>(sum / all.size()) / 1000.0;
    auto k = std::min(all.size() - 1, static_cast<std::size_t>(0.99 * all.size()));
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    row.p99_lat_us = static_cast<double>(all[k]) / 1000.0;
  }
  return row;
}

// ---- scaling rows -------------------------------------------------------------

std::string_view to_string(ScalingMode m) { return m == ScalingMode::kStrong ? "strong" : "weak"; }

ScalingMode parse_scaling_mode(std::string_view text) {
  if (text == "strong") return ScalingMode::kStrong;
  if (text == "weak") return ScalingMode::kWeak;
  throw_usage("mode must be strong or weak, got '" + std::string(text) + "'");
}

// ---- CSV ------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  while (true) {
    auto comma = line.find(',');
    out.push_back(line.substr(0, comma));
    if (comma == std::string_view::npos) return out;
    line = line.substr(comma + 1);
  }
}

template <typename T>
T parse_number(std::string_view text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error(ErrorKind::kConfig, "bad number '" + std::string(text) + "' in CSV");
  }
  return v;
}

std::vector<std::string_view> csv_lines(std::string_view text, std::string_view header) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
  }
  if (lines.empty() || lines.front() != header) {
    throw Error(ErrorKind::kConfig, "CSV header differs from '" + std::string(header) + "'");
  }
  lines.erase(lines.begin());
  return lines;
}

}  // namespace

std::string devbench_csv(const std::vector<DevbenchRow>& rows) {
  std::string out(kDevbenchHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::string(to_string(r.pattern)) + ',' + std::string(to_string(r.rw)) + ',' +
           std::to_string(r.bs) + ',' + std::to_string(r.jobs) + ',' + std::to_string(r.qd) + ',' +
           (r.direct ? "1" : "0") + ',' + format_double(r.mib_per_s) + ',' +
           format_double(r.iops) + ',' + format_double(r.mean_lat_us) + ',' +
           format_double(r.p99_lat_us) + '\n';
  }
  return out;
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::string out(kScalingHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::string(to_string(r.mode)) + ',' + r.role + ',' + std::to_string(r.clients) + ',' +
           std::to_string(r.servers) + ',' +
           (r.timestep ? std::to_string(*r.timestep) : std::string("mean")) + ',' +
           std::to_string(r.bytes) + ',' + format_double(r.response_time_s) + ',' +
           (r.passed ? "PASSED" : "FAILED") + '\n';
  }
  return out;
}

std::vector<DevbenchRow> parse_devbench_csv(std::string_view text) {
  std::vector<DevbenchRow> rows;
  for (auto line : csv_lines(text, kDevbenchHeader)) {
    auto f = split_fields(line);
    if (f.size() != 10) throw Error(ErrorKind::kConfig, "devbench row needs 10 fields");
    DevbenchRow r;
    r.pattern = parse_access_pattern(f[0]);
    r.rw = parse_rw_mode(f[1]);
    r.bs = parse_number<std::uint64_t>(f[2]);
    r.jobs = parse_number<std::uint32_t>(f[3]);
    r.qd = parse_number<std::uint32_t>(f[4]);
    r.direct = parse_number<int>(f[5]) != 0;
    r.mib_per_s = parse_number<double>(f[6]);
    r.iops = parse_number<double>(f[7]);
    r.mean_lat_us = parse_number<double>(f[8]);
    r.p99_lat_us = parse_number<double>(f[9]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<ScalingRow> parse_scaling_csv(std::string_view text) {
  std::vector<ScalingRow> rows;
  for (auto line : csv_lines(text, kScalingHeader)) {
    auto f = split_fields(line);
    if (f.size() != 8) throw Error(ErrorKind::kConfig, "scaling row needs 8 fields");
    ScalingRow r;
    r.mode = parse_scaling_mode(f[0]);
    r.role = std::string(f[1]);
    r.clients = parse_number<std::uint32_t>(f[2]);
    r.servers = parse_number<std::uint32_t>(f[3]);
    if (f[4] != "mean") r.timestep = parse_number<std::uint32_t>(f[4]);
    r.bytes = parse_number<std::uint64_t>(f[5]);
    r.response_time_s = parse_number<double>(f[6]);
    if (f[7] != "PASSED" && f[7] != "FAILED") {
      throw Error(ErrorKind::kConfig, "status must be PASSED or FAILED");
    }
    r.passed = f[7] == "PASSED";
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace stagespace
