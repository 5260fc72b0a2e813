// Acceptance run: one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all).

#include <fcntl.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "message_gen.hpp"
#include "stagespace/bench.hpp"
#include "stagespace/client.hpp"
#include "stagespace/config.hpp"
#include "stagespace/directory.hpp"
#include "stagespace/geometry.hpp"
#include "stagespace/scaling.hpp"
#include "stagespace/wire.hpp"

namespace fs = std::filesystem;
namespace ss = stagespace;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

struct ScratchDir {
  fs::path path;
  ScratchDir() {
    char tmpl[] = "/tmp/stagespace-accept-XXXXXX";
    path = ::mkdtemp(tmpl);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

ss::ScalingConfig scaling(std::uint32_t writers, std::uint32_t readers, std::uint32_t servers,
                          std::uint64_t bytes, const std::string& tier) {
  ss::ScalingConfig c;
  c.writers = writers;
  c.readers = readers;
  c.servers = servers;
  c.timesteps = 10;
  c.bytes = bytes;
  c.tier = ss::parse_tier_spec(tier);
  c.executable = STAGESPACE_EXE;
  c.timeout_ms = 120000;
  return c;
}

double mean_write(const ss::ScalingResult& r) {
  for (const auto& row : r.rows) {
    if (!row.timestep && row.role == "write") return row.response_time_s;
  }
  return -1;
}

// ---- 1: end-to-end correctness at 64/64 clients ----------------------------

Outcome criterion1() {
  auto start = Clock::now();
  auto result = ss::run_scaling(scaling(64, 64, 4, 64ull << 20, "heap:1g"));
  const double took = seconds_since(start);
  std::size_t rows_ok = 0;
  for (const auto& r : result.rows) rows_ok += r.passed;
  Outcome o;
  o.pass = result.passed && rows_ok == result.rows.size() && result.rows.size() == 22 && took < 120;
  o.detail = "64w/64r/4s heap 64MB x10: " + std::to_string(rows_ok) + "/" +
             std::to_string(result.rows.size()) + " rows verified, " + fmt(took, 1) + "s";
  if (!result.passed) o.detail += ", first failure: " + result.failure;
  return o;
}

// ---- 2: durability across kill -9 ------------------------------------------

pid_t spawn_server(const fs::path& conf, const fs::path& log) {
  pid_t pid = ::fork();
  if (pid == 0) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd >= 0) {
      ::dup2(fd, 1);
      ::dup2(fd, 2);
    }
    ::execl(STAGESPACE_EXE, STAGESPACE_EXE, "server", "--config", conf.c_str(),
            static_cast<char*>(nullptr));
    ::_exit(127);
  }
  return pid;
}

Outcome criterion2() {
  ScratchDir dir;
  const std::uint32_t servers = 2, writers = 4, timesteps = 3;
  const ss::NDBox global({0, 0, 0}, {64, 64, 256});  // 8 MB of 8-byte elements
  auto grid = ss::DistGrid::make_default(global, servers);
  std::vector<ss::Endpoint> eps;
  for (std::uint32_t i = 0; i < servers; ++i) eps.push_back({"127.0.0.1", ss::pick_free_port()});
  std::vector<fs::path> confs;
  for (std::uint32_t i = 0; i < servers; ++i) {
    ss::ServerConfig c(grid);
    c.server_id = i;
    c.servers = eps;
    c.tier = ss::parse_tier_spec("mmap:" + (dir.path / ("tier." + std::to_string(i))).string() +
                                 ":64m");
    confs.push_back(dir.path / ("server" + std::to_string(i) + ".conf"));
    ss::write_text_file(confs.back(), ss::format_server_config(c));
  }
  auto start_all = [&] {
    std::vector<pid_t> pids;
    for (std::uint32_t i = 0; i < servers; ++i) {
      pids.push_back(spawn_server(confs[i], dir.path / ("server" + std::to_string(i) + ".log")));
    }
    for (const auto& ep : eps) ss::Socket::connect_retry(ep, Clock::now() + std::chrono::seconds(20));
    return pids;
  };
  auto kill_all = [](const std::vector<pid_t>& pids) {
    for (auto p : pids) ::kill(p, SIGKILL);
    for (auto p : pids) ::waitpid(p, nullptr, 0);
  };

  Outcome o;
  auto pids = start_all();
  try {
    {
      ss::StagingSession session(eps, grid);
      const std::vector<std::uint64_t> parts{writers, 1, 1};
      for (std::uint32_t t = 0; t < timesteps; ++t) {
        for (const auto& part : ss::decompose_grid(global, parts)) {
          ss::RegionBuffer buf(part, 8);
          ss::fill_pattern(buf.mutable_view(), global, "field", t);
          session.put("field", t, buf);  // returns after every PUT_ACK
        }
      }
    }
    kill_all(pids);
    pids = start_all();

    ss::StagingSession reader(eps, grid);
    std::size_t verified = 0;
    const std::vector<std::uint64_t> rparts{1, 1, 4};
    for (std::uint32_t t = 0; t < timesteps; ++t) {
      for (const auto& part : ss::decompose_grid(global, rparts)) {
        auto got = reader.get("field", t, part, 0);
        if (auto m = ss::verify_pattern(got.view(), global, "field", t)) {
          kill_all(pids);
          return {false, "mismatch at version " + std::to_string(t) + " " + m->to_string()};
        }
        verified += got.bytes().size();
      }
    }
    o.pass = verified == timesteps * ss::volume(global) * 8;
    o.detail = "mmap tier, 2 servers killed with SIGKILL after all PUT_ACKs and restarted: " +
               std::to_string(verified >> 20) + " MiB over " + std::to_string(timesteps) +
               " versions read back intact";
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  kill_all(pids);
  return o;
}

// ---- 3: tier ordering of mean write response time --------------------------

Outcome criterion3() {
  const std::vector<std::string> tiers{"heap:512m", "delayed:200,1000:heap:512m",
                                       "delayed:400,4000:heap:512m"};
  Outcome o{true, "16w/16r/1s 16MB x10, mean write s (heap < fast < slow):"};
  for (int run = 0; run < 3; ++run) {
    std::vector<double> means;
    for (const auto& tier : tiers) {
      auto result = ss::run_scaling(scaling(16, 16, 1, 16ull << 20, tier));
      if (!result.passed) return {false, tier + " run failed: " + result.failure};
      means.push_back(mean_write(result));
    }
    const bool ordered = means[0] < means[1] && means[1] < means[2];
    o.pass = o.pass && ordered;
    o.detail += " run" + std::to_string(run + 1) + "=" + fmt(means[0], 4) + "<" + fmt(means[1], 4) +
                "<" + fmt(means[2], 4) + (ordered ? "" : "(NOT ORDERED)");
  }
  return o;
}

// ---- 4: more servers lower write response time -----------------------------

Outcome criterion4() {
  std::map<std::uint32_t, double> mean;
  for (std::uint32_t servers : {1u, 4u}) {
    auto result = ss::run_scaling(scaling(64, 64, servers, 64ull << 20, "delayed:400,4000:heap:1g"));
    if (!result.passed) {
      return {false, std::to_string(servers) + "-server run failed: " + result.failure};
    }
    mean[servers] = mean_write(result);
  }
  const double ratio = mean[4] / mean[1];
  return {ratio < 0.9, "64w/64r slow delayed tier, mean write 1 server " + fmt(mean[1], 4) +
                           "s, 4 servers " + fmt(mean[4], 4) + "s, ratio " + fmt(ratio, 3) +
                           " (< 0.9)"};
}

// ---- 5: devbench grid -------------------------------------------------------

Outcome criterion5() {
  ScratchDir dir;
  auto start = Clock::now();
  std::vector<ss::DevbenchRow> rows;
  for (auto pattern : {ss::AccessPattern::kSeq, ss::AccessPattern::kRand}) {
    for (auto rw : {ss::RwMode::kRead, ss::RwMode::kWrite}) {
      for (std::uint64_t bs : {4ull << 10, 64ull << 10, 256ull << 10, 1ull << 20}) {
        for (std::uint32_t jobs : {1u, 2u, 4u, 8u}) {
          ss::DevbenchConfig c;
          c.target = (dir.path / "device.bin").string();
          c.file_size = 256ull << 20;
          c.pattern = pattern;
          c.rw = rw;
          c.transfer_size = bs;
          c.jobs = jobs;
          c.runtime_s = 2.0;
          c.total_bytes = 64ull << 20;
          rows.push_back(ss::run_devbench(c));
        }
      }
    }
  }
  const double took = seconds_since(start);
  std::size_t good = 0;
  for (const auto& r : rows) good += r.bytes == r.ops * r.bs && r.mib_per_s > 0 && r.ops > 0;
  const auto csv = ss::devbench_csv(rows);
  const bool csv_ok = ss::parse_devbench_csv(csv).size() == 64;
  return {rows.size() == 64 && good == 64 && csv_ok && took < 600,
          std::to_string(rows.size()) + " rows, " + std::to_string(good) +
              " with bytes == ops x bs and MiB/s > 0, direct=" +
              std::to_string(rows.front().direct) + ", " + fmt(took, 1) + "s"};
}

// ---- 6: latency-bound throughput -------------------------------------------

Outcome criterion6() {
  ss::DevbenchConfig c;
  c.target = "delayed:1000,0:heap:64m";
  c.transfer_size = 4096;
  c.rw = ss::RwMode::kWrite;
  c.runtime_s = 2.0;
  c.jobs = 1;
  auto one = ss::run_devbench(c);
  c.jobs = 8;
  auto eight = ss::run_devbench(c);
  const bool ok1 = one.iops >= 800 && one.iops <= 1000;
  const bool ok8 = eight.iops >= 6400 && eight.iops <= 8000;
  return {ok1 && ok8, "per-op 1000us qd=1: jobs=1 " + fmt(one.iops, 1) + " iops [800,1000], jobs=8 " +
                          fmt(eight.iops, 1) + " iops [6400,8000]"};
}

// ---- 7: oracle equivalence --------------------------------------------------

using Voxel = std::array<ss::Coord, 3>;

std::set<Voxel> voxels(const ss::NDBox& b) {
  std::set<Voxel> out;
  for (ss::Coord x = b.lower(0); x < b.upper(0); ++x)
    for (ss::Coord y = b.lower(1); y < b.upper(1); ++y)
      for (ss::Coord z = b.lower(2); z < b.upper(2); ++z) out.insert({x, y, z});
  return out;
}

ss::NDBox random_box(std::mt19937_64& rng) {
  Voxel lo{}, hi{};
  for (int d = 0; d < 3; ++d) {
    lo[d] = rng() % 8;
    hi[d] = lo[d] + 1 + rng() % 8;
  }
  return ss::NDBox(lo, hi);
}

Outcome criterion7() {
  std::mt19937_64 rng(2024);
  std::size_t geo_cases = 0, geo_bad = 0;
  for (int i = 0; i < 10000; ++i, ++geo_cases) {
    auto a = random_box(rng), b = random_box(rng);
    auto va = voxels(a), vb = voxels(b);
    std::set<Voxel> both;
    std::set_intersection(va.begin(), va.end(), vb.begin(), vb.end(),
                          std::inserter(both, both.begin()));
    auto ab = ss::intersect(a, b);
    bool ok = ab.has_value() == !both.empty() && (!ab || voxels(*ab) == both);
    ok = ok && ss::volume(a) == va.size();
    ok = ok && ss::contains(a, b) == std::includes(va.begin(), va.end(), vb.begin(), vb.end());
    std::vector<ss::NDBox> pieces{random_box(rng), random_box(rng), b};
    std::set<Voxel> marked;
    for (const auto& p : pieces) {
      auto v = voxels(p);
      marked.insert(v.begin(), v.end());
    }
    ok = ok && ss::covers(a, pieces) == std::includes(marked.begin(), marked.end(), va.begin(), va.end());
    geo_bad += !ok;
  }

  // Directory against a linear scan.
  ss::DistGrid grid{ss::NDBox({0, 0, 0}, {16, 16, 16}), {4, 4, 4}, 4};
  ss::Directory dir(grid, 1000);
  std::vector<ss::ObjectDescriptor> scan;
  std::size_t dir_bad = 0, queries = 0;
  for (int i = 0; i < 10000; ++i) {
    auto box = random_box(rng);
    ss::ObjectDescriptor d{std::string(1, static_cast<char>('a' + rng() % 3)),
                           static_cast<std::uint32_t>(rng() % 4), box, 8, 0,
                           ss::ChunkHandle{0, ss::volume(box) * 8, static_cast<std::uint64_t>(i)}};
    dir.register_object(d);
    auto it = std::find_if(scan.begin(), scan.end(), [&](const auto& o) {
      return o.var == d.var && o.version == d.version && o.box == d.box;
    });
    if (it != scan.end()) scan.erase(it);
    scan.push_back(d);
    if (i % 5 == 0) {
      ++queries;
      auto q = random_box(rng);
      std::string var(1, static_cast<char>('a' + rng() % 3));
      auto version = static_cast<std::uint32_t>(rng() % 4);
      std::vector<ss::ObjectDescriptor> expect;
      for (const auto& o : scan) {
        if (o.var == var && o.version == version && ss::intersect(o.box, q)) expect.push_back(o);
      }
      dir_bad += dir.query(var, version, q) != expect;
    }
  }

  // Shard balance over 4096 blocks.
  ss::DistGrid blocks{ss::NDBox({0, 0, 0}, {16, 16, 16}), {1, 1, 1}, 4};
  std::vector<int> hist(4);
  for (std::uint64_t x = 0; x < 16; ++x)
    for (std::uint64_t y = 0; y < 16; ++y)
      for (std::uint64_t z = 0; z < 16; ++z) {
        std::vector<std::uint64_t> c{x, y, z};
        ++hist[ss::shard_owner(blocks, "field", c)];
      }
  bool balanced = true;
  std::string counts;
  for (int n : hist) {
    balanced = balanced && n >= 922 && n <= 1126;
    counts += (counts.empty() ? "" : "/") + std::to_string(n);
  }

  return {geo_bad == 0 && dir_bad == 0 && dir.size() == scan.size() && balanced,
          "geometry " + std::to_string(geo_cases - geo_bad) + "/" + std::to_string(geo_cases) +
              " exact, directory " + std::to_string(queries - dir_bad) + "/" +
              std::to_string(queries) + " queries over 10000 registrations exact, shard counts " +
              counts + " (1024 +- 10%)"};
}

// ---- 8: protocol round trip -------------------------------------------------

Outcome criterion8() {
  ss::testing::MessageGen gen(88);
  std::size_t sent = 0, matched = 0;
  while (sent < 100000) {
    std::vector<ss::testing::Generated> batch;
    std::vector<std::byte> stream;
    for (int i = 0; i < 100; ++i) {
      batch.push_back(gen.next());
      ss::testing::MessageGen::append(stream, batch.back());
    }
    ss::FrameDecoder dec;
    std::size_t pos = 0, k = 0;
    while (pos < stream.size()) {
      auto n = std::min<std::size_t>(stream.size() - pos, 1 + gen.rng()() % 4096);
      dec.feed(std::span(stream).subspan(pos, n));
      pos += n;
      while (auto f = dec.next()) {
        if (k < batch.size() && ss::testing::MessageGen::matches(*f, batch[k])) ++matched;
        ++k;
      }
    }
    dec.finish();
    sent += batch.size();
  }

  std::size_t corrupt = 0, framing = 0, other = 0;
  std::mt19937_64 rng(8);
  for (int i = 0; i < 2000; ++i, ++corrupt) {
    std::vector<std::byte> stream;
    ss::testing::MessageGen::append(stream, gen.next());
    ss::testing::MessageGen::append(stream, gen.next());
    const bool truncate = i % 2;
    if (truncate) {
      stream.resize(1 + rng() % (stream.size() - 1));
    } else {
      stream[rng() % 4] ^= std::byte{0x20};
    }
    try {
      ss::FrameDecoder dec;
      dec.feed(stream);
      while (dec.next()) {
      }
      dec.finish();
      // A cut exactly on the frame boundary is a valid stream.
      ++framing;
    } catch (const ss::Error& e) {
      if (e.kind() == ss::ErrorKind::kFraming) {
        ++framing;
      } else {
        ++other;
      }
    } catch (...) {
      ++other;
    }
  }
  return {sent == 100000 && matched == sent && framing == corrupt && other == 0,
          std::to_string(matched) + "/" + std::to_string(sent) + " messages round-tripped, " +
              std::to_string(framing) + "/" + std::to_string(corrupt) +
              " truncated or corrupt-magic streams rejected as framing errors"};
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGPIPE, SIG_IGN);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"end-to-end correctness", criterion1}, {"durability after kill -9", criterion2},
      {"tier write ordering", criterion3},    {"server scaling trend", criterion4},
      {"devbench grid", criterion5},          {"latency model", criterion6},
      {"oracle equivalence", criterion7},     {"protocol round trip", criterion8},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first
              << "): " << o.detail << " [" << fmt(seconds_since(start), 1) << "s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
