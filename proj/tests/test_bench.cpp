#include <doctest.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <random>

#include "cluster_fixture.hpp"
#include "stagespace/bench.hpp"
#include "stagespace/scaling.hpp"

using namespace stagespace;
using namespace stagespace::testing;

TEST_CASE("pattern matches frozen reference words") {
  // Reference values from an independent script: FNV-1a name hash, murmur3
  // finalizer mixing of (version, word) and the golden-ratio-scaled index.
  const auto h = var_hash("field");
  CHECK(h == 0x2c5d047ff4e6ffc7ull);
  CHECK(pattern_word(h, 0, 0, 0) == 0x1f34f4d626267e5aull);
  CHECK(pattern_word(h, 1, 0, 0) == 0x9d10d5a65fed3a19ull);
  CHECK(pattern_word(h, 0, 1, 0) == 0x151834803d8457e0ull);
  CHECK(pattern_word(h, 0, 0, 1) == 0xa68788a3b6db84d2ull);
  CHECK(pattern_word(h, 9, 123456789, 2) == 0xb8f5c7cda38f7cd9ull);

  // A 12-byte element takes one full word and the low half of the next.
  NDBox global({0}, {10});
  RegionBuffer one(NDBox({5}, {6}), 12);
  fill_pattern(one.mutable_view(), global, "rho", 3);
  const unsigned char expect[12] = {0x3b, 0x80, 0xda, 0xe7, 0x74, 0x14,
                                    0x4f, 0xd0, 0xc6, 0xf3, 0xdf, 0x99};
  CHECK(std::memcmp(one.bytes().data(), expect, 12) == 0);
}

TEST_CASE("sub-box fills equal slices of a full fill") {
  NDBox global({0, 0, 0}, {6, 5, 7});
  for (std::uint32_t es : {1u, 4u, 8u, 20u}) {
    RegionBuffer full(global, es);
    fill_pattern(full.mutable_view(), global, "v", 2);
    std::mt19937_64 rng(es);
    for (int i = 0; i < 50; ++i) {
      std::array<Coord, 3> lo{}, hi{};
      for (int d = 0; d < 3; ++d) {
        lo[d] = rng() % global.extent(d);
        hi[d] = lo[d] + 1 + rng() % (global.extent(d) - lo[d]);
      }
      NDBox sub(lo, hi);
      RegionBuffer part(sub, es), expect(sub, es);
      fill_pattern(part.mutable_view(), global, "v", 2);
      copy_region(full.view(), expect.mutable_view(), sub);
      REQUIRE(std::ranges::equal(part.bytes(), expect.bytes()));
      REQUIRE_FALSE(verify_pattern(part.view(), global, "v", 2).has_value());
    }
  }
}

TEST_CASE("verify_pattern reports the first bad element") {
  NDBox global({0, 0}, {8, 8});
  NDBox sub({2, 3}, {6, 8});
  RegionBuffer buf(sub, 8);
  fill_pattern(buf.mutable_view(), global, "f", 1);
  CHECK_FALSE(verify_pattern(buf.view(), global, "f", 1).has_value());

  auto wrong_version = verify_pattern(buf.view(), global, "f", 2);
  REQUIRE(wrong_version);
  CHECK(wrong_version->coordinate == std::vector<Coord>{2, 3});
  CHECK(verify_pattern(buf.view(), global, "g", 1).has_value());

  // Element (4, 5) sits at row 2, column 2 of the sub-box.
  auto bytes = std::vector<std::byte>(buf.bytes().begin(), buf.bytes().end());
  bytes[(2 * 5 + 2) * 8 + 3] ^= std::byte{1};
  RegionBuffer bad(sub, 8, bytes);
  auto m = verify_pattern(bad.view(), global, "f", 1);
  REQUIRE(m);
  CHECK(m->coordinate == std::vector<Coord>{4, 5});
  CHECK(m->to_string() == "(4,5)");

  // Shifted data (right bytes, wrong place) is detected.
  RegionBuffer shifted(NDBox({2, 3}, {6, 8}), 8);
  RegionBuffer source(NDBox({3, 3}, {7, 8}), 8);
  fill_pattern(source.mutable_view(), global, "f", 1);
  std::memcpy(shifted.mutable_view().bytes.data(), source.bytes().data(), source.bytes().size());
  CHECK(verify_pattern(shifted.view(), global, "f", 1).has_value());
}

TEST_CASE("CSV headers, empty reports and round trips") {
  CHECK(devbench_csv({}) == std::string(kDevbenchHeader) + "\n");
  CHECK(scaling_csv({}) == std::string(kScalingHeader) + "\n");
  CHECK(parse_devbench_csv(devbench_csv({})).empty());

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> real(0, 1e6);
  std::vector<DevbenchRow> drows;
  for (int i = 0; i < 100; ++i) {
    DevbenchRow r;
    r.pattern = i % 2 ? AccessPattern::kRand : AccessPattern::kSeq;
    r.rw = static_cast<RwMode>(i % 3);
    r.bs = 512ull << (rng() % 12);
    r.jobs = 1 + rng() % 64;
    r.qd = 1 + rng() % 8;
    r.direct = rng() % 2;
    r.mib_per_s = real(rng);
    r.iops = real(rng);
    r.mean_lat_us = real(rng) / 3;
    r.p99_lat_us = std::ldexp(real(rng), -40);
    drows.push_back(r);
  }
  auto dcsv = devbench_csv(drows);
  CHECK(dcsv.starts_with(std::string(kDevbenchHeader) + "\n"));
  auto dback = parse_devbench_csv(dcsv);
  REQUIRE(dback.size() == drows.size());
  for (std::size_t i = 0; i < drows.size(); ++i) CHECK(dback[i].same_columns(drows[i]));
  CHECK(devbench_csv(dback) == dcsv);

  std::vector<ScalingRow> srows;
  for (std::uint32_t t = 0; t < 10; ++t) {
    srows.push_back({ScalingMode::kStrong, "write", 64, 4, t, 64ull << 20, real(rng), true});
  }
  srows.push_back({ScalingMode::kWeak, "read", 8, 2, std::nullopt, 4 << 20, 0.125, false});
  auto scsv = scaling_csv(srows);
  CHECK(parse_scaling_csv(scsv) == srows);
  CHECK(scaling_csv(parse_scaling_csv(scsv)) == scsv);
  CHECK(scsv.find("weak,read,8,2,mean,4194304,0.125,FAILED") != std::string::npos);
  CHECK(scsv.find("strong,write,64,4,0,67108864,") != std::string::npos);

  TempDir dir;
  auto path = dir.path / "r.csv";
  write_text_file(path, scsv);
  write_text_file(path, scsv);
  CHECK(read_text_file(path) == scsv);

  CHECK_THROWS_AS(parse_scaling_csv("nope\n"), Error);
  CHECK_THROWS_AS(parse_devbench_csv(std::string(kDevbenchHeader) + "\nseq,read,1\n"), Error);
}

TEST_CASE("format_double is shortest and exact") {
  CHECK(format_double(0.125) == "0.125");
  CHECK(format_double(3) == "3");
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10000; ++i) {
    double v;
    auto bits = rng();
    std::memcpy(&v, &bits, 8);
    if (!std::isfinite(v)) continue;
    auto text = format_double(v);
    double back = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), back);
    REQUIRE(ec == std::errc());
    REQUIRE(ptr == text.data() + text.size());
    REQUIRE(back == v);
  }
}

TEST_CASE("devbench accounting on a heap tier") {
  for (auto rw : {RwMode::kRead, RwMode::kWrite, RwMode::kMix50}) {
    for (auto pattern : {AccessPattern::kSeq, AccessPattern::kRand}) {
      DevbenchConfig c;
      c.target = "heap:64m";
      c.rw = rw;
      c.pattern = pattern;
      c.transfer_size = 64 << 10;
      c.jobs = 3;
      c.queue_depth = 2;
      c.runtime_s = 0;
      c.total_bytes = c.transfer_size * 500;
      auto r = run_devbench(c);
      CHECK(r.ops == 500);
      CHECK(r.bytes == r.ops * c.transfer_size);
      CHECK(r.mib_per_s > 0);
      CHECK(std::abs(r.mib_per_s - r.bytes / 1048576.0 / r.elapsed_s) <= 1e-6 * r.mib_per_s);
      CHECK(std::abs(r.iops - r.ops / r.elapsed_s) <= 1e-6 * r.iops);
      CHECK(r.p99_lat_us > 0);
      CHECK(r.mean_lat_us > 0);
      CHECK(r.jobs == 3);
      CHECK(r.qd == 2);
    }
  }
}

TEST_CASE("devbench on a raw file") {
  TempDir dir;
  DevbenchConfig c;
  c.target = (dir.path / "dev.bin").string();
  c.file_size = 8 << 20;
  c.transfer_size = 4096;
  c.jobs = 2;
  c.runtime_s = 0.3;
  for (auto rw : {RwMode::kWrite, RwMode::kRead, RwMode::kMix50}) {
    c.rw = rw;
    c.pattern = rw == RwMode::kRead ? AccessPattern::kRand : AccessPattern::kSeq;
    auto r = run_devbench(c);
    CHECK(r.ops > 0);
    CHECK(r.bytes == r.ops * c.transfer_size);
    CHECK(r.mib_per_s > 0);
    CHECK(r.elapsed_s < 2.0);
  }
  c.direct = false;
  CHECK_FALSE(run_devbench(c).direct);

  c.transfer_size = 16 << 20;  // larger than the file
  CHECK_THROWS_AS(run_devbench(c), Error);
  c.transfer_size = 256;
  CHECK_THROWS_AS(run_devbench(c), Error);
  c.transfer_size = 4096;
  c.runtime_s = 0;
  c.total_bytes = 0;
  CHECK_THROWS_AS(run_devbench(c), Error);
}

TEST_CASE("devbench rows are deterministic apart from timing") {
  DevbenchConfig c;
  c.target = "heap:16m";
  c.pattern = AccessPattern::kRand;
  c.rw = RwMode::kMix50;
  c.runtime_s = 0;
  c.total_bytes = 4096 * 200;
  auto a = run_devbench(c), b = run_devbench(c);
  CHECK(a.ops == b.ops);
  CHECK(a.bytes == b.bytes);
  CHECK(a.pattern == b.pattern);
  CHECK(a.rw == b.rw);
  CHECK(a.bs == b.bs);
  CHECK(a.direct == b.direct);
}

TEST_CASE("latency-bound throughput on a delayed tier") {
  DevbenchConfig c;
  c.target = "delayed:1000,0:heap:64m";
  c.transfer_size = 4096;
  c.runtime_s = 1.0;
  c.rw = RwMode::kWrite;
  c.jobs = 1;
  auto one = run_devbench(c);
  CHECK(one.iops <= 1000);
  CHECK(one.iops >= 700);
  CHECK(one.mean_lat_us >= 1000);
  c.jobs = 8;
  auto eight = run_devbench(c);
  CHECK(eight.iops >= 0.8 * 8 * one.iops);
  CHECK(eight.iops <= 1.2 * 8 * one.iops);
  CHECK(eight.iops <= 8000);
}

TEST_CASE("scaling layouts") {
  ScalingConfig c;
  c.writers = 64;
  c.readers = 64;
  c.bytes = 64ull << 20;
  auto l = plan_layout(c);
  CHECK(volume(l.global) == 8ull << 20);
  CHECK(l.global.extent(0) % 64 == 0);
  CHECK(l.global.extent(2) % 64 == 0);
  CHECK(l.write_parts.size() == 64);
  CHECK(l.read_parts.size() == 64);
  CHECK(l.write_bytes == 64ull << 20);
  CHECK(l.read_bytes == 64ull << 20);
  for (const auto& p : l.write_parts) CHECK(volume(p) * 8 == 1 << 20);
  for (const auto& p : l.read_parts) CHECK(volume(p) * 8 == 1 << 20);
  CHECK(covers(l.global, l.write_parts));
  CHECK(covers(l.global, l.read_parts));
  // Readers cut the domain differently from writers.
  CHECK(l.write_parts[0] != l.read_parts[0]);

  for (std::uint32_t clients : {1u, 2u, 4u, 8u, 16u, 32u, 64u}) {
    ScalingConfig w;
    w.mode = ScalingMode::kWeak;
    w.writers = clients;
    w.readers = clients;
    w.bytes = 512 << 10;
    auto wl = plan_layout(w);
    CHECK(wl.write_bytes == std::uint64_t(clients) * (512 << 10));
    CHECK(wl.read_bytes == wl.write_bytes);
    for (const auto& p : wl.read_parts) CHECK(volume(p) * 8 == 512 << 10);
  }

  ScalingConfig fewer;
  fewer.mode = ScalingMode::kWeak;
  fewer.writers = 4;
  fewer.readers = 2;
  fewer.bytes = 512 << 10;
  auto fl = plan_layout(fewer);
  CHECK(fl.read_bytes * 2 == fl.write_bytes);
  CHECK(contains(fl.global, fl.read_domain));

  fewer.readers = 8;
  CHECK_THROWS_AS(plan_layout(fewer), Error);
  c.bytes = (64ull << 20) + 8;
  CHECK_THROWS_AS(plan_layout(c), Error);
}

TEST_CASE("small scaling runs through spawned processes") {
  for (auto mode : {ScalingMode::kStrong, ScalingMode::kWeak}) {
    ScalingConfig c;
    c.mode = mode;
    c.writers = 4;
    c.readers = mode == ScalingMode::kStrong ? 3 : 2;
    c.servers = 2;
    c.timesteps = 3;
    c.bytes = mode == ScalingMode::kStrong ? 3 * 4 * 8 * 1024 : 64 << 10;
    c.timeout_ms = 20000;
    c.executable = STAGESPACE_EXE;
    auto result = run_scaling(c);
    INFO(result.failure);
    CHECK(result.passed);
    REQUIRE(result.rows.size() == 2 * 3 + 2);
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
      const auto& r = result.rows[i];
      CHECK(r.passed);
      CHECK(r.response_time_s > 0);
      CHECK(r.servers == 2);
      CHECK(r.mode == mode);
    }
    CHECK(result.rows[0].role == "write");
    CHECK(result.rows[3].role == "read");
    CHECK_FALSE(result.rows[6].timestep.has_value());
    CHECK(result.rows[6].role == "write");
    CHECK(result.rows[7].role == "read");
    double mean = 0;
    for (int t = 0; t < 3; ++t) mean += result.rows[t].response_time_s / 3;
    CHECK(std::abs(result.rows[6].response_time_s - mean) <= 1e-9 * mean);
  }
}

TEST_CASE("scaling reports failure instead of throwing") {
  ScalingConfig c;
  c.writers = 2;
  c.readers = 2;
  c.servers = 1;
  c.timesteps = 1;
  c.bytes = 64 << 10;
  c.executable = "/nonexistent/stagespace";
  CHECK_THROWS_AS(run_scaling(c), Error);

  // Servers that exit at once make the run fail.
  c.executable = "/bin/false";
  auto result = run_scaling(c);
  CHECK_FALSE(result.passed);
  CHECK_FALSE(result.failure.empty());
}
