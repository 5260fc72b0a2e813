#include <doctest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "stagespace/directory.hpp"
#include "stagespace/error.hpp"

using namespace stagespace;

namespace {

NDBox random_box_in(std::mt19937_64& rng, const NDBox& domain) {
  std::array<Coord, 3> lo{}, hi{};
  const auto n = domain.ndims();
  for (std::size_t d = 0; d < n; ++d) {
    lo[d] = domain.lower(d) + rng() % domain.extent(d);
    hi[d] = lo[d] + 1 + rng() % std::min<Coord>(8, domain.upper(d) - lo[d]);
  }
  return NDBox(std::span<const Coord>(lo.data(), n), std::span<const Coord>(hi.data(), n));
}

ObjectDescriptor desc(std::string var, std::uint32_t version, NDBox box, std::uint64_t gen = 0,
                      std::uint32_t es = 8) {
  return ObjectDescriptor{std::move(var), version, box, es, 0, ChunkHandle{0, volume(box) * es, gen}};
}

DistGrid grid16(std::uint32_t servers = 4) {
  return DistGrid{NDBox({0, 0, 0}, {16, 16, 16}), {4, 4, 4}, servers};
}

}  // namespace

TEST_CASE("shard_owner examples") {
  auto g = grid16(1);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<std::uint64_t> c{rng() % 4, rng() % 4, rng() % 4};
    CHECK(shard_owner(g, "field", c) == 0);
  }
  auto g4 = grid16(4);
  std::vector<std::uint64_t> c{1, 2, 3};
  CHECK(shard_owner(g4, "field", c) == shard_owner(g4, "field", c));
  std::vector<std::uint64_t> bad{4, 0, 0};
  CHECK_THROWS_AS(shard_owner(g4, "field", bad), Error);
  std::vector<std::uint64_t> short_coords{0, 0};
  CHECK_THROWS_AS(shard_owner(g4, "field", short_coords), Error);
}

TEST_CASE("shard_owner matches frozen reference values") {
  // Reference owners computed by an independent script implementing 64-bit
  // FNV-1a over the name and little-endian coordinates, then the murmur3
  // 64-bit finalizer, mod the server count.
  DistGrid line{NDBox({0}, {16}), {1}, 4};
  const std::uint32_t expect_line[16] = {3, 0, 3, 3, 3, 2, 2, 0, 2, 2, 2, 3, 0, 0, 2, 2};
  for (std::uint64_t i = 0; i < 16; ++i) {
    std::vector<std::uint64_t> c{i};
    CHECK(shard_owner(line, "field", c) == expect_line[i]);
  }
  DistGrid slab{NDBox({0, 0, 0}, {8, 1, 1}), {1, 1, 1}, 4};
  const std::uint32_t expect_slab[8] = {1, 1, 3, 1, 0, 3, 2, 0};
  for (std::uint64_t i = 0; i < 8; ++i) {
    std::vector<std::uint64_t> c{i, 0, 0};
    CHECK(shard_owner(slab, "field", c) == expect_slab[i]);
  }
}

TEST_CASE("shard balance over 4096 blocks and 4 servers") {
  DistGrid g{NDBox({0, 0, 0}, {16, 16, 16}), {1, 1, 1}, 4};
  for (const char* var : {"field", "pressure"}) {
    std::vector<int> hist(4);
    for (std::uint64_t i = 0; i < 16; ++i)
      for (std::uint64_t j = 0; j < 16; ++j)
        for (std::uint64_t k = 0; k < 16; ++k) {
          std::vector<std::uint64_t> c{i, j, k};
          ++hist[shard_owner(g, var, c)];
        }
    for (int n : hist) {
      CHECK(n >= 922);
      CHECK(n <= 1126);
    }
    if (std::string(var) == "field") CHECK(hist == std::vector<int>{1048, 1026, 995, 1027});
    if (std::string(var) == "pressure") CHECK(hist == std::vector<int>{1027, 1039, 989, 1041});
  }
}

TEST_CASE("default grid splits the leading dimension") {
  auto g = DistGrid::make_default(NDBox({0, 0, 0}, {64, 64, 64}), 4);
  CHECK(g.block_extent == std::vector<Coord>{4, 64, 64});
  CHECK(g.block_count() == 16);
  auto g3 = DistGrid::make_default(NDBox({0, 0}, {1024, 8}), 3);
  CHECK(g3.block_extent == std::vector<Coord>{64, 8});
  auto g1 = DistGrid::make_default(NDBox({0}, {2}), 8);
  CHECK(g1.block_extent == std::vector<Coord>{1});
  CHECK_THROWS_AS(DistGrid::make_default(NDBox({0}, {2}), 0), Error);
  DistGrid ragged{NDBox({0}, {10}), {3}, 1};
  CHECK_THROWS_AS(ragged.validate(), Error);
}

TEST_CASE("blocks_of examples") {
  auto g = grid16();
  auto one = blocks_of(g, NDBox({4, 4, 4}, {8, 8, 8}));
  CHECK(one == std::vector<BlockCoords>{{1, 1, 1}});
  auto four = blocks_of(g, NDBox({3, 3, 0}, {5, 5, 4}));
  CHECK(four == std::vector<BlockCoords>{{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}});
  CHECK_THROWS_AS(blocks_of(g, NDBox({0, 0, 0}, {17, 1, 1})), Error);
}

TEST_CASE("blocks_of matches a scan over all blocks") {
  DistGrid g{NDBox({5, 0, 2}, {21, 12, 10}), {4, 3, 2}, 3};
  std::mt19937_64 rng(2);
  for (int i = 0; i < 5000; ++i) {
    auto box = random_box_in(rng, g.global_box);
    std::vector<BlockCoords> expect;
    for (std::uint64_t a = 0; a < g.blocks_along(0); ++a)
      for (std::uint64_t b = 0; b < g.blocks_along(1); ++b)
        for (std::uint64_t c = 0; c < g.blocks_along(2); ++c) {
          BlockCoords bc{a, b, c};
          if (intersect(g.block_box(bc), box)) expect.push_back(bc);
        }
    REQUIRE(blocks_of(g, box) == expect);
  }
}

TEST_CASE("register and query examples") {
  Directory dir(grid16());
  NDBox b({0, 0, 0}, {4, 4, 4});
  dir.register_object(desc("a", 1, b, 1));
  CHECK(dir.query("a", 1, b).size() == 1);
  CHECK(dir.query("zz", 1, b).empty());
  CHECK(dir.query("a", 0, b).empty());

  auto out = dir.register_object(desc("a", 1, b, 2));
  REQUIRE(out.replaced.has_value());
  CHECK(out.replaced->handle.generation == 1);
  auto q = dir.query("a", 1, b);
  REQUIRE(q.size() == 1);
  CHECK(q[0].handle.generation == 2);

  auto same = dir.register_object(desc("a", 1, b, 2));
  CHECK_FALSE(same.changed);
  CHECK(dir.size() == 1);

  CHECK_THROWS_AS(dir.register_object(desc("a", 1, NDBox({4, 0, 0}, {8, 4, 4}), 3, 4)), Error);
  CHECK(dir.element_size_of("a", 1) == 8u);
  CHECK_FALSE(dir.element_size_of("a", 7).has_value());

  CHECK(dir.remove("a", 1, b).has_value());
  CHECK(dir.size() == 0);
  CHECK_FALSE(dir.remove("a", 1, b).has_value());
}

TEST_CASE("coverage examples") {
  Directory dir(grid16());
  dir.register_object(desc("f", 0, NDBox({0, 0, 0}, {8, 16, 16})));
  CHECK(dir.is_covered("f", 0, NDBox({0, 0, 0}, {8, 16, 16})));
  CHECK(dir.is_covered("f", 0, NDBox({2, 3, 4}, {5, 6, 7})));
  CHECK_FALSE(dir.is_covered("f", 0, NDBox({0, 0, 0}, {16, 16, 16})));
  CHECK_FALSE(dir.is_covered("f", 1, NDBox({0, 0, 0}, {1, 1, 1})));
  dir.register_object(desc("f", 0, NDBox({8, 0, 0}, {16, 16, 16})));
  CHECK(dir.is_covered("f", 0, NDBox({0, 0, 0}, {16, 16, 16})));
}

TEST_CASE("version ring evicts the oldest versions") {
  Directory dir(grid16(), 3);
  NDBox b({0, 0, 0}, {4, 4, 4});
  std::vector<std::uint32_t> evicted;
  for (std::uint32_t v = 0; v < 6; ++v) {
    auto out = dir.register_object(desc("a", v, b, v));
    for (const auto& e : out.evicted) evicted.push_back(e.version);
    dir.register_object(desc("other", 0, b, 100 + v));
  }
  CHECK(evicted == std::vector<std::uint32_t>{0, 1, 2});
  for (std::uint32_t v = 0; v < 3; ++v) CHECK(dir.query("a", v, b).empty());
  for (std::uint32_t v = 3; v < 6; ++v) CHECK(dir.query("a", v, b).size() == 1);
  CHECK(dir.query("other", 0, b).size() == 1);
}

TEST_CASE("query matches a linear scan over 10k registrations") {
  auto g = grid16();
  Directory dir(g, 1000);
  std::vector<ObjectDescriptor> oracle;  // registration order, replaced entries removed
  std::mt19937_64 rng(3);
  const char* vars[] = {"a", "b", "c"};
  for (int i = 0; i < 10000; ++i) {
    // Small boxes from a coarse lattice so identical keys recur.
    std::array<Coord, 3> lo{}, hi{};
    for (int d = 0; d < 3; ++d) {
      lo[d] = 2 * (rng() % 7);
      hi[d] = lo[d] + 2 * (1 + rng() % 2);
    }
    auto d = desc(vars[rng() % 3], static_cast<std::uint32_t>(rng() % 4), NDBox(lo, hi),
                  rng() % 3);
    auto same_key = [&](const ObjectDescriptor& o) {
      return o.var == d.var && o.version == d.version && o.box == d.box;
    };
    auto it = std::find_if(oracle.begin(), oracle.end(), same_key);
    bool identical = it != oracle.end() && *it == d;
    auto out = dir.register_object(d);
    REQUIRE(out.changed == !identical);
    REQUIRE(out.replaced.has_value() == (it != oracle.end() && !identical));
    if (!identical) {
      if (it != oracle.end()) oracle.erase(it);
      oracle.push_back(d);
    }

    if (i % 10 == 0) {
      auto qbox = random_box_in(rng, g.global_box);
      auto var = vars[rng() % 3];
      auto ver = static_cast<std::uint32_t>(rng() % 4);
      std::vector<ObjectDescriptor> expect;
      for (const auto& o : oracle) {
        if (o.var == var && o.version == ver && intersect(o.box, qbox)) expect.push_back(o);
      }
      auto got = dir.query(var, ver, qbox);
      REQUIRE(got == expect);
      for (const auto& o : got) REQUIRE(intersect(o.box, qbox));
    }
  }
  REQUIRE(dir.size() == oracle.size());
  auto snap = dir.snapshot();
  REQUIRE(snap.size() == oracle.size());
  REQUIRE(std::is_sorted(snap.begin(), snap.end(), [](const auto& x, const auto& y) {
    return std::tie(x.var, x.version, x.box) < std::tie(y.var, y.version, y.box);
  }));
}

TEST_CASE("is_covered matches voxel marking and is monotone") {
  auto g = grid16();
  std::mt19937_64 rng(4);
  for (int round = 0; round < 40; ++round) {
    Directory dir(g);
    std::vector<bool> marked(16 * 16 * 16);
    std::vector<NDBox> probes;
    for (int i = 0; i < 20; ++i) probes.push_back(random_box_in(rng, g.global_box));
    std::vector<bool> was_covered(probes.size());
    for (int put = 0; put < 60; ++put) {
      std::array<Coord, 3> lo{}, hi{};
      for (int d = 0; d < 3; ++d) {
        lo[d] = rng() % 16;
        hi[d] = std::min<Coord>(16, lo[d] + 1 + rng() % 10);
      }
      NDBox b(lo, hi);
      dir.register_object(desc("f", 0, b));
      for (Coord x = lo[0]; x < hi[0]; ++x)
        for (Coord y = lo[1]; y < hi[1]; ++y)
          for (Coord z = lo[2]; z < hi[2]; ++z) marked[(x * 16 + y) * 16 + z] = true;
      for (std::size_t p = 0; p < probes.size(); ++p) {
        const auto& q = probes[p];
        bool expect = true;
        for (Coord x = q.lower(0); x < q.upper(0); ++x)
          for (Coord y = q.lower(1); y < q.upper(1); ++y)
            for (Coord z = q.lower(2); z < q.upper(2); ++z)
              expect = expect && marked[(x * 16 + y) * 16 + z];
        bool got = dir.is_covered("f", 0, q);
        REQUIRE(got == expect);
        if (was_covered[p]) REQUIRE(got);
        was_covered[p] = got;
      }
    }
  }
}
