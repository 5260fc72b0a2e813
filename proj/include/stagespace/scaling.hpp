#pragma once

// Strong/weak scaling driver. Spawns staging servers and writer/reader
// client processes, synchronizes them with a barrier it hosts, and turns
// the clients' timings into report rows.
//
// Each timestep: barrier, writers put their slab of version t, barrier,
// readers get a differently shaped slab of version t and verify it against
// the seeded pattern. Writers split the domain along the first dimension,
// readers along the last.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stagespace/bench.hpp"
#include "stagespace/directory.hpp"
#include "stagespace/geometry.hpp"
#include "stagespace/net.hpp"
#include "stagespace/tier.hpp"

namespace stagespace {

struct ScalingConfig {
  ScalingMode mode = ScalingMode::kStrong;
  std::uint32_t writers = 64;
  std::uint32_t readers = 64;
  std::uint32_t servers = 4;
  std::uint32_t timesteps = 10;
  /// Strong: total bytes per timestep. Weak: bytes per client.
  std::uint64_t bytes = 64ull << 20;
  std::uint32_t element_size = 8;
  TierConfig tier;
  std::string var = "field";
  std::uint32_t timeout_ms = 60000;
  std::uint32_t server_workers = 0;  // 0 = server default
  std::uint32_t max_versions = 2;
  /// The stagespace executable used to spawn servers and clients.
  std::filesystem::path executable;
  /// Scratch directory for configs, logs and client results; a fresh
  /// temporary directory (removed afterwards) when empty.
  std::filesystem::path work_dir;

  void validate() const;
};

struct ScalingLayout {
  NDBox global;
  NDBox read_domain;  // strong: global; weak: the leading readers/writers share
  std::vector<NDBox> write_parts;
  std::vector<NDBox> read_parts;
  DistGrid grid;
  std::uint64_t write_bytes = 0;  // per timestep, all writers
  std::uint64_t read_bytes = 0;   // per timestep, all readers
};

/// Chooses near-cubic global extents whose first extent is a multiple of the
/// writer count and last extent a multiple of the reader count.
ScalingLayout plan_layout(const ScalingConfig& config);

struct ScalingResult {
  std::vector<ScalingRow> rows;  // per timestep and role, then the two mean rows
  bool passed = false;
  std::string failure;  // first failure, empty if passed
};

ScalingResult run_scaling(const ScalingConfig& config);

/// Settings a client process reads from the run file the driver writes.
std::string format_run_config(const ScalingConfig& config, const std::vector<Endpoint>& servers,
                              const Endpoint& barrier);

/// Entry point of one spawned client process. Writes one line per timestep
/// ("t start_ns end_ns ok|fail message") to `results`. Returns an exit code.
int run_scaling_client(const std::filesystem::path& run_file, const std::string& role,
                       std::uint32_t index, const std::filesystem::path& results);

}  // namespace stagespace
