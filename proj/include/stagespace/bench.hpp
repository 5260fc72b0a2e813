#pragma once

// Device micro-benchmark, seeded verification pattern, and CSV reports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stagespace/geometry.hpp"
#include "stagespace/tier.hpp"

namespace stagespace {

// ---- seeded data pattern --------------------------------------------------

std::uint64_t var_hash(std::string_view var);

/// 64-bit word `word` of the element at row-major index `linear` of the
/// global domain.
std::uint64_t pattern_word(std::uint64_t var_hash, std::uint32_t version, std::uint64_t linear,
                           std::uint64_t word);

/// Fills `dst` with the pattern for its position inside `global`.
void fill_pattern(const MutableRegionView& dst, const NDBox& global, std::string_view var,
                  std::uint32_t version);

struct PatternMismatch {
  std::vector<Coord> coordinate;  // global element coordinate
  std::string to_string() const;
};

/// First element of `src` that differs from the pattern, if any.
std::optional<PatternMismatch> verify_pattern(const ConstRegionView& src, const NDBox& global,
                                              std::string_view var, std::uint32_t version);

// ---- devbench ---------------------------------------------------------------

enum class AccessPattern { kSeq, kRand };
enum class RwMode { kRead, kWrite, kMix50 };

std::string_view to_string(AccessPattern p);
std::string_view to_string(RwMode m);
AccessPattern parse_access_pattern(std::string_view text);
RwMode parse_rw_mode(std::string_view text);

struct DevbenchConfig {
  /// A raw file path, or a tier spec ("heap", "mmap:PATH", "delayed:...").
  std::string target;
  AccessPattern pattern = AccessPattern::kSeq;
  RwMode rw = RwMode::kRead;
  std::uint64_t transfer_size = 4096;
  std::uint32_t jobs = 1;
  std::uint32_t queue_depth = 1;
  double runtime_s = 2.0;         // 0 = unbounded
  std::uint64_t total_bytes = 0;  // 0 = unbounded
  std::uint64_t seed = 1;
  /// Accessed extent of a raw file (created and pre-filled as needed).
  /// Tier targets use up to half their capacity.
  std::uint64_t file_size = 256ull << 20;
  bool direct = true;

  void validate() const;
};

struct DevbenchRow {
  AccessPattern pattern = AccessPattern::kSeq;
  RwMode rw = RwMode::kRead;
  std::uint64_t bs = 0;
  std::uint32_t jobs = 0;
  std::uint32_t qd = 0;
  bool direct = false;
  double mib_per_s = 0;
  double iops = 0;
  double mean_lat_us = 0;
  double p99_lat_us = 0;
  // Not part of the CSV.
  std::uint64_t ops = 0;
  std::uint64_t bytes = 0;
  double elapsed_s = 0;

  /// Equality over the CSV columns.
  bool same_columns(const DevbenchRow& other) const;
};

/// Returns true if the target names a tier rather than a raw file.
bool is_tier_target(std::string_view target);

DevbenchRow run_devbench(const DevbenchConfig& config);

// ---- scaling report rows ------------------------------------------------------

enum class ScalingMode { kStrong, kWeak };
std::string_view to_string(ScalingMode m);
ScalingMode parse_scaling_mode(std::string_view text);

struct ScalingRow {
  ScalingMode mode = ScalingMode::kStrong;
  std::string role;  // "write" or "read"
  std::uint32_t clients = 0;
  std::uint32_t servers = 0;
  std::optional<std::uint32_t> timestep;  // nullopt: mean over timesteps
  std::uint64_t bytes = 0;
  double response_time_s = 0;
  bool passed = true;
  friend bool operator==(const ScalingRow&, const ScalingRow&) = default;
};

// ---- CSV ------------------------------------------------------------------

inline constexpr std::string_view kDevbenchHeader =
    "pattern,rw,bs,jobs,qd,direct,mib_per_s,iops,mean_lat_us,p99_lat_us";
inline constexpr std::string_view kScalingHeader =
    "mode,role,clients,servers,timestep,bytes,response_time_s,status";

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

std::string devbench_csv(const std::vector<DevbenchRow>& rows);
std::string scaling_csv(const std::vector<ScalingRow>& rows);
std::vector<DevbenchRow> parse_devbench_csv(std::string_view text);
std::vector<ScalingRow> parse_scaling_csv(std::string_view text);

/// Overwrites `path` with `text`.
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace stagespace
