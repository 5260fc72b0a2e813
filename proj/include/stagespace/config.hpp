#pragma once

// Key-value configuration files shared by servers and clients.
//
//   # comment
//   servers      = 127.0.0.1:7000,127.0.0.1:7001   # index = server id
//   global       = 256x256x128                      # global extents
//   block        = 16x256x128                       # optional block extents
//   server_id    = 0                                # servers only
//   listen       = 0.0.0.0:7000                     # optional bind override
//   tier         = heap:1g | mmap:/path:1g | delayed:200,1000:heap:1g
//   max_versions = 10
//   workers      = 4                                # default: CPU count

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stagespace/directory.hpp"
#include "stagespace/net.hpp"
#include "stagespace/tier.hpp"

namespace stagespace {

std::map<std::string, std::string> parse_key_values(std::string_view text);

/// "256x256x128" -> {256, 256, 128}.
std::vector<Coord> parse_extents(std::string_view text);
std::string format_extents(std::span<const Coord> extents);

struct ClusterConfig {
  std::vector<Endpoint> servers;
  DistGrid grid;
};

struct ServerConfig {
  explicit ServerConfig(DistGrid g) : grid(std::move(g)) {}

  std::uint32_t server_id = 0;
  std::vector<Endpoint> servers;
  std::optional<Endpoint> listen;
  TierConfig tier;
  DistGrid grid;
  std::uint32_t max_versions = 10;
  std::uint32_t workers = default_workers();
  std::uint32_t notify_attempts = 3;
  std::chrono::milliseconds notify_backoff{50};

  static std::uint32_t default_workers();
  Endpoint listen_endpoint() const;
  void validate() const;
};

ClusterConfig parse_cluster_config(std::string_view text);
ClusterConfig load_cluster_config(const std::filesystem::path& path);
ServerConfig parse_server_config(std::string_view text);
ServerConfig load_server_config(const std::filesystem::path& path);

std::string format_server_config(const ServerConfig& config);

}  // namespace stagespace
