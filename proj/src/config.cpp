#include "stagespace/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <thread>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(std::string_view key, std::string_view text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error(ErrorKind::kConfig, "key '" + std::string(key) + "': bad integer '" +
                                        std::string(text) + "'");
  }
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string& require(const std::map<std::string, std::string>& kv, const char* key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error(ErrorKind::kConfig, std::string("missing key '") + key + "'");
  return it->second;
}

ClusterConfig cluster_from(const std::map<std::string, std::string>& kv) {
  std::vector<Endpoint> servers;
  std::string_view list = require(kv, "servers");
  while (!list.empty()) {
    auto comma = list.find(',');
    auto item = trim(list.substr(0, comma));
    if (!item.empty()) servers.push_back(Endpoint::parse(item));
    list = comma == std::string_view::npos ? std::string_view{} : list.substr(comma + 1);
  }
  if (servers.empty()) throw Error(ErrorKind::kConfig, "'servers' lists no endpoints");

  auto global = NDBox::from_extents(parse_extents(require(kv, "global")));
  auto grid = DistGrid::make_default(global, static_cast<std::uint32_t>(servers.size()));
  if (auto it = kv.find("block"); it != kv.end()) grid.block_extent = parse_extents(it->second);
  try {
    grid.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  return ClusterConfig{std::move(servers), std::move(grid)};
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorKind::kConfig, "line " + std::to_string(line_no) + ": expected key = value");
    }
    out[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<Coord> parse_extents(std::string_view text) {
  std::vector<Coord> out;
  while (!text.empty()) {
    auto x = text.find('x');
    out.push_back(parse_u64("extents", trim(text.substr(0, x))));
    text = x == std::string_view::npos ? std::string_view{} : text.substr(x + 1);
  }
  if (out.empty() || out.size() > kMaxDims) {
    throw Error(ErrorKind::kConfig, "extents need 1..3 dimensions");
  }
  return out;
}

std::string format_extents(std::span<const Coord> extents) {
  std::string s;
  for (std::size_t i = 0; i < extents.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(extents[i]);
  }
  return s;
}

std::uint32_t ServerConfig::default_workers() {
  return std::max(1u, std::thread::hardware_concurrency());
}

Endpoint ServerConfig::listen_endpoint() const {
  if (listen) return *listen;
  return servers.at(server_id);
}

void ServerConfig::validate() const {
  if (servers.empty()) throw Error(ErrorKind::kConfig, "server list is empty");
  if (server_id >= servers.size()) {
    throw Error(ErrorKind::kConfig, "server_id " + std::to_string(server_id) + " outside list of " +
                                        std::to_string(servers.size()));
  }
  if (grid.server_count != servers.size()) {
    throw Error(ErrorKind::kConfig, "grid server_count differs from server list");
  }
  if (workers == 0) throw Error(ErrorKind::kConfig, "workers must be >= 1");
  if (max_versions == 0) throw Error(ErrorKind::kConfig, "max_versions must be >= 1");
  tier.validate();
}

ClusterConfig parse_cluster_config(std::string_view text) { return cluster_from(parse_key_values(text)); }

ClusterConfig load_cluster_config(const std::filesystem::path& path) {
  return parse_cluster_config(read_file(path));
}

ServerConfig parse_server_config(std::string_view text) {
  auto kv = parse_key_values(text);
  auto cluster = cluster_from(kv);
  ServerConfig config(std::move(cluster.grid));
  config.servers = std::move(cluster.servers);
  config.server_id = static_cast<std::uint32_t>(parse_u64("server_id", require(kv, "server_id")));
  if (auto it = kv.find("listen"); it != kv.end()) config.listen = Endpoint::parse(it->second);
  if (auto it = kv.find("tier"); it != kv.end()) config.tier = parse_tier_spec(it->second);
  if (auto it = kv.find("max_versions"); it != kv.end()) {
    config.max_versions = static_cast<std::uint32_t>(parse_u64("max_versions", it->second));
  }
  if (auto it = kv.find("workers"); it != kv.end()) {
    config.workers = static_cast<std::uint32_t>(parse_u64("workers", it->second));
  }
  config.validate();
  return config;
}

ServerConfig load_server_config(const std::filesystem::path& path) {
  return parse_server_config(read_file(path));
}

std::string format_server_config(const ServerConfig& config) {
  std::string out;
  out += "server_id = " + std::to_string(config.server_id) + "\n";
  out += "servers = ";
  for (std::size_t i = 0; i < config.servers.size(); ++i) {
    if (i) out += ',';
    out += config.servers[i].to_string();
  }
  out += "\n";
  if (config.listen) out += "listen = " + config.listen->to_string() + "\n";
  std::vector<Coord> extents;
  for (std::size_t d = 0; d < config.grid.global_box.ndims(); ++d) {
    extents.push_back(config.grid.global_box.extent(d));
  }
  out += "global = " + format_extents(extents) + "\n";
  out += "block = " + format_extents(config.grid.block_extent) + "\n";
  out += "tier = " + format_tier_spec(config.tier) + "\n";
  out += "max_versions = " + std::to_string(config.max_versions) + "\n";
  out += "workers = " + std::to_string(config.workers) + "\n";
  return out;
}

}  // namespace stagespace
