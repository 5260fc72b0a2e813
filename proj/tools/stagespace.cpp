// stagespace: staging server, device benchmark and scaling driver.

#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "stagespace/bench.hpp"
#include "stagespace/config.hpp"
#include "stagespace/error.hpp"
#include "stagespace/scaling.hpp"
#include "stagespace/server.hpp"

namespace ss = stagespace;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string::size_type start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    auto item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) ss::throw_usage("empty list '" + text + "'");
  return out;
}

std::vector<std::uint64_t> size_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(text)) out.push_back(ss::parse_size(item));
  return out;
}

std::vector<std::uint32_t> count_list(const std::string& text) {
  std::vector<std::uint32_t> out;
  for (const auto& item : split_list(text)) {
    auto v = ss::parse_size(item);
    if (v == 0 || v > 1u << 20) ss::throw_usage("bad count '" + item + "'");
    out.push_back(static_cast<std::uint32_t>(v));
  }
  return out;
}

std::filesystem::path self_executable() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) throw ss::Error(ss::ErrorKind::kIo, "cannot locate own executable");
  return p;
}

void emit(const std::string& csv, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << csv;
  } else {
    ss::write_text_file(out, csv);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-situ data staging server and benchmarks"};
  app.require_subcommand(1);

  std::string server_config;
  auto* server = app.add_subcommand("server", "Run a staging server until SIGTERM/SIGINT");
  server->add_option("--config", server_config, "Server config file")->required();

  struct {
    std::string target, pattern = "seq", rw = "read", bs = "4k", jobs = "1", out;
    std::uint32_t qd = 1;
    double runtime = 2.0;
    std::string total_bytes = "0", size = "256m";
    std::uint64_t seed = 1;
    bool buffered = false;
  } dev;
  auto* devbench = app.add_subcommand("devbench", "Throughput and latency of a file or tier");
  devbench->add_option("--target", dev.target, "File path, or tier spec (heap, mmap:PATH, delayed:...)")
      ->required();
  devbench->add_option("--pattern", dev.pattern, "seq or rand (comma list allowed)");
  devbench->add_option("--rw", dev.rw, "read, write or mix50 (comma list allowed)");
  devbench->add_option("--bs", dev.bs, "Transfer size, k/m/g suffixes (comma list allowed)");
  devbench->add_option("--jobs", dev.jobs, "Concurrent workers (comma list allowed)");
  devbench->add_option("--qd", dev.qd, "Outstanding operations per worker");
  devbench->add_option("--runtime", dev.runtime, "Seconds per cell, 0 for no limit");
  devbench->add_option("--total-bytes", dev.total_bytes, "Byte cap per cell, 0 for no limit");
  devbench->add_option("--size", dev.size, "Accessed extent of a file target");
  devbench->add_option("--seed", dev.seed, "Random offset seed");
  devbench->add_flag("--buffered", dev.buffered, "Do not attempt O_DIRECT");
  devbench->add_option("--out", dev.out, "CSV output path (default stdout)");

  struct {
    std::string mode = "strong", writers = "64", readers = "64", servers = "4", tier = "heap",
                bytes, out, work_dir;
    std::uint32_t timesteps = 10, element_size = 8, timeout_ms = 60000, workers = 0;
    bool full_scale = false;
  } sc;
  auto* scaling = app.add_subcommand("scaling", "Strong/weak scaling over a spawned cluster");
  scaling->add_option("--mode", sc.mode, "strong or weak");
  scaling->add_option("--writers", sc.writers, "Writer processes (comma list allowed)");
  scaling->add_option("--readers", sc.readers, "Reader processes (comma list allowed)");
  scaling->add_option("--servers", sc.servers, "Staging servers (comma list allowed)");
  scaling->add_option("--timesteps", sc.timesteps, "Timesteps per run");
  scaling->add_option("--bytes", sc.bytes,
                      "Strong: total bytes per timestep (default 64m). Weak: bytes per client "
                      "(default 512k)");
  scaling->add_option("--tier", sc.tier, "heap, mmap:PATH or delayed:OP_US,MIB_US:<inner>");
  scaling->add_option("--element-size", sc.element_size, "Bytes per array element");
  scaling->add_option("--timeout-ms", sc.timeout_ms, "Reader get timeout");
  scaling->add_option("--workers", sc.workers, "Worker slots per server (default CPU count)");
  scaling->add_flag("--full-scale", sc.full_scale, "Default to 4g strong / 8m weak sizes");
  scaling->add_option("--work-dir", sc.work_dir, "Keep configs and logs here");
  scaling->add_option("--out", sc.out, "CSV output path (default stdout)");

  std::string client_run, client_role, client_out;
  std::uint32_t client_index = 0;
  auto* client = app.add_subcommand("client", "");  // spawned by the scaling driver
  client->group("");
  client->add_option("--run", client_run)->required();
  client->add_option("--role", client_role)->required();
  client->add_option("--index", client_index)->required();
  client->add_option("--out", client_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*server) return ss::serve(ss::load_server_config(server_config));

    if (*client) return ss::run_scaling_client(client_run, client_role, client_index, client_out);

    if (*devbench) {
      std::vector<ss::DevbenchRow> rows;
      for (const auto& pattern : split_list(dev.pattern)) {
        for (const auto& rw : split_list(dev.rw)) {
          for (auto bs : size_list(dev.bs)) {
            for (auto jobs : count_list(dev.jobs)) {
              ss::DevbenchConfig cfg;
              cfg.target = dev.target;
              cfg.pattern = ss::parse_access_pattern(pattern);
              cfg.rw = ss::parse_rw_mode(rw);
              cfg.transfer_size = bs;
              cfg.jobs = jobs;
              cfg.queue_depth = dev.qd;
              cfg.runtime_s = dev.runtime;
              cfg.total_bytes = ss::parse_size(dev.total_bytes);
              cfg.file_size = ss::parse_size(dev.size);
              cfg.seed = dev.seed;
              cfg.direct = !dev.buffered;
              rows.push_back(ss::run_devbench(cfg));
              std::cerr << "devbench " << pattern << " " << rw << " bs=" << bs
                        << " jobs=" << jobs << ": " << rows.back().mib_per_s << " MiB/s\n";
            }
          }
        }
      }
      emit(ss::devbench_csv(rows), dev.out);
      return 0;
    }

    if (*scaling) {
      const auto mode = ss::parse_scaling_mode(sc.mode);
      std::uint64_t bytes = 0;
      if (!sc.bytes.empty()) {
        bytes = ss::parse_size(sc.bytes);
      } else if (mode == ss::ScalingMode::kStrong) {
        bytes = sc.full_scale ? 4ull << 30 : 64ull << 20;
      } else {
        bytes = sc.full_scale ? 8ull << 20 : 512ull << 10;
      }
      std::vector<ss::ScalingRow> rows;
      bool all_passed = true;
      for (auto servers : count_list(sc.servers)) {
        for (auto writers : count_list(sc.writers)) {
          for (auto readers : count_list(sc.readers)) {
            ss::ScalingConfig cfg;
            cfg.mode = mode;
            cfg.writers = writers;
            cfg.readers = readers;
            cfg.servers = servers;
            cfg.timesteps = sc.timesteps;
            cfg.bytes = bytes;
            cfg.element_size = sc.element_size;
            cfg.tier = ss::parse_tier_spec(sc.tier);
            cfg.timeout_ms = sc.timeout_ms;
            cfg.server_workers = sc.workers;
            cfg.executable = self_executable();
            if (!sc.work_dir.empty()) cfg.work_dir = sc.work_dir;
            auto result = ss::run_scaling(cfg);
            rows.insert(rows.end(), result.rows.begin(), result.rows.end());
            if (!result.passed) {
              all_passed = false;
              std::cerr << "scaling " << writers << "w/" << readers << "r/" << servers
                        << "s FAILED: " << result.failure << "\n";
            }
          }
        }
      }
      emit(ss::scaling_csv(rows), sc.out);
      return all_passed ? 0 : 1;
    }
  } catch (const ss::Error& e) {
    std::cerr << "stagespace: " << ss::to_string(e.kind()) << " error: " << e.what() << "\n";
    return e.kind() == ss::ErrorKind::kUsage || e.kind() == ss::ErrorKind::kConfig ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "stagespace: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
