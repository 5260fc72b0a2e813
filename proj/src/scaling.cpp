#include "stagespace/scaling.hpp"

#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <thread>

#include "stagespace/client.hpp"
#include "stagespace/config.hpp"
#include "stagespace/error.hpp"

namespace stagespace {

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t now_ns() { return Clock::now().time_since_epoch().count(); }

std::vector<std::uint64_t> divisors(std::uint64_t n) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t d = 1; d * d <= n; ++d) {
    if (n % d) continue;
    out.push_back(d);
    if (d != n / d) out.push_back(n / d);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t parse_u64(const std::map<std::string, std::string>& kv, const char* key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error(ErrorKind::kConfig, std::string("run file lacks '") + key + "'");
  try {
    std::size_t pos = 0;
    auto v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kConfig, std::string("bad value for '") + key + "'");
  }
}

// A spawned child process with stdout/stderr sent to a log file.
struct Child {
  pid_t pid = -1;
  std::filesystem::path log;
};

Child spawn(const std::vector<std::string>& argv, const std::filesystem::path& log) {
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const pid_t parent = ::getpid();
  pid_t pid = ::fork();
  if (pid < 0) throw_io("fork");
  if (pid == 0) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) ::_exit(127);
    int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd >= 0) {
      ::dup2(fd, STDOUT_FILENO);
      ::dup2(fd, STDERR_FILENO);
    }
    ::execv(args[0], args.data());
    ::_exit(127);
  }
  return Child{pid, log};
}

// Returns the exit status, or nullopt if still running.
std::optional<int> poll_exit(Child& c) {
  if (c.pid < 0) return 0;
  int status = 0;
  pid_t r = ::waitpid(c.pid, &status, WNOHANG);
  if (r == 0) return std::nullopt;
  c.pid = -1;
  if (r < 0) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
}

int wait_exit(Child& c, Clock::duration grace) {
  auto deadline = Clock::now() + grace;
  while (Clock::now() < deadline) {
    if (auto s = poll_exit(c)) return *s;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (c.pid > 0) {
    ::kill(c.pid, SIGKILL);
    int status = 0;
    ::waitpid(c.pid, &status, 0);
    c.pid = -1;
  }
  return 128 + SIGKILL;
}

std::string tail_of(const std::filesystem::path& log) {
  std::ifstream in(log);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  return last;
}

struct ClientTiming {
  std::int64_t start = 0;
  std::int64_t end = 0;
  bool ok = false;
  std::string message;
};

std::vector<ClientTiming> read_results(const std::filesystem::path& path, std::uint32_t timesteps) {
  std::vector<ClientTiming> out(timesteps);
  for (auto& t : out) t.message = "no result recorded";
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::uint32_t t = 0;
    ClientTiming r;
    std::string status;
    if (!(ss >> t >> r.start >> r.end >> status) || t >= timesteps) continue;
    r.ok = status == "ok";
    std::getline(ss, r.message);
    if (!r.message.empty() && r.message.front() == ' ') r.message.erase(0, 1);
    out[t] = r;
  }
  return out;
}

class Barrier {
 public:
  explicit Barrier(const Endpoint& ep) : socket_(Socket::connect_retry(ep, Clock::now() + std::chrono::seconds(30))) {}
  void wait(std::uint64_t epoch) {
    socket_.send_frame(MsgType::kBarrier, epoch, encode(BarrierRequest{epoch, 0}));
    auto reply = socket_.recv_frame();
    if (!reply) throw Error(ErrorKind::kIo, "barrier host closed the connection");
    raise_if_error(*reply);
    if (reply->msg_type() != MsgType::kBarrier || decode_barrier(reply->payload).epoch != epoch) {
      throw Error(ErrorKind::kFraming, "unexpected barrier reply");
    }
  }

 private:
  Socket socket_;
};

}  // namespace

void ScalingConfig::validate() const {
  if (writers == 0 || readers == 0 || servers == 0 || timesteps == 0) {
    throw Error(ErrorKind::kConfig, "writers, readers, servers and timesteps must be >= 1");
  }
  if (element_size == 0 || bytes == 0 || bytes % element_size) {
    throw Error(ErrorKind::kConfig, "bytes must be a positive multiple of the element size");
  }
  if (mode == ScalingMode::kStrong && (bytes % writers || bytes % readers)) {
    throw Error(ErrorKind::kConfig, "strong scaling needs bytes divisible by writers and readers");
  }
  if (mode == ScalingMode::kWeak && readers > writers) {
    throw Error(ErrorKind::kConfig, "weak scaling needs readers <= writers");
  }
  if (var.empty() || var.size() > kMaxVarLength) throw Error(ErrorKind::kConfig, "bad variable name");
  tier.validate();
}

ScalingLayout plan_layout(const ScalingConfig& config) {
  config.validate();
  const std::uint64_t es = config.element_size;
  const std::uint64_t per_client = config.bytes / es;
  const std::uint64_t total =
      config.mode == ScalingMode::kStrong ? config.bytes / es : per_client * config.writers;
  const std::uint64_t w = config.writers;
  const std::uint64_t r = config.readers;

  std::optional<std::array<std::uint64_t, 3>> best;
  double best_score = 0;
  auto divs = divisors(total);
  for (auto n0 : divs) {
    if (n0 % w) continue;
    const auto rest = total / n0;
    for (auto n2 : divs) {
      if (n2 > rest) break;
      if (n2 % r || rest % n2) continue;
      // Weak mode reads the first r/w share of dimension 0; it must stay integral.
      if (config.mode == ScalingMode::kWeak && (n0 * r) % w) continue;
      const auto n1 = rest / n2;
      const double hi = static_cast<double>(std::max({n0, n1, n2}));
      const double lo = static_cast<double>(std::min({n0, n1, n2}));
      const double score = hi / lo;
      if (!best || score < best_score) {
        best = std::array<std::uint64_t, 3>{n0, n1, n2};
        best_score = score;
      }
    }
  }
  if (!best) {
    throw Error(ErrorKind::kConfig, "no " + std::to_string(total) + "-element domain splits into " +
                                        std::to_string(w) + " writer and " + std::to_string(r) +
                                        " reader slabs");
  }
  const auto& e = *best;
  ScalingLayout layout{NDBox::from_extents(e),
                       NDBox::from_extents(e),
                       {},
                       {},
                       DistGrid::make_default(NDBox::from_extents(e), config.servers),
                       0,
                       0};
  if (config.mode == ScalingMode::kWeak) {
    std::array<Coord, 3> ext{e[0] * r / w, e[1], e[2]};
    layout.read_domain = NDBox::from_extents(ext);
  }
  const std::array<std::uint64_t, 3> wparts{w, 1, 1};
  const std::array<std::uint64_t, 3> rparts{1, 1, r};
  layout.write_parts = decompose_grid(layout.global, wparts);
  layout.read_parts = decompose_grid(layout.read_domain, rparts);
  layout.write_bytes = volume(layout.global) * es;
  layout.read_bytes = volume(layout.read_domain) * es;
  return layout;
}

std::string format_run_config(const ScalingConfig& config, const std::vector<Endpoint>& servers,
                              const Endpoint& barrier) {
  auto layout = plan_layout(config);
  std::string out = "servers = ";
  for (std::size_t i = 0; i < servers.size(); ++i) {
    if (i) out += ',';
    out += servers[i].to_string();
  }
  out += "\n";
  std::vector<Coord> ext;
  for (std::size_t d = 0; d < layout.global.ndims(); ++d) ext.push_back(layout.global.extent(d));
  out += "global = " + format_extents(ext) + "\n";
  out += "block = " + format_extents(layout.grid.block_extent) + "\n";
  out += "mode = " + std::string(to_string(config.mode)) + "\n";
  out += "writers = " + std::to_string(config.writers) + "\n";
  out += "readers = " + std::to_string(config.readers) + "\n";
  out += "timesteps = " + std::to_string(config.timesteps) + "\n";
  out += "bytes = " + std::to_string(config.bytes) + "\n";
  out += "element_size = " + std::to_string(config.element_size) + "\n";
  out += "var = " + config.var + "\n";
  out += "timeout_ms = " + std::to_string(config.timeout_ms) + "\n";
  out += "barrier = " + barrier.to_string() + "\n";
  return out;
}

int run_scaling_client(const std::filesystem::path& run_file, const std::string& role,
                       std::uint32_t index, const std::filesystem::path& results) {
  const auto text = read_text_file(run_file);
  const auto kv = parse_key_values(text);
  auto cluster = parse_cluster_config(text);
  ScalingConfig config;
  config.mode = parse_scaling_mode(kv.at("mode"));
  config.writers = static_cast<std::uint32_t>(parse_u64(kv, "writers"));
  config.readers = static_cast<std::uint32_t>(parse_u64(kv, "readers"));
  config.servers = static_cast<std::uint32_t>(cluster.servers.size());
  config.timesteps = static_cast<std::uint32_t>(parse_u64(kv, "timesteps"));
  config.bytes = parse_u64(kv, "bytes");
  config.element_size = static_cast<std::uint32_t>(parse_u64(kv, "element_size"));
  config.var = kv.at("var");
  config.timeout_ms = static_cast<std::uint32_t>(parse_u64(kv, "timeout_ms"));
  const auto layout = plan_layout(config);
  if (layout.global != cluster.grid.global_box) {
    throw Error(ErrorKind::kConfig, "run file domain differs from the planned layout");
  }

  const bool writer = role == "write";
  if (!writer && role != "read") throw_usage("client role must be write or read");
  const auto& parts = writer ? layout.write_parts : layout.read_parts;
  if (index >= parts.size()) throw_usage("client index out of range");
  const NDBox box = parts[index];

  SessionOptions options;
  options.element_size = config.element_size;
  options.timeout_ms = config.timeout_ms;
  StagingSession session(cluster, options);
  Barrier barrier(Endpoint::parse(kv.at("barrier")));
  RegionBuffer buf(box, config.element_size);

  std::ostringstream out;
  for (std::uint32_t t = 0; t < config.timesteps; ++t) {
    ClientTiming timing;
    barrier.wait(2ull * t);
    if (writer) {
      fill_pattern(buf.mutable_view(), layout.global, config.var, t);
      timing.start = now_ns();
      try {
        session.put(config.var, t, buf);
        timing.ok = true;
      } catch (const Error& e) {
        timing.message = e.what();
      }
      timing.end = now_ns();
    }
    barrier.wait(2ull * t + 1);
    if (!writer) {
      timing.start = now_ns();
      try {
        auto got = session.get(config.var, t, box);
        timing.end = now_ns();
        if (auto bad = verify_pattern(got.view(), layout.global, config.var, t)) {
          timing.message = "mismatch " + config.var + "@" + std::to_string(t) + " at " +
                           bad->to_string();
        } else {
          timing.ok = true;
        }
      } catch (const Error& e) {
        timing.end = now_ns();
        timing.message = e.what();
      }
    }
    std::string msg = timing.message;
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    out << t << ' ' << timing.start << ' ' << timing.end << ' ' << (timing.ok ? "ok" : "fail");
    if (!timing.ok) out << ' ' << msg;
    out << '\n';
  }
  write_text_file(results, out.str());
  return 0;
}

ScalingResult run_scaling(const ScalingConfig& config) {
  const auto layout = plan_layout(config);
  if (config.executable.empty() || !std::filesystem::exists(config.executable)) {
    throw Error(ErrorKind::kConfig, "stagespace executable not found: " + config.executable.string());
  }
  const auto exe = std::filesystem::absolute(config.executable).string();

  bool own_dir = false;
  std::filesystem::path dir = config.work_dir;
  if (dir.empty()) {
    std::string tmpl = (std::filesystem::temp_directory_path() / "stagespace-scaling-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw_io("mkdtemp");
    dir = tmpl;
    own_dir = true;
  }
  std::filesystem::create_directories(dir);

  std::vector<Endpoint> endpoints;
  for (std::uint32_t i = 0; i < config.servers; ++i) {
    endpoints.push_back(Endpoint{"127.0.0.1", pick_free_port()});
  }
  Listener barrier_listener(Endpoint{"127.0.0.1", 0});
  const Endpoint barrier_ep{"127.0.0.1", barrier_listener.port()};

  std::vector<Child> servers;
  std::vector<Child> clients;
  std::vector<std::filesystem::path> backing_files;
  ScalingResult result;

  auto note_failure = [&](const std::string& what) {
    if (result.failure.empty()) result.failure = what;
  };
  auto stop_all = [&] {
    for (auto& c : clients) {
      if (c.pid > 0) ::kill(c.pid, SIGKILL);
      wait_exit(c, std::chrono::seconds(5));
    }
    for (auto& s : servers) {
      if (s.pid > 0) ::kill(s.pid, SIGTERM);
    }
    for (auto& s : servers) wait_exit(s, std::chrono::seconds(10));
    for (const auto& f : backing_files) std::filesystem::remove(f);
    if (own_dir) std::filesystem::remove_all(dir);
  };

  try {
    // Servers keep max_versions timesteps plus the one being written.
    const std::uint64_t need =
        layout.write_bytes * (config.max_versions + 1) + (16ull << 20);
    for (std::uint32_t i = 0; i < config.servers; ++i) {
      ServerConfig sc(layout.grid);
      sc.server_id = i;
      sc.servers = endpoints;
      sc.tier = config.tier;
      sc.tier.capacity_bytes = std::max(sc.tier.capacity_bytes, need);
      if (sc.tier.backend() == TierKind::kMmapFile) {
        sc.tier.backing_path = config.tier.backing_path.string() + "." + std::to_string(i);
        std::filesystem::remove(sc.tier.backing_path);
        backing_files.push_back(sc.tier.backing_path);
      }
      sc.max_versions = config.max_versions;
      if (config.server_workers) sc.workers = config.server_workers;
      auto conf = dir / ("server" + std::to_string(i) + ".conf");
      write_text_file(conf, format_server_config(sc));
      servers.push_back(spawn({exe, "server", "--config", conf.string()},
                              dir / ("server" + std::to_string(i) + ".log")));
    }
    for (std::uint32_t i = 0; i < config.servers; ++i) {
      const auto deadline = Clock::now() + std::chrono::seconds(30);
      while (true) {
        if (auto s = poll_exit(servers[i])) {
          throw Error(ErrorKind::kIo, "server " + std::to_string(i) + " exited with status " +
                                          std::to_string(*s) + ": " + tail_of(servers[i].log));
        }
        try {
          Socket::connect(endpoints[i]);
          break;
        } catch (const Error&) {
          if (Clock::now() > deadline) throw;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
    }

    auto run_file = dir / "run.conf";
    write_text_file(run_file, format_run_config(config, endpoints, barrier_ep));
    std::filesystem::create_directories(dir / "clients");
    std::vector<std::filesystem::path> results;
    auto launch = [&](const std::string& role, std::uint32_t i) {
      auto stem = dir / "clients" / (role + std::to_string(i));
      results.push_back(stem.string() + ".txt");
      clients.push_back(spawn({exe, "client", "--run", run_file.string(), "--role", role,
                               "--index", std::to_string(i), "--out", results.back().string()},
                              stem.string() + ".log"));
    };
    for (std::uint32_t i = 0; i < config.writers; ++i) launch("write", i);
    for (std::uint32_t i = 0; i < config.readers; ++i) launch("read", i);

    const std::size_t participants = clients.size();
    std::vector<Socket> members;
    const auto join_deadline = Clock::now() + std::chrono::seconds(120);
    while (members.size() < participants) {
      if (Clock::now() > join_deadline) throw Error(ErrorKind::kTimeout, "clients did not join the barrier");
      for (auto& c : clients) {
        if (c.pid < 0) continue;
        if (auto s = poll_exit(c); s && *s != 0) {
          throw Error(ErrorKind::kIo, "client exited with status " + std::to_string(*s) + ": " +
                                          tail_of(c.log));
        }
      }
      if (auto sock = barrier_listener.accept(std::chrono::milliseconds(100))) {
        members.push_back(std::move(*sock));
      }
    }

    const auto round_limit = std::chrono::milliseconds(config.timeout_ms) * 2 + std::chrono::seconds(120);
    for (std::uint64_t epoch = 0; epoch < 2ull * config.timesteps; ++epoch) {
      for (auto& m : members) {
        auto frame = m.recv_frame(Clock::now() + round_limit);
        if (!frame || frame->msg_type() != MsgType::kBarrier ||
            decode_barrier(frame->payload).epoch != epoch) {
          throw Error(ErrorKind::kIo, "client left the barrier at epoch " + std::to_string(epoch));
        }
      }
      auto reply = encode(BarrierRequest{epoch, static_cast<std::uint32_t>(participants)});
      for (auto& m : members) m.send_frame(MsgType::kBarrier, epoch, reply);
    }

    for (auto& c : clients) {
      int status = wait_exit(c, std::chrono::seconds(60));
      if (status != 0) note_failure("client exited with status " + std::to_string(status) + ": " + tail_of(c.log));
    }

    std::vector<std::vector<ClientTiming>> timings;
    for (const auto& r : results) timings.push_back(read_results(r, config.timesteps));

    auto roles = std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>>{
        {"write", {0, config.writers}},
        {"read", {config.writers, config.writers + config.readers}}};
    std::vector<ScalingRow> means;
    bool all_ok = result.failure.empty();
    for (const auto& [role, range] : roles) {
      const std::uint64_t bytes = role == "write" ? layout.write_bytes : layout.read_bytes;
      const std::uint32_t nclients = role == "write" ? config.writers : config.readers;
      double sum = 0;
      bool role_ok = true;
      for (std::uint32_t t = 0; t < config.timesteps; ++t) {
        std::int64_t first = std::numeric_limits<std::int64_t>::max();
        std::int64_t last = std::numeric_limits<std::int64_t>::min();
        bool ok = true;
        for (std::size_t c = range.first; c < range.second; ++c) {
          const auto& ct = timings[c][t];
          first = std::min(first, ct.start);
          last = std::max(last, ct.end);
          if (!ct.ok) {
            ok = false;
            note_failure((role == "write" ? "writer " : "reader ") + std::to_string(c - range.first) + " timestep " +
                         std::to_string(t) + ": " + ct.message);
          }
        }
        const double rt = static_cast<double>(std::max<std::int64_t>(0, last - first)) * 1e-9;
        sum += rt;
        role_ok = role_ok && ok;
        result.rows.push_back({config.mode, role, nclients, config.servers, t, bytes, rt, ok});
      }
      all_ok = all_ok && role_ok;
      means.push_back({config.mode, role, nclients, config.servers, std::nullopt, bytes,
                       sum / config.timesteps, role_ok});
    }
    for (auto& m : means) result.rows.push_back(std::move(m));
    result.passed = all_ok && result.failure.empty();
  } catch (const Error& e) {
    note_failure(e.what());
    result.passed = false;
  }
  stop_all();
  return result;
}

}  // namespace stagespace
