#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "safegen/harness.hpp"
#include "safegen/lavarun.hpp"

// Supervised LavaRun episodes: the agent asks an operator for help whenever
// its risk score reaches the threshold. Message format is documented in
// docs/wire_protocol.md.
namespace safegen::session {

inline constexpr int kProtocolVersion = 1;

// Thresholds travel as numbers, or as the strings "inf" / "-inf".
nlohmann::json threshold_to_json(double threshold);
double threshold_from_json(const nlohmann::json& value);

const std::vector<std::string>& action_names();

struct SessionParams {
  std::uint64_t layout_seed = 0;
  std::uint64_t policy_seed = 0;
  double threshold = 0.0;
  std::string variant = "mean+std";
};

// Transport for one session. receive() blocks; nullopt means the peer is gone.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual bool send(const nlohmann::json& message) = 0;
  virtual std::optional<nlohmann::json> receive() = 0;
};

struct SessionResult {
  std::string session_id;
  std::string outcome;  // OutcomeKind name, or "Aborted"
  int length = 0;
  double ret = 0.0;
  int interventions = 0;  // steps where an intervention was requested
  int overrides = 0;
  std::filesystem::path log_path;
};

struct SessionDefaults {
  double threshold = 0.0;
  std::string variant = "mean+std";
  int tick_ms = 0;  // pause between autonomous steps
  std::vector<std::uint64_t> layout_seeds;  // round-robin when start omits one
};

// Runs one session: waits for `start`, then streams frames until the episode
// ends or the peer disconnects. Logs to <log_dir>/<session_id>.jsonl and the
// raw message transcript to <session_id>.wire.jsonl.
SessionResult run_session(const harness::Agent& agent, Channel& channel, const std::string& session_id,
                          std::uint64_t session_index, const SessionDefaults& defaults,
                          const std::filesystem::path& log_dir);

struct ReplayResult {
  std::string outcome;
  int length = 0;
  double ret = 0.0;
  bool matches_log = false;  // every step and the footer agree with the log
};

// Re-runs a logged session with the same seeds and operator choices.
ReplayResult replay_session(const harness::Agent& agent, const std::filesystem::path& log_path);

struct ServerOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0 picks a free port
  std::filesystem::path assets;
  std::filesystem::path log_dir;
  SessionDefaults defaults;
};

// HTTP + WebSocket endpoint. GET /ws upgrades to a session; any other GET
// serves a file from `assets`. One thread per connection.
class Server {
 public:
  Server(std::shared_ptr<const harness::Agent> agent, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  void start();
  void stop();
  unsigned short port() const { return port_; }
  std::vector<SessionResult> results() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  unsigned short port_ = 0;
};

// Content type by file extension.
std::string mime_type(const std::filesystem::path& path);

// Maps a request target to a file under `root`; nullopt if it escapes the
// root or does not exist. "/" maps to index.html.
std::optional<std::filesystem::path> resolve_asset(const std::filesystem::path& root, std::string_view target);

}  // namespace safegen::session
