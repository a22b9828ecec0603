#include "safegen/session.hpp"

#include <sys/socket.h>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "safegen/rng.hpp"

namespace safegen::session {
namespace {

namespace fs = std::filesystem;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using nlohmann::json;

constexpr std::uint64_t kPolicySeedTag = 0x5e55;
constexpr std::uint64_t kRiskTag = 0x5c0e;

class JsonlFile {
 public:
  explicit JsonlFile(const fs::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const json& line) {
    out_ << line.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Mirrors every message into the wire transcript.
class LoggedChannel {
 public:
  LoggedChannel(Channel& inner, JsonlFile& wire) : inner_(inner), wire_(wire) {}

  bool send(const json& message) {
    wire_.write({{"dir", "out"}, {"msg", message}});
    return inner_.send(message);
  }
  std::optional<json> receive() {
    auto m = inner_.receive();
    if (m) wire_.write({{"dir", "in"}, {"msg", *m}});
    return m;
  }

 private:
  Channel& inner_;
  JsonlFile& wire_;
};

json nack(const std::string& reason, std::optional<int> step = std::nullopt) {
  json m = {{"v", kProtocolVersion}, {"type", "nack"}, {"reason", reason}};
  if (step) m["step"] = *step;
  return m;
}

// Empty string when the message is a well-formed v1 message of an allowed type.
std::string check_envelope(const json& m, std::initializer_list<const char*> types) {
  if (!m.is_object()) return "malformed message";
  if (!m.contains("v") || m["v"] != kProtocolVersion) return "unsupported protocol version";
  if (!m.contains("type") || !m["type"].is_string()) return "missing type";
  const auto type = m["type"].get<std::string>();
  for (const char* t : types) {
    if (type == t) return "";
  }
  return "unexpected message type: " + type;
}

json state_json(const lava::LavaRunState& s) {
  return {{"x", s.x},           {"y", s.y},           {"vy", s.vy},
          {"vx_air", s.vx_air}, {"grounded", s.grounded}, {"column", s.column()},
          {"steps_elapsed", s.steps_elapsed}};
}

std::vector<std::string> tile_rows(const lava::LavaRunLayout& layout, const lava::LavaRunState& state) {
  std::vector<std::string> rows;
  std::istringstream in(lava::render_ascii(layout, state));
  for (std::string line; std::getline(in, line);) rows.push_back(line);
  return rows;
}

struct StepView {
  ens::EnsembleStats stats;
  std::map<std::string, double> u;
  bool requested = false;
  int agent_action = 0;
};

// Everything the agent computes before the operator answers. Shared by live
// sessions and replay so both consume the policy RNG identically.
class AgentStepper {
 public:
  AgentStepper(const harness::Agent& agent, std::uint64_t policy_seed)
      : policy_seed_(policy_seed), policy_(harness::make_policy(agent, policy_seed)) {
    auto stats = harness::risk_stats(agent);
    if (!stats) throw std::invalid_argument("session: the agent has no ensemble or dropout value estimates");
    stats_ = *stats;
  }

  StepView view(const Environment& env, const std::string& variant, double threshold) {
    const auto obs = env.observe();
    StepView v;
    v.stats = stats_(obs, derive_seed(derive_seed(policy_seed_, kRiskTag), static_cast<std::uint64_t>(env.steps_elapsed())));
    for (const auto& var : ens::canonical_variants()) v.u[var.name] = ens::u_score(v.stats, var);
    v.requested = v.u.at(variant) >= threshold;
    v.agent_action = policy_(env, obs).action;
    return v;
  }

 private:
  std::uint64_t policy_seed_;
  Policy policy_;
  harness::StatsFn stats_;
};

json u_json(const std::map<std::string, double>& u) {
  json out = json::object();
  for (const auto& [k, v] : u) out[k] = v;
  return out;
}

class WebSocketChannel final : public Channel {
 public:
  explicit WebSocketChannel(websocket::stream<tcp::socket&>& ws) : ws_(ws) { ws_.text(true); }

  bool send(const json& message) override {
    try {
      ws_.write(asio::buffer(message.dump() + "\n"));
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  std::optional<json> receive() override {
    while (pending_.empty()) {
      beast::flat_buffer buffer;
      try {
        ws_.read(buffer);
      } catch (const std::exception&) {
        return std::nullopt;
      }
      std::istringstream in(beast::buffers_to_string(buffer.data()));
      for (std::string line; std::getline(in, line);) {
        if (!line.empty()) pending_.push_back(line);
      }
    }
    const auto line = std::move(pending_.front());
    pending_.pop_front();
    auto parsed = json::parse(line, nullptr, false);
    // Unparseable input is handed on as a bare string so it can be refused.
    return parsed.is_discarded() ? json(line) : parsed;
  }

 private:
  websocket::stream<tcp::socket&>& ws_;
  std::deque<std::string> pending_;
};

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

json threshold_to_json(double threshold) {
  if (std::isinf(threshold)) return threshold > 0 ? "inf" : "-inf";
  return threshold;
}

double threshold_from_json(const json& value) {
  if (value.is_number()) return value.get<double>();
  if (value == "inf") return std::numeric_limits<double>::infinity();
  if (value == "-inf") return -std::numeric_limits<double>::infinity();
  throw std::invalid_argument("threshold must be a number, \"inf\" or \"-inf\"");
}

const std::vector<std::string>& action_names() {
  static const std::vector<std::string> names{"NoOp", "Jump", "JumpRight", "JumpLeft", "Right", "Left"};
  return names;
}

SessionResult run_session(const harness::Agent& agent, Channel& raw, const std::string& session_id,
                          std::uint64_t session_index, const SessionDefaults& defaults, const fs::path& log_dir) {
  fs::create_directories(log_dir);
  SessionResult result;
  result.session_id = session_id;
  result.log_path = log_dir / (session_id + ".jsonl");
  JsonlFile log(result.log_path);
  JsonlFile wire(log_dir / (session_id + ".wire.jsonl"));
  LoggedChannel channel(raw, wire);

  auto abort_session = [&](int length, double ret) {
    result.outcome = "Aborted";
    result.length = length;
    result.ret = ret;
    log.write({{"type", "end"}, {"outcome", "Aborted"}, {"length", length}, {"return", ret}});
    return result;
  };

  // Handshake.
  SessionParams params;
  for (;;) {
    const auto m = channel.receive();
    if (!m) {
      log.write({{"type", "header"}, {"v", kProtocolVersion}, {"session_id", session_id}});
      return abort_session(0, 0.0);
    }
    if (auto err = check_envelope(*m, {"start"}); !err.empty()) {
      channel.send(nack(err));
      continue;
    }
    try {
      params.layout_seed = m->contains("layout_seed") ? m->at("layout_seed").get<std::uint64_t>()
                           : defaults.layout_seeds.empty()
                               ? session_index
                               : defaults.layout_seeds[session_index % defaults.layout_seeds.size()];
      params.policy_seed = m->contains("seed") ? m->at("seed").get<std::uint64_t>()
                                               : derive_seed(session_index, kPolicySeedTag);
      params.threshold = m->contains("threshold") ? threshold_from_json(m->at("threshold")) : defaults.threshold;
      params.variant = m->value("variant", defaults.variant);
      ens::variant_by_name(params.variant);
    } catch (const std::exception& e) {
      channel.send(nack(std::string("bad start: ") + e.what()));
      continue;
    }
    break;
  }

  const auto layout = lava::sample_lavarun(params.layout_seed);
  lava::LavaRunEnv env(layout);
  AgentStepper stepper(agent, params.policy_seed);
  const auto ensemble = agent.ensemble();

  const json layout_json = {{"seed", layout.seed},
                            {"profile", lava::profile_string(layout)},
                            {"coin_column", layout.coin_column},
                            {"width", layout.width}};
  std::vector<std::string> variant_names;
  for (const auto& v : ens::canonical_variants()) variant_names.push_back(v.name);
  log.write({{"type", "header"},
             {"v", kProtocolVersion},
             {"session_id", session_id},
             {"layout_seed", params.layout_seed},
             {"policy_seed", params.policy_seed},
             {"threshold", threshold_to_json(params.threshold)},
             {"variant", params.variant},
             {"method", harness::to_string(agent.method)}});
  if (!channel.send({{"v", kProtocolVersion},
                     {"type", "session"},
                     {"session_id", session_id},
                     {"layout", layout_json},
                     {"threshold", threshold_to_json(params.threshold)},
                     {"variant", params.variant},
                     {"variants", variant_names},
                     {"action_names", action_names()},
                     {"members", ensemble.size() > 0 ? ensemble.size() : static_cast<std::size_t>(agent.mc_passes)},
                     {"max_steps", lava::kMaxSteps}})) {
    return abort_session(0, 0.0);
  }

  json previous = nullptr;
  StepResult last;
  double ret = 0.0;
  int step = 0;
  while (!env.terminal()) {
    const auto view = stepper.view(env, params.variant, params.threshold);
    const json frame = {{"v", kProtocolVersion},
                        {"type", "frame"},
                        {"step", step},
                        {"tiles", tile_rows(layout, env.state())},
                        {"agent", state_json(env.state())},
                        {"member_values", view.stats.member_values},
                        {"mu", view.stats.mu},
                        {"sigma", view.stats.sigma},
                        {"u", u_json(view.u)},
                        {"threshold", threshold_to_json(params.threshold)},
                        {"intervention_requested", view.requested},
                        {"agent_action", view.agent_action},
                        {"previous", previous}};
    if (!channel.send(frame)) return abort_session(step, ret);

    int action = view.agent_action;
    std::string chosen_by = "agent";
    if (view.requested) {
      ++result.interventions;
      for (;;) {
        const auto m = channel.receive();
        if (!m) return abort_session(step, ret);
        if (auto err = check_envelope(*m, {"override", "decline"}); !err.empty()) {
          channel.send(nack(err, step));
          continue;
        }
        if (!m->contains("step") || !(*m)["step"].is_number_integer() || (*m)["step"].get<int>() != step) {
          channel.send(nack("no pending request for that step", step));
          continue;
        }
        if ((*m)["type"] == "override") {
          const auto& a = m->value("action", json());
          if (!a.is_number_integer() || a.get<int>() < 0 || a.get<int>() >= lava::kActionCount) {
            channel.send(nack("override action must be an integer in [0, 6)", step));
            continue;
          }
          action = a.get<int>();
          chosen_by = "operator";
          ++result.overrides;
        }
        if (!channel.send({{"v", kProtocolVersion},
                           {"type", "ack"},
                           {"step", step},
                           {"action", action},
                           {"chosen_by", chosen_by}})) {
          return abort_session(step, ret);
        }
        break;
      }
    } else if (defaults.tick_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(defaults.tick_ms));
    }

    last = env.step(action);
    ret += last.reward;
    log.write({{"type", "step"},
               {"step", step},
               {"mu", view.stats.mu},
               {"sigma", view.stats.sigma},
               {"u", u_json(view.u)},
               {"requested", view.requested},
               {"agent_action", view.agent_action},
               {"action", action},
               {"chosen_by", chosen_by},
               {"reward", last.reward},
               {"terminal", last.terminal},
               {"catastrophe", last.catastrophe}});
    previous = {{"step", step}, {"action", action}, {"chosen_by", chosen_by}, {"reward", last.reward}};
    ++step;
  }

  result.outcome = std::string(to_string(classify_terminal_step(last)));
  result.length = step;
  result.ret = ret;
  const json footer = {{"type", "end"},
                       {"outcome", result.outcome},
                       {"length", step},
                       {"return", ret},
                       {"interventions", result.interventions},
                       {"overrides", result.overrides}};
  log.write(footer);
  json end = footer;
  end["v"] = kProtocolVersion;
  end["previous"] = previous;
  channel.send(end);
  return result;
}

ReplayResult replay_session(const harness::Agent& agent, const fs::path& log_path) {
  std::ifstream in(log_path);
  if (!in) throw std::runtime_error("cannot read " + log_path.string());
  std::vector<json> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(json::parse(line));
  }
  if (lines.size() < 2 || lines.front().at("type") != "header" || lines.back().at("type") != "end") {
    throw std::runtime_error("session log is incomplete: " + log_path.string());
  }
  const auto& header = lines.front();
  const auto& footer = lines.back();
  ReplayResult r;
  if (!header.contains("layout_seed")) {
    // Disconnected before the episode began.
    r.outcome = "Aborted";
    r.matches_log = footer.at("outcome") == "Aborted" && footer.at("length") == 0;
    return r;
  }

  const auto layout = lava::sample_lavarun(header.at("layout_seed").get<std::uint64_t>());
  lava::LavaRunEnv env(layout);
  AgentStepper stepper(agent, header.at("policy_seed").get<std::uint64_t>());
  const auto variant = header.at("variant").get<std::string>();
  const double threshold = threshold_from_json(header.at("threshold"));

  bool matches = true;
  StepResult last;
  for (std::size_t i = 1; i + 1 < lines.size(); ++i) {
    const auto& s = lines[i];
    if (env.terminal() || s.at("step").get<int>() != r.length) {
      matches = false;
      break;
    }
    const auto view = stepper.view(env, variant, threshold);
    matches = matches && view.agent_action == s.at("agent_action").get<int>() &&
              view.requested == s.at("requested").get<bool>() && view.stats.mu == s.at("mu").get<double>();
    const int action = s.at("chosen_by") == "operator" ? s.at("action").get<int>() : view.agent_action;
    matches = matches && action == s.at("action").get<int>();
    last = env.step(action);
    r.ret += last.reward;
    ++r.length;
    matches = matches && last.reward == s.at("reward").get<double>() && last.terminal == s.at("terminal").get<bool>();
  }
  r.outcome = footer.at("outcome") == "Aborted" || !env.terminal() ? "Aborted"
                                                                    : std::string(to_string(classify_terminal_step(last)));
  r.matches_log = matches && r.outcome == footer.at("outcome").get<std::string>() &&
                  r.length == footer.at("length").get<int>() && r.ret == footer.at("return").get<double>();
  return r;
}

std::string mime_type(const fs::path& path) {
  static const std::map<std::string, std::string> types{
      {".html", "text/html; charset=utf-8"}, {".htm", "text/html; charset=utf-8"},
      {".js", "text/javascript"},            {".mjs", "text/javascript"},
      {".css", "text/css"},                  {".json", "application/json"},
      {".map", "application/json"},          {".svg", "image/svg+xml"},
      {".png", "image/png"},                 {".ico", "image/x-icon"},
      {".wasm", "application/wasm"},         {".txt", "text/plain; charset=utf-8"}};
  const auto it = types.find(path.extension().string());
  return it == types.end() ? "application/octet-stream" : it->second;
}

std::optional<fs::path> resolve_asset(const fs::path& root, std::string_view target) {
  target = target.substr(0, target.find_first_of("?#"));
  if (target.empty() || target.front() != '/') return std::nullopt;
  std::string decoded;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == '%' && i + 2 < target.size() && hex_value(target[i + 1]) >= 0 && hex_value(target[i + 2]) >= 0) {
      decoded.push_back(static_cast<char>(hex_value(target[i + 1]) * 16 + hex_value(target[i + 2])));
      i += 2;
    } else {
      decoded.push_back(target[i]);
    }
  }
  if (decoded.find('\0') != std::string::npos || decoded.find('\\') != std::string::npos) return std::nullopt;
  fs::path relative;
  for (const auto& part : fs::path(decoded.substr(1))) {
    if (part == ".." ) return std::nullopt;
    if (part.empty() || part == ".") continue;
    relative /= part;
  }
  if (decoded.back() == '/' || relative.empty()) relative /= "index.html";

  std::error_code ec;
  const auto base = fs::canonical(root, ec);
  if (ec) return std::nullopt;
  const auto file = fs::canonical(base / relative, ec);
  if (ec || !fs::is_regular_file(file)) return std::nullopt;
  // Symlinks must not lead outside the root either.
  const auto rel = file.lexically_relative(base);
  if (rel.empty() || *rel.begin() == "..") return std::nullopt;
  return file;
}

// ---------------------------------------------------------------------------
// Server.

struct Server::Impl {
  std::shared_ptr<const harness::Agent> agent;
  ServerOptions options;
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread accept_thread;
  std::atomic<bool> stopping{false};
  std::atomic<std::uint64_t> counter{0};

  mutable std::mutex mutex;
  std::vector<std::thread> connections;
  std::vector<int> open_sockets;
  std::vector<SessionResult> results;

  void serve_file(tcp::socket& socket, const http::request<http::string_body>& req) {
    http::response<http::string_body> res;
    res.version(req.version());
    res.keep_alive(false);
    res.set(http::field::server, "safegen");
    if (req.method() != http::verb::get && req.method() != http::verb::head) {
      res.result(http::status::method_not_allowed);
      res.set(http::field::allow, "GET, HEAD");
    } else if (const auto file = resolve_asset(options.assets, std::string_view(req.target().data(), req.target().size()))) {
      std::ifstream in(*file, std::ios::binary);
      std::ostringstream body;
      body << in.rdbuf();
      res.result(http::status::ok);
      res.set(http::field::content_type, mime_type(*file));
      const auto size = body.str().size();
      if (req.method() == http::verb::get) res.body() = body.str();
      res.prepare_payload();
      if (req.method() == http::verb::head) res.content_length(size);
    } else {
      res.result(http::status::not_found);
      res.set(http::field::content_type, "text/plain; charset=utf-8");
      res.body() = "not found\n";
      res.prepare_payload();
    }
    http::write(socket, res);
  }

  void handle(tcp::socket socket) {
    {
      std::lock_guard lock(mutex);
      open_sockets.push_back(socket.native_handle());
    }
    try {
      beast::flat_buffer buffer;
      http::request<http::string_body> req;
      http::read(socket, buffer, req);
      if (websocket::is_upgrade(req)) {
        if (req.target() != "/ws") {
          http::response<http::string_body> res{http::status::not_found, req.version()};
          res.keep_alive(false);
          res.body() = "no websocket endpoint here\n";
          res.prepare_payload();
          http::write(socket, res);
        } else {
          websocket::stream<tcp::socket&> ws(socket);
          ws.accept(req);
          WebSocketChannel channel(ws);
          const auto index = counter.fetch_add(1);
          const auto id = "session-" + std::to_string(index);
          auto result = run_session(*agent, channel, id, index, options.defaults, options.log_dir);
          {
            std::lock_guard lock(mutex);
            results.push_back(result);
          }
          beast::error_code ec;
          ws.close(websocket::close_code::normal, ec);
        }
      } else {
        serve_file(socket, req);
      }
    } catch (const std::exception&) {
      // Peer went away mid-request; nothing to report.
    }
    beast::error_code ec;
    socket.shutdown(tcp::socket::shutdown_both, ec);
    std::lock_guard lock(mutex);
    std::erase(open_sockets, socket.native_handle());
  }
};

Server::Server(std::shared_ptr<const harness::Agent> agent, ServerOptions options) : impl_(std::make_unique<Impl>()) {
  if (!harness::risk_stats(*agent)) {
    throw std::invalid_argument("serve: the agent needs an ensemble or MC dropout for value estimates");
  }
  impl_->agent = std::move(agent);
  impl_->options = std::move(options);
}

Server::~Server() { stop(); }

void Server::start() {
  auto& d = *impl_;
  const tcp::endpoint endpoint(asio::ip::make_address(d.options.address), d.options.port);
  d.acceptor.open(endpoint.protocol());
  d.acceptor.set_option(asio::socket_base::reuse_address(true));
  d.acceptor.bind(endpoint);
  d.acceptor.listen();
  port_ = d.acceptor.local_endpoint().port();
  d.accept_thread = std::thread([&d] {
    while (!d.stopping) {
      tcp::socket socket(d.ioc);
      beast::error_code ec;
      d.acceptor.accept(socket, ec);
      if (d.stopping) break;
      if (ec) continue;
      std::lock_guard lock(d.mutex);
      d.connections.emplace_back([&d, s = std::move(socket)]() mutable { d.handle(std::move(s)); });
    }
  });
}

void Server::stop() {
  auto& d = *impl_;
  if (!d.accept_thread.joinable() || d.stopping.exchange(true)) return;
  // Wake the blocking accept with a throwaway connection.
  try {
    tcp::socket poke(d.ioc);
    poke.connect(tcp::endpoint(asio::ip::make_address(d.options.address == "0.0.0.0" ? "127.0.0.1" : d.options.address),
                               port_));
  } catch (const std::exception&) {
  }
  d.accept_thread.join();
  {
    std::lock_guard lock(d.mutex);
    for (int fd : d.open_sockets) ::shutdown(fd, SHUT_RDWR);
  }
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(d.mutex);
    threads.swap(d.connections);
  }
  for (auto& t : threads) t.join();
  beast::error_code ec;
  d.acceptor.close(ec);
}

std::vector<SessionResult> Server::results() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->results;
}

}  // namespace safegen::session
