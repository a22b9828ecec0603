#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <thread>

#include "doctest.h"
#include "safegen/session.hpp"

using namespace safegen;
using namespace safegen::session;
using nlohmann::json;
namespace fs = std::filesystem;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("safegen_session_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

harness::Agent test_agent() {
  harness::Agent a;
  a.method = harness::Method::EnsMeanPPO;
  a.action_count = lava::kActionCount;
  const std::vector<int> hidden{16};
  for (std::uint64_t s : {11, 12, 13}) {
    a.pv_members.push_back(ppo::make_policy_value_net(lava::kObservationSize, hidden, lava::kActionCount, s));
  }
  return a;
}

// Client logic runs inside send(): every server message may queue replies.
// receive() on an empty queue reports a disconnect.
class ScriptedChannel final : public Channel {
 public:
  using Client = std::function<void(const json& message, std::deque<json>& replies)>;

  explicit ScriptedChannel(Client client) : client_(std::move(client)) {}

  bool send(const json& message) override {
    sent.push_back(message);
    client_(message, replies_);
    return true;
  }
  std::optional<json> receive() override {
    if (replies_.empty()) return std::nullopt;
    auto m = replies_.front();
    replies_.pop_front();
    return m;
  }
  void queue(json m) { replies_.push_back(std::move(m)); }

  std::vector<json> sent;

 private:
  Client client_;
  std::deque<json> replies_;
};

json start(double threshold, std::uint64_t layout_seed, std::uint64_t seed = 3) {
  return {{"v", 1}, {"type", "start"}, {"threshold", threshold_to_json(threshold)}, {"layout_seed", layout_seed},
          {"seed", seed}};
}

lava::LavaRunState state_from_frame(const json& frame) {
  const auto& a = frame.at("agent");
  lava::LavaRunState s;
  s.x = a.at("x").get<double>();
  s.y = a.at("y").get<double>();
  s.vy = a.at("vy").get<double>();
  s.vx_air = a.at("vx_air").get<double>();
  s.grounded = a.at("grounded").get<bool>();
  s.steps_elapsed = a.at("steps_elapsed").get<int>();
  return s;
}

// Overrides every request with the first step of a lava-free plan.
ScriptedChannel::Client oracle_client() {
  auto layout = std::make_shared<lava::LavaRunLayout>();
  return [layout](const json& m, std::deque<json>& replies) {
    if (m.at("type") == "session") *layout = lava::sample_lavarun(m.at("layout").at("seed").get<std::uint64_t>());
    if (m.at("type") == "frame" && m.at("intervention_requested").get<bool>()) {
      const int action = static_cast<int>(lava::safe_action(*layout, state_from_frame(m)));
      replies.push_back({{"v", 1}, {"type", "override"}, {"step", m.at("step")}, {"action", action}});
    }
  };
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

std::vector<json> of_type(const std::vector<json>& messages, const std::string& type) {
  std::vector<json> out;
  for (const auto& m : messages) {
    if (m.at("type") == type) out.push_back(m);
  }
  return out;
}

}  // namespace

TEST_CASE("thresholds encode infinities as strings") {
  CHECK(threshold_to_json(kInf) == "inf");
  CHECK(threshold_to_json(-kInf) == "-inf");
  CHECK(threshold_to_json(0.25) == 0.25);
  CHECK(threshold_from_json("inf") == kInf);
  CHECK(threshold_from_json(json(-1.5)) == -1.5);
  CHECK_THROWS_AS(threshold_from_json("high"), std::invalid_argument);
  CHECK(action_names().size() == static_cast<std::size_t>(lava::kActionCount));
}

TEST_CASE("an infinite threshold never asks for help") {
  const auto dir = fresh_dir("autonomous");
  ScriptedChannel ch([](const json&, std::deque<json>&) {});
  ch.queue(start(kInf, 5));
  const auto r = run_session(test_agent(), ch, "s", 0, {}, dir);
  CHECK(r.outcome != "Aborted");
  CHECK(r.interventions == 0);
  const auto frames = of_type(ch.sent, "frame");
  CHECK(static_cast<int>(frames.size()) == r.length);
  CHECK(ch.sent.front().at("type") == "session");
  CHECK(ch.sent.back().at("type") == "end");
  CHECK(ch.sent.back().at("outcome") == r.outcome);
  for (const auto& f : frames) {
    CHECK(f.at("v") == 1);
    CHECK_FALSE(f.at("intervention_requested").get<bool>());
    CHECK(f.at("tiles").size() == 5);
    CHECK(f.at("member_values").size() == 3);
    CHECK(f.at("u").size() == 3);
    // Population std of the member values shown.
    double m = 0, sq = 0;
    for (const auto& v : f.at("member_values")) m += v.get<double>() / 3;
    for (const auto& v : f.at("member_values")) sq += (v.get<double>() - m) * (v.get<double>() - m) / 3;
    CHECK(f.at("sigma").get<double>() == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
    CHECK(f.at("u").at("mean+std").get<double>() ==
          doctest::Approx(-f.at("mu").get<double>() + f.at("sigma").get<double>()));
  }
  // Each frame reports the action executed at the step before it.
  for (std::size_t i = 1; i < frames.size(); ++i) {
    CHECK(frames[i].at("previous").at("action") == frames[i - 1].at("agent_action"));
    CHECK(frames[i].at("previous").at("chosen_by") == "agent");
  }
}

TEST_CASE("declined requests execute the agent's action and overrides are echoed") {
  const auto dir = fresh_dir("decline");
  ScriptedChannel ch([&](const json& m, std::deque<json>& replies) {
    if (m.at("type") != "frame") return;
    const int step = m.at("step").get<int>();
    if (step % 3 == 0) {
      replies.push_back({{"v", 1}, {"type", "override"}, {"step", step}, {"action", 2}});
    } else {
      replies.push_back({{"v", 1}, {"type", "decline"}, {"step", step}});
    }
  });
  ch.queue(start(-kInf, 9));
  const auto r = run_session(test_agent(), ch, "s", 0, {}, dir);
  CHECK(r.interventions == r.length);
  const auto frames = of_type(ch.sent, "frame");
  const auto acks = of_type(ch.sent, "ack");
  REQUIRE(acks.size() == frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const bool overridden = i % 3 == 0;
    CHECK(acks[i].at("step") == frames[i].at("step"));
    CHECK(acks[i].at("chosen_by") == (overridden ? "operator" : "agent"));
    CHECK(acks[i].at("action") == (overridden ? json(2) : frames[i].at("agent_action")));
    if (i + 1 < frames.size()) CHECK(frames[i + 1].at("previous").at("action") == acks[i].at("action"));
  }
  // The session log records who chose each action.
  const auto log = read_jsonl(r.log_path);
  const auto steps = of_type(log, "step");
  REQUIRE(steps.size() == frames.size());
  CHECK(steps[0].at("chosen_by") == "operator");
  CHECK(steps[1].at("chosen_by") == "agent");
  CHECK(steps[1].at("action") == steps[1].at("agent_action"));

  const auto replay = replay_session(test_agent(), r.log_path);
  CHECK(replay.matches_log);
  CHECK(replay.outcome == r.outcome);
  CHECK(replay.length == r.length);
}

TEST_CASE("invalid operator messages are refused and the request stays open") {
  const auto dir = fresh_dir("nack");
  bool first = true;
  ScriptedChannel ch([&](const json& m, std::deque<json>& replies) {
    if (m.at("type") != "frame" || !first) {
      if (m.at("type") == "frame") replies.push_back({{"v", 1}, {"type", "decline"}, {"step", m.at("step")}});
      return;
    }
    first = false;
    const int step = m.at("step").get<int>();
    replies.push_back(json("not json at all"));
    replies.push_back({{"v", 2}, {"type", "decline"}, {"step", step}});
    replies.push_back({{"v", 1}, {"type", "decline"}, {"step", step + 1}});
    replies.push_back({{"v", 1}, {"type", "override"}, {"step", step}, {"action", 6}});
    replies.push_back({{"v", 1}, {"type", "override"}, {"step", step}});
    replies.push_back({{"v", 1}, {"type", "start"}});
    replies.push_back({{"v", 1}, {"type", "override"}, {"step", step}, {"action", 4}});
  });
  ch.queue({{"v", 1}, {"type", "frame"}});  // wrong type before start
  ch.queue({{"v", 1}, {"type", "start"}, {"variant", "median"}});
  ch.queue(start(-kInf, 2));
  const auto r = run_session(test_agent(), ch, "s", 0, {}, dir);
  const auto nacks = of_type(ch.sent, "nack");
  CHECK(nacks.size() == 8);
  const auto acks = of_type(ch.sent, "ack");
  REQUIRE(!acks.empty());
  CHECK(acks[0].at("action") == 4);
  CHECK(acks[0].at("chosen_by") == "operator");
  CHECK(r.overrides == 1);
}

TEST_CASE("a disconnect aborts and is logged, and replay agrees") {
  const auto dir = fresh_dir("disconnect");
  int frames = 0;
  ScriptedChannel ch([&](const json& m, std::deque<json>& replies) {
    if (m.at("type") == "frame" && ++frames < 4) replies.push_back({{"v", 1}, {"type", "decline"}, {"step", m.at("step")}});
  });
  ch.queue(start(-kInf, 4));
  const auto r = run_session(test_agent(), ch, "s", 0, {}, dir);
  CHECK(r.outcome == "Aborted");
  CHECK(r.length == 3);
  const auto log = read_jsonl(r.log_path);
  CHECK(log.back().at("outcome") == "Aborted");
  CHECK(of_type(log, "step").size() == 3);
  CHECK(replay_session(test_agent(), r.log_path).matches_log);

  ScriptedChannel silent([](const json&, std::deque<json>&) {});
  const auto r0 = run_session(test_agent(), silent, "t", 0, {}, dir);
  CHECK(r0.outcome == "Aborted");
  CHECK(r0.length == 0);
  CHECK(replay_session(test_agent(), r0.log_path).matches_log);
}

TEST_CASE("replay detects a tampered log") {
  const auto dir = fresh_dir("tamper");
  ScriptedChannel ch([](const json&, std::deque<json>&) {});
  ch.queue(start(kInf, 8));
  const auto r = run_session(test_agent(), ch, "s", 0, {}, dir);
  auto lines = read_jsonl(r.log_path);
  REQUIRE(lines.size() > 3);
  lines[1]["agent_action"] = (lines[1]["agent_action"].get<int>() + 1) % 6;
  std::ofstream out(r.log_path);
  for (const auto& l : lines) out << l.dump() << '\n';
  out.close();
  CHECK_FALSE(replay_session(test_agent(), r.log_path).matches_log);
}

TEST_CASE("an oracle operator prevents every catastrophe over 100 sessions") {
  const auto dir = fresh_dir("oracle");
  const auto agent = test_agent();
  int catastrophes = 0, solved = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    REQUIRE(lava::plan_to_coin(lava::sample_lavarun(1000 + i), lava::spawn_state()).has_value());
    ScriptedChannel ch(oracle_client());
    ch.queue(start(-kInf, 1000 + i, i));
    const auto r = run_session(agent, ch, "o" + std::to_string(i), i, {}, dir);
    catastrophes += r.outcome == "Catastrophe";
    solved += r.outcome == "Solved";
  }
  CHECK(catastrophes == 0);
  CHECK(solved == 100);
}

TEST_CASE("asset paths cannot escape the root") {
  const auto root = fresh_dir("assets");
  const auto outside = fresh_dir("outside");
  std::ofstream(root / "index.html") << "<html></html>";
  fs::create_directories(root / "js");
  std::ofstream(root / "js" / "app.js") << "x";
  std::ofstream(outside / "secret.txt") << "s";
  fs::create_symlink(outside / "secret.txt", root / "link.txt");

  CHECK(resolve_asset(root, "/") == fs::canonical(root / "index.html"));
  CHECK(resolve_asset(root, "/js/app.js?v=3") == fs::canonical(root / "js" / "app.js"));
  CHECK(resolve_asset(root, "/js/%61pp.js") == fs::canonical(root / "js" / "app.js"));
  CHECK_FALSE(resolve_asset(root, "/../safegen_session_outside/secret.txt"));
  CHECK_FALSE(resolve_asset(root, "/%2e%2e/safegen_session_outside/secret.txt"));
  CHECK_FALSE(resolve_asset(root, "/js/..%2F..%2Fsafegen_session_outside/secret.txt"));
  CHECK_FALSE(resolve_asset(root, "/link.txt"));
  CHECK_FALSE(resolve_asset(root, "/missing.js"));
  CHECK_FALSE(resolve_asset(root, "relative"));
  CHECK(mime_type("a.js") == "text/javascript");
  CHECK(mime_type("a.unknown") == "application/octet-stream");
}

namespace {

http::response<http::string_body> http_request(unsigned short port, http::verb verb, const std::string& target) {
  asio::io_context ioc;
  tcp::socket socket(ioc);
  socket.connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), port));
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "localhost");
  http::write(socket, req);
  beast::flat_buffer buffer;
  http::response_parser<http::string_body> parser;
  parser.skip(verb == http::verb::head);  // HEAD replies carry a length but no body
  http::read(socket, buffer, parser);
  return parser.release();
}

struct WsClient {
  asio::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};

  explicit WsClient(unsigned short port) {
    ws.next_layer().connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), port));
    ws.handshake("localhost", "/ws");
  }
  void send(const json& m) { ws.write(asio::buffer(m.dump() + "\n")); }
  json receive() {
    beast::flat_buffer b;
    ws.read(b);
    const auto text = beast::buffers_to_string(b.data());
    CHECK(text.back() == '\n');
    return json::parse(text);
  }
};

}  // namespace

TEST_CASE("server: static assets and websocket sessions") {
  const auto assets = fresh_dir("server_assets");
  const auto logs = fresh_dir("server_logs");
  std::ofstream(assets / "index.html") << "<!doctype html><title>console</title>";
  ServerOptions options;
  options.assets = assets;
  options.log_dir = logs;
  options.defaults.threshold = kInf;
  Server server(std::make_shared<const harness::Agent>(test_agent()), options);
  server.start();
  REQUIRE(server.port() != 0);

  SUBCASE("http") {
    const auto index = http_request(server.port(), http::verb::get, "/");
    CHECK(index.result() == http::status::ok);
    CHECK(index.body() == "<!doctype html><title>console</title>");
    CHECK(index[http::field::content_type] == "text/html; charset=utf-8");
    CHECK(http_request(server.port(), http::verb::get, "/../etc/passwd").result() == http::status::not_found);
    CHECK(http_request(server.port(), http::verb::get, "/nope.js").result() == http::status::not_found);
    CHECK(http_request(server.port(), http::verb::post, "/").result() == http::status::method_not_allowed);
    const auto head = http_request(server.port(), http::verb::head, "/index.html");
    CHECK(head.result() == http::status::ok);
  }

  SUBCASE("autonomous session over the wire") {
    WsClient client(server.port());
    client.send({{"v", 1}, {"type", "start"}, {"layout_seed", 21}});
    CHECK(client.receive().at("type") == "session");
    int frames = 0;
    json m;
    while ((m = client.receive()).at("type") == "frame") ++frames;
    CHECK(m.at("type") == "end");
    CHECK(m.at("length") == frames);
    client.ws.close(websocket::close_code::normal);
  }

  SUBCASE("oracle overrides over the wire, two clients at once") {
    auto run_client = [&](std::uint64_t layout, int& catastrophes) {
      WsClient client(server.port());
      client.send(start(-kInf, layout));
      const auto session = client.receive();
      const auto lay = lava::sample_lavarun(session.at("layout").at("seed").get<std::uint64_t>());
      for (;;) {
        const auto m = client.receive();
        if (m.at("type") == "end") {
          catastrophes += m.at("outcome") == "Catastrophe";
          break;
        }
        if (m.at("type") == "frame") {
          const int a = static_cast<int>(lava::safe_action(lay, state_from_frame(m)));
          client.send({{"v", 1}, {"type", "override"}, {"step", m.at("step")}, {"action", a}});
        }
      }
    };
    int cat_a = 0, cat_b = 0;
    std::thread t([&] {
      for (std::uint64_t s = 0; s < 3; ++s) run_client(300 + s, cat_a);
    });
    for (std::uint64_t s = 0; s < 3; ++s) run_client(400 + s, cat_b);
    t.join();
    CHECK(cat_a + cat_b == 0);
  }

  SUBCASE("client disconnect while a request is pending") {
    {
      WsClient client(server.port());
      client.send(start(-kInf, 7));
      client.receive();
      CHECK(client.receive().at("intervention_requested") == true);
      client.ws.next_layer().close();
    }
    bool aborted = false;
    for (int i = 0; i < 200 && !aborted; ++i) {
      for (const auto& r : server.results()) aborted = aborted || r.outcome == "Aborted";
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    CHECK(aborted);
  }

  server.stop();
}
