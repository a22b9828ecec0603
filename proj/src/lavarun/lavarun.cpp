#include "safegen/lavarun.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <stdexcept>
#include <tuple>

#include "safegen/rng.hpp"

namespace safegen::lava {
namespace {

constexpr int kMinPits = 2;
constexpr int kMaxPits = 4;
constexpr int kMaxPitWidth = 3;
constexpr int kMinSeparation = 2;
constexpr int kFirstPitColumn = 3;
constexpr int kMaxSampleAttempts = 10000;

double clamp_x(double x, int width) { return std::clamp(x, 0.0, static_cast<double>(width - 1)); }

// Steps from takeoff until the agent is back at y <= 0, and the horizontal
// distance covered per unit of vx_air over that flight.
int flight_steps() {
  double y = 0.0;
  double vy = kJumpVelocity;
  int steps = 0;
  do {
    if (steps > 0) vy -= kGravity;
    y += vy;
    ++steps;
  } while (y > kLandEpsilon);
  return steps;
}

// Column-level reachability: walking moves one tile, a jump travels
// flight_steps() tiles and can only land on Ground.
bool coin_reachable(const LavaRunLayout& layout) {
  const int flight = flight_steps();
  std::vector<char> seen(static_cast<std::size_t>(layout.width), 0);
  std::deque<int> frontier{kSpawnColumn};
  seen[kSpawnColumn] = 1;
  while (!frontier.empty()) {
    const int s = frontier.front();
    frontier.pop_front();
    if (s >= layout.coin_column) return true;
    std::vector<int> next;
    if (s + 1 >= layout.coin_column) return true;
    if (layout.at(s + 1) == Terrain::Ground) next.push_back(s + 1);
    if (s > 0 && layout.at(s - 1) == Terrain::Ground) next.push_back(s - 1);
    for (int k = 1; k <= flight; ++k) {
      if (s + k >= layout.coin_column) return true;
    }
    if (layout.at(s + flight) == Terrain::Ground) next.push_back(s + flight);
    const int left_landing = std::max(0, s - flight);
    if (layout.at(left_landing) == Terrain::Ground) next.push_back(left_landing);
    for (int n : next) {
      if (n < 0 || n >= layout.width || seen[static_cast<std::size_t>(n)]) continue;
      seen[static_cast<std::size_t>(n)] = 1;
      frontier.push_back(n);
    }
  }
  return false;
}

std::optional<LavaRunLayout> draw_candidate(Rng& rng, std::uint64_t seed) {
  const int pits = kMinPits + static_cast<int>(rng.uniform_int(kMaxPits - kMinPits + 1));
  std::vector<int> widths(static_cast<std::size_t>(pits));
  int total = 0;
  for (auto& w : widths) {
    w = 1 + static_cast<int>(rng.uniform_int(kMaxPitWidth));
    total += w;
  }
  // Pits live in [kFirstPitColumn, kWidth - 3]; the last two columns stay
  // Ground so the coin column always has a landing tile before it.
  const int region = (kWidth - 2) - kFirstPitColumn;
  const int slack = region - total - kMinSeparation * (pits - 1);
  if (slack < 0) return std::nullopt;

  // Random composition of `slack` into pits + 1 non-negative gaps.
  std::vector<int> cuts(static_cast<std::size_t>(pits));
  for (auto& c : cuts) c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(slack) + 1));
  std::sort(cuts.begin(), cuts.end());

  LavaRunLayout layout;
  layout.seed = seed;
  layout.width = kWidth;
  layout.coin_column = kWidth - 1;
  layout.ground_profile.assign(kWidth, Terrain::Ground);
  int column = kFirstPitColumn;
  int previous_cut = 0;
  for (int i = 0; i < pits; ++i) {
    column += cuts[static_cast<std::size_t>(i)] - previous_cut;
    previous_cut = cuts[static_cast<std::size_t>(i)];
    for (int j = 0; j < widths[static_cast<std::size_t>(i)]; ++j) {
      layout.ground_profile[static_cast<std::size_t>(column++)] = Terrain::Lava;
    }
    column += kMinSeparation;
  }
  return layout;
}

using SearchKey = std::tuple<long, long, long, long, bool>;

SearchKey key_of(const LavaRunState& s) {
  return {std::lround(s.x), std::lround(s.y * 1000.0), std::lround(s.vy * 1000.0), std::lround(s.vx_air),
          s.grounded};
}

}  // namespace

int LavaRunState::column() const { return static_cast<int>(std::lround(x)); }

LavaRunLayout sample_lavarun(std::uint64_t layout_seed) {
  Rng rng(layout_seed);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    auto candidate = draw_candidate(rng, layout_seed);
    if (candidate && coin_reachable(*candidate)) return *candidate;
  }
  throw std::runtime_error("sample_lavarun: no solvable layout found");
}

LavaRunLayout layout_from_profile(const std::string& profile, std::uint64_t seed) {
  if (profile.size() < 2) throw std::invalid_argument("profile too short");
  LavaRunLayout layout;
  layout.seed = seed;
  layout.width = static_cast<int>(profile.size());
  for (char ch : profile) {
    if (ch != 'G' && ch != 'L') throw std::invalid_argument("profile must contain only 'G' and 'L'");
    layout.ground_profile.push_back(ch == 'G' ? Terrain::Ground : Terrain::Lava);
  }
  if (layout.ground_profile.back() != Terrain::Ground) throw std::invalid_argument("last column must be Ground");
  layout.coin_column = layout.width - 1;
  return layout;
}

LavaRunState spawn_state() { return LavaRunState{}; }

LavaRunTransition lavarun_step(const LavaRunLayout& layout, const LavaRunState& state, Action action) {
  if (state.terminal) throw std::logic_error("lavarun_step called on a terminal state");

  LavaRunTransition out;
  LavaRunState& s = out.next;
  s = state;
  s.steps_elapsed += 1;

  if (s.grounded) {
    switch (action) {
      case Action::NoOp: break;
      case Action::Right: s.x = clamp_x(s.x + 1.0, layout.width); break;
      case Action::Left: s.x = clamp_x(s.x - 1.0, layout.width); break;
      case Action::Jump:
      case Action::JumpRight:
      case Action::JumpLeft:
        s.vx_air = action == Action::JumpRight ? 1.0 : action == Action::JumpLeft ? -1.0 : 0.0;
        s.vy = kJumpVelocity;
        s.grounded = false;
        s.x = clamp_x(s.x + s.vx_air, layout.width);
        s.y += s.vy;
        break;
    }
  } else {
    s.vy -= kGravity;
    s.x = clamp_x(s.x + s.vx_air, layout.width);
    s.y += s.vy;
    if (s.y <= kLandEpsilon) {
      s.y = 0.0;
      s.vy = 0.0;
      s.vx_air = 0.0;
      s.grounded = true;
    }
  }

  const int column = s.column();
  if (column >= layout.coin_column) {
    out.reward = kCoinReward;
    out.terminal = true;
    out.solved = true;
  } else if (s.grounded && layout.at(column) == Terrain::Lava) {
    out.reward = kFailReward;
    out.terminal = true;
    out.catastrophe = true;
  } else if (s.steps_elapsed >= kMaxSteps) {
    out.reward = kFailReward;
    out.terminal = true;
    out.timeout = true;
  }
  s.terminal = out.terminal;
  return out;
}

std::vector<double> render_lavarun_observation(const LavaRunLayout& layout, const LavaRunState& state) {
  std::vector<double> obs(kObservationSize, 0.0);
  const int center = state.column();
  for (int dc = 0; dc < kWindowColumns; ++dc) {
    const int column = center - kWindowColumns / 2 + dc;
    for (int row = 0; row < kWindowRows; ++row) {
      int kind = 2;  // Air
      if (row == 0) {
        kind = layout.at(column) == Terrain::Lava ? 1 : 0;
      } else if (row == 1 && column == layout.coin_column) {
        kind = 3;
      }
      obs[static_cast<std::size_t>((dc * kWindowRows + row) * kTileKinds + kind)] = 1.0;
    }
  }
  const std::size_t tail = kWindowColumns * kWindowRows * kTileKinds;
  obs[tail + 0] = state.y;
  obs[tail + 1] = state.vy;
  obs[tail + 2] = state.grounded ? 1.0 : 0.0;
  return obs;
}

std::optional<std::vector<Action>> plan_to_coin(const LavaRunLayout& layout, const LavaRunState& start) {
  if (start.terminal) return std::nullopt;
  struct Node {
    LavaRunState state;
    int parent;
    Action action;
  };
  LavaRunState origin = start;
  origin.steps_elapsed = 0;
  std::vector<Node> nodes{{origin, -1, Action::NoOp}};
  std::map<SearchKey, int> seen{{key_of(origin), 0}};
  constexpr Action kAll[] = {Action::Right, Action::JumpRight, Action::NoOp,
                             Action::Jump,  Action::Left,      Action::JumpLeft};

  for (std::size_t head = 0; head < nodes.size(); ++head) {
    const LavaRunState current = nodes[head].state;
    const int n_actions = current.grounded ? 6 : 1;  // actions are ignored in the air
    for (int i = 0; i < n_actions; ++i) {
      const Action a = kAll[i];
      LavaRunTransition t = lavarun_step(layout, current, current.grounded ? a : Action::NoOp);
      if (t.catastrophe) continue;
      if (t.solved) {
        std::vector<Action> plan{a};
        for (int p = static_cast<int>(head); nodes[static_cast<std::size_t>(p)].parent >= 0;
             p = nodes[static_cast<std::size_t>(p)].parent) {
          plan.push_back(nodes[static_cast<std::size_t>(p)].action);
        }
        std::reverse(plan.begin(), plan.end());
        return plan;
      }
      t.next.steps_elapsed = 0;
      t.next.terminal = false;
      if (seen.emplace(key_of(t.next), static_cast<int>(nodes.size())).second) {
        nodes.push_back({t.next, static_cast<int>(head), a});
      }
    }
  }
  return std::nullopt;
}

Action safe_action(const LavaRunLayout& layout, const LavaRunState& state) {
  auto plan = plan_to_coin(layout, state);
  if (!plan || plan->empty()) return Action::NoOp;
  return plan->front();
}

std::string profile_string(const LavaRunLayout& layout) {
  std::string out;
  for (Terrain t : layout.ground_profile) out.push_back(t == Terrain::Ground ? 'G' : 'L');
  return out;
}

std::string render_ascii(const LavaRunLayout& layout, const LavaRunState& state) {
  constexpr int kRows = 4;
  const int agent_row = std::clamp(static_cast<int>(std::lround(state.y)), 0, kRows - 1);
  std::string out;
  for (int row = kRows - 1; row >= 0; --row) {
    for (int c = 0; c < layout.width; ++c) {
      char ch = ' ';
      if (row == 0 && c == layout.coin_column) ch = 'C';
      if (c == state.column() && row == agent_row) ch = 'A';
      out.push_back(ch);
    }
    out.push_back('\n');
  }
  for (int c = 0; c < layout.width; ++c) out.push_back(layout.at(c) == Terrain::Ground ? '=' : '~');
  out.push_back('\n');
  return out;
}

nlohmann::json to_json(const LavaRunLayout& layout) {
  return {{"seed", layout.seed}, {"profile", profile_string(layout)}, {"coin_column", layout.coin_column}};
}

LavaRunEnv::LavaRunEnv(LavaRunLayout layout) : layout_(std::move(layout)), state_(spawn_state()) {}

LavaRunEnv::LavaRunEnv(const EnvironmentConfig& config) : LavaRunEnv(sample_lavarun(config.layout_seed)) {
  if (config.kind != EnvKind::LavaRun) throw std::invalid_argument("not a lavarun config");
}

std::vector<double> LavaRunEnv::observe() const { return render_lavarun_observation(layout_, state_); }

StepResult LavaRunEnv::step(int action) {
  if (action < 0 || action >= kActionCount) throw std::out_of_range("lavarun action out of range");
  const LavaRunTransition t = lavarun_step(layout_, state_, static_cast<Action>(action));
  state_ = t.next;
  return StepResult{observe(), t.reward, t.terminal, t.catastrophe};
}

std::unique_ptr<Environment> LavaRunEnv::clone() const { return std::make_unique<LavaRunEnv>(*this); }

}  // namespace safegen::lava
