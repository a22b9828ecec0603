#include "safegen/gridworld.hpp"

#include <stdexcept>

#include "safegen/rng.hpp"

namespace safegen::grid {
namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kAgentColor{0.0, 0.0, 1.0};
constexpr Rgb kGoalColor{0.0, 1.0, 0.0};
constexpr Rgb kLavaColor{1.0, 0.0, 0.0};
constexpr Rgb kWallColor{0.5, 0.5, 0.5};
constexpr Rgb kFloorColor{1.0, 1.0, 1.0};
constexpr Rgb kMaskColor{0.0, 0.0, 0.0};

Cell interior_cell(std::uint64_t i) {
  return Cell{1 + static_cast<int>(i) / kInterior, 1 + static_cast<int>(i) % kInterior};
}

Cell moved(Cell c, Action a) {
  switch (a) {
    case Action::Up: return {c.row - 1, c.col};
    case Action::Down: return {c.row + 1, c.col};
    case Action::Left: return {c.row, c.col - 1};
    case Action::Right: return {c.row, c.col + 1};
  }
  return c;
}

enum class Role { Agent, Goal, Lava, Wall, Floor };

Role role_at(const GridLayout& layout, const GridState& state, Cell c) {
  if (c == state.agent) return Role::Agent;
  if (c == layout.goal) return Role::Goal;
  if (c == layout.lava) return Role::Lava;
  if (!is_interior(c)) return Role::Wall;
  return Role::Floor;
}

Rgb color_of(Role role) {
  switch (role) {
    case Role::Agent: return kAgentColor;
    case Role::Goal: return kGoalColor;
    case Role::Lava: return kLavaColor;
    case Role::Wall: return kWallColor;
    case Role::Floor: return kFloorColor;
  }
  return kMaskColor;
}

char glyph_of(Role role) {
  switch (role) {
    case Role::Agent: return 'A';
    case Role::Goal: return 'G';
    case Role::Lava: return 'L';
    case Role::Wall: return '#';
    case Role::Floor: return '.';
  }
  return '?';
}

bool visible(const GridState& state, ObservationMode mode, Cell c) {
  return mode == ObservationMode::Full || state.revealed[cell_index(c)];
}

}  // namespace

GridLayout sample_layout(std::uint64_t layout_seed) {
  Rng rng(layout_seed);
  std::array<std::uint64_t, kInterior * kInterior> cells{};
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  // Partial Fisher-Yates: the first three slots are a uniform draw without
  // replacement.
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t j = i + rng.uniform_int(cells.size() - i);
    std::swap(cells[i], cells[j]);
  }
  GridLayout layout;
  layout.seed = layout_seed;
  layout.agent_start = interior_cell(cells[0]);
  layout.goal = interior_cell(cells[1]);
  layout.lava = interior_cell(cells[2]);
  return layout;
}

GridState update_reveal(const GridState& state, Cell pos) {
  GridState next = state;
  next.agent = pos;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      const Cell c{pos.row + dr, pos.col + dc};
      if (c.row < 0 || c.row >= kBoard || c.col < 0 || c.col >= kBoard) continue;
      next.revealed[cell_index(c)] = true;
    }
  }
  return next;
}

GridState initial_state(const GridLayout& layout) {
  GridState state;
  state.agent = layout.agent_start;
  return update_reveal(state, layout.agent_start);
}

GridTransition grid_step(const GridLayout& layout, const GridState& state, Action action) {
  if (state.terminal) throw std::logic_error("grid_step called on a terminal state");

  Cell target = moved(state.agent, action);
  if (!is_interior(target)) target = state.agent;

  GridTransition out;
  out.next = update_reveal(state, target);
  out.next.steps_elapsed = state.steps_elapsed + 1;

  if (target == layout.goal) {
    out.reward = 1.0;
    out.terminal = true;
    out.solved = true;
  } else if (target == layout.lava) {
    out.reward = -1.0;
    out.terminal = true;
    out.catastrophe = true;
  } else if (out.next.steps_elapsed >= kMaxSteps) {
    out.terminal = true;
    out.timeout = true;
  }
  out.next.terminal = out.terminal;
  return out;
}

std::vector<double> render_observation(const GridLayout& layout, const GridState& state,
                                       ObservationMode mode) {
  std::vector<double> obs(kObservationSize, 0.0);
  for (int r = 0; r < kBoard; ++r) {
    for (int c = 0; c < kBoard; ++c) {
      const Cell cell{r, c};
      const Rgb rgb = visible(state, mode, cell) ? color_of(role_at(layout, state, cell)) : kMaskColor;
      const std::size_t base = static_cast<std::size_t>(cell_index(cell)) * 3;
      obs[base + 0] = rgb.r;
      obs[base + 1] = rgb.g;
      obs[base + 2] = rgb.b;
    }
  }
  return obs;
}

std::string render_ascii(const GridLayout& layout, const GridState& state, ObservationMode mode) {
  std::string out;
  out.reserve(kBoard * (kBoard + 1));
  for (int r = 0; r < kBoard; ++r) {
    for (int c = 0; c < kBoard; ++c) {
      const Cell cell{r, c};
      out.push_back(visible(state, mode, cell) ? glyph_of(role_at(layout, state, cell)) : '?');
    }
    out.push_back('\n');
  }
  return out;
}

nlohmann::json to_json(const GridLayout& layout) {
  auto cell = [](Cell c) { return nlohmann::json::array({c.row, c.col}); };
  return {{"seed", layout.seed},
          {"agent", cell(layout.agent_start)},
          {"goal", cell(layout.goal)},
          {"lava", cell(layout.lava)}};
}

GridWorldEnv::GridWorldEnv(const GridLayout& layout, ObservationMode mode)
    : layout_(layout), mode_(mode), state_(initial_state(layout)) {}

GridWorldEnv::GridWorldEnv(const EnvironmentConfig& config)
    : GridWorldEnv(sample_layout(config.layout_seed),
                   config.kind == EnvKind::GridReveal ? ObservationMode::Reveal
                                                      : ObservationMode::Full) {
  if (config.kind == EnvKind::LavaRun) throw std::invalid_argument("not a gridworld config");
}

EnvironmentConfig GridWorldEnv::config() const {
  return {mode_ == ObservationMode::Reveal ? EnvKind::GridReveal : EnvKind::GridFull, layout_.seed};
}

std::vector<double> GridWorldEnv::observe() const { return render_observation(layout_, state_, mode_); }

StepResult GridWorldEnv::step(int action) {
  if (action < 0 || action >= kActionCount) throw std::out_of_range("gridworld action out of range");
  const GridTransition t = grid_step(layout_, state_, static_cast<Action>(action));
  state_ = t.next;
  return StepResult{observe(), t.reward, t.terminal, t.catastrophe};
}

std::unique_ptr<Environment> GridWorldEnv::clone() const { return std::make_unique<GridWorldEnv>(*this); }

}  // namespace safegen::grid
