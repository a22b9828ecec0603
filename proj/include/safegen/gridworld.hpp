#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "safegen/env.hpp"

namespace safegen::grid {

// 5x5 playfield surrounded by a one-cell wall border: a 7x7 board.
inline constexpr int kInterior = 5;
inline constexpr int kBoard = kInterior + 2;
inline constexpr int kCells = kBoard * kBoard;
inline constexpr int kMaxSteps = 50;
inline constexpr int kActionCount = 4;
inline constexpr int kObservationSize = kCells * 3;

struct Cell {
  int row = 0;
  int col = 0;

  friend bool operator==(const Cell&, const Cell&) = default;
};

inline int cell_index(Cell c) { return c.row * kBoard + c.col; }
inline bool is_interior(Cell c) {
  return c.row >= 1 && c.row <= kInterior && c.col >= 1 && c.col <= kInterior;
}

enum class Action { Up, Down, Left, Right };

enum class ObservationMode { Full, Reveal };

struct GridLayout {
  std::uint64_t seed = 0;
  Cell agent_start;
  Cell goal;
  Cell lava;
};

struct GridState {
  Cell agent;
  std::array<bool, kCells> revealed{};
  int steps_elapsed = 0;
  bool terminal = false;
};

struct GridTransition {
  GridState next;
  double reward = 0.0;
  bool terminal = false;
  bool catastrophe = false;
  bool solved = false;
  bool timeout = false;
};

// Agent, goal and lava drawn uniformly without replacement from the 25
// interior cells.
GridLayout sample_layout(std::uint64_t layout_seed);

GridState initial_state(const GridLayout& layout);

// revealed := revealed | (3x3 neighbourhood of pos, intersected with the board)
GridState update_reveal(const GridState& state, Cell new_agent_pos);

// Throws std::logic_error if `state` is already terminal.
GridTransition grid_step(const GridLayout& layout, const GridState& state, Action action);

// 7x7 cells, one RGB triple each, row-major, channels last. 147 values.
std::vector<double> render_observation(const GridLayout& layout, const GridState& state,
                                       ObservationMode mode);

// Glyphs: A agent, G goal, L lava, # wall, . floor, ? masked.
std::string render_ascii(const GridLayout& layout, const GridState& state, ObservationMode mode);

nlohmann::json to_json(const GridLayout& layout);

class GridWorldEnv final : public Environment {
 public:
  GridWorldEnv(const GridLayout& layout, ObservationMode mode);
  explicit GridWorldEnv(const EnvironmentConfig& config);

  EnvironmentConfig config() const override;
  int action_count() const override { return kActionCount; }
  int observation_size() const override { return kObservationSize; }
  int max_steps() const override { return kMaxSteps; }
  int steps_elapsed() const override { return state_.steps_elapsed; }
  bool terminal() const override { return state_.terminal; }
  std::vector<double> observe() const override;
  StepResult step(int action) override;
  std::unique_ptr<Environment> clone() const override;

  const GridLayout& layout() const { return layout_; }
  const GridState& state() const { return state_; }
  ObservationMode mode() const { return mode_; }

 private:
  GridLayout layout_;
  ObservationMode mode_;
  GridState state_;
};

}  // namespace safegen::grid
