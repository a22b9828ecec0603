#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "safegen/env.hpp"

namespace safegen::lava {

inline constexpr int kWidth = 32;
inline constexpr int kSpawnColumn = 1;
inline constexpr int kMaxSteps = 1000;
inline constexpr int kActionCount = 6;
inline constexpr double kJumpVelocity = 1.2;  // v0, tiles/step
inline constexpr double kGravity = 0.4;       // tiles/step^2
inline constexpr double kLandEpsilon = 1e-9;
inline constexpr double kCoinReward = 5.0;
inline constexpr double kFailReward = -5.0;

inline constexpr int kWindowColumns = 9;
inline constexpr int kWindowRows = 6;
inline constexpr int kTileKinds = 4;  // Ground, Lava, Air, Coin
inline constexpr int kObservationSize = kWindowColumns * kWindowRows * kTileKinds + 3;

enum class Terrain : std::uint8_t { Ground, Lava };

enum class Action { NoOp, Jump, JumpRight, JumpLeft, Right, Left };

struct LavaRunLayout {
  std::uint64_t seed = 0;
  int width = kWidth;
  std::vector<Terrain> ground_profile;
  int coin_column = kWidth - 1;

  Terrain at(int column) const {
    if (column < 0 || column >= width) return Terrain::Ground;
    return ground_profile[static_cast<std::size_t>(column)];
  }
};

struct LavaRunState {
  double x = kSpawnColumn;
  double y = 0.0;
  double vy = 0.0;
  double vx_air = 0.0;
  bool grounded = true;
  int steps_elapsed = 0;
  bool terminal = false;

  int column() const;
};

struct LavaRunTransition {
  LavaRunState next;
  double reward = 0.0;
  bool terminal = false;
  bool catastrophe = false;
  bool solved = false;
  bool timeout = false;
};

// Width 32, columns 0..2 Ground, 2-4 pits of width 1-3 separated by at least
// two Ground tiles, coin on the last column. Layouts whose coin cannot be
// reached under the jump physics are redrawn from the same seeded stream.
LavaRunLayout sample_lavarun(std::uint64_t layout_seed);

// Builds a layout from a profile string of 'G' (ground) and 'L' (lava); the
// coin sits on the last column.
LavaRunLayout layout_from_profile(const std::string& profile, std::uint64_t seed = 0);

LavaRunState spawn_state();

// Throws std::logic_error if `state` is already terminal.
LavaRunTransition lavarun_step(const LavaRunLayout& layout, const LavaRunState& state, Action action);

// Egocentric 9x6 one-hot tile window (216 values) followed by
// [y, vy, grounded]. Off-map columns read as Ground.
std::vector<double> render_lavarun_observation(const LavaRunLayout& layout, const LavaRunState& state);

// Shortest action sequence from `state` to the coin that never touches lava,
// found by breadth-first search over the step function.
std::optional<std::vector<Action>> plan_to_coin(const LavaRunLayout& layout, const LavaRunState& state);

// First action of plan_to_coin, or NoOp when no safe plan exists.
Action safe_action(const LavaRunLayout& layout, const LavaRunState& state);

std::string render_ascii(const LavaRunLayout& layout, const LavaRunState& state);
std::string profile_string(const LavaRunLayout& layout);
nlohmann::json to_json(const LavaRunLayout& layout);

class LavaRunEnv final : public Environment {
 public:
  explicit LavaRunEnv(LavaRunLayout layout);
  explicit LavaRunEnv(const EnvironmentConfig& config);

  EnvironmentConfig config() const override { return {EnvKind::LavaRun, layout_.seed}; }
  int action_count() const override { return kActionCount; }
  int observation_size() const override { return kObservationSize; }
  int max_steps() const override { return kMaxSteps; }
  int steps_elapsed() const override { return state_.steps_elapsed; }
  bool terminal() const override { return state_.terminal; }
  std::vector<double> observe() const override;
  StepResult step(int action) override;
  std::unique_ptr<Environment> clone() const override;

  const LavaRunLayout& layout() const { return layout_; }
  const LavaRunState& state() const { return state_; }

 private:
  LavaRunLayout layout_;
  LavaRunState state_;
};

}  // namespace safegen::lava
