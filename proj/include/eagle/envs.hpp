#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "eagle/image.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle::envs {

using Vec2 = std::array<double, 2>;
using Rgb = std::array<std::uint8_t, 3>;
using Action = std::array<double, 2>;

enum class Task { PointReach, PointPush };

Task task_from_string(const std::string& s);
std::string task_to_string(Task t);

struct DistractorState {
  Vec2 pos{0, 0};
  Vec2 vel{0, 0};
  double radius = 0.0;
  Rgb color{0, 0, 0};  // canonical color; variants may recolor at render time
};

// Privileged state. Block fields are used by PointPush only (zero otherwise).
struct EnvState {
  Vec2 agent_pos{0, 0};
  Vec2 agent_vel{0, 0};
  Vec2 goal_pos{0, 0};
  Vec2 block_pos{0, 0};
  Vec2 block_vel{0, 0};
  std::vector<DistractorState> distractors;
};

bool states_equal(const EnvState& a, const EnvState& b);

// Flat feature vector consumed by the state-based expert.
std::vector<double> state_features(const EnvState& s, Task task, int distractor_count);
int state_dim(Task task, int distractor_count);

enum class BackgroundKind { SolidColor, ProceduralTexture, ImageFromDirectory, AnimatedNoise };

BackgroundKind background_from_string(const std::string& s);
std::string background_to_string(BackgroundKind k);

struct VisualVariant {
  int variant_id = 0;
  BackgroundKind background = BackgroundKind::SolidColor;
  std::uint64_t background_seed = 0;
  std::vector<Rgb> palette;             // background colors
  std::vector<Rgb> distractor_palette;  // overrides canonical distractor colors when nonempty
};

bool variants_equal(const VisualVariant& a, const VisualVariant& b);

// The fixed variant used when training without an explicit suite: dark solid
// background, canonical distractor colors.
VisualVariant canonical_variant();

struct EnvConfig {
  Task task = Task::PointReach;
  int height = 84;
  int width = 84;
  int frame_stack = 3;
  int distractor_count = 2;
  int horizon = 500;
  double dt = 0.05;
  double accel_gain = 2.0;
  double ctrl_cost = 0.1;
  bool render = true;  // false: state-only stepping, obs tensors come back empty
  std::string image_background_dir;  // required for ImageFromDirectory variants
};

struct StepResult {
  Tensor<float> obs;
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

class PointEnv {
 public:
  PointEnv(EnvConfig cfg, VisualVariant variant);

  std::pair<Tensor<float>, EnvState> reset(std::uint64_t seed);
  StepResult step(const Action& action);

  // Binary (H, W) map of agent/goal (and block/target for PointPush) pixels.
  Tensor<std::uint8_t> ground_truth_mask() const;

  const EnvState& state() const;
  int steps_taken() const { return t_; }
  const EnvConfig& config() const { return cfg_; }
  const VisualVariant& variant() const { return variant_; }

  // Pure rendering: one (3, H, W) frame of `state` at time index `frame_idx`
  // (the index only matters for animated backgrounds).
  img::Image render_state(const EnvState& s, int frame_idx) const;
  img::Image render_sprites_only(const EnvState& s) const;  // sprites on black, for oracles
  img::Image last_frame() const;

  double reward_for(const EnvState& s, const Action& clipped_action) const;
  bool success(const EnvState& s) const;

  static constexpr double kAgentRadius = 0.07;
  static constexpr double kGoalRadius = 0.06;
  static constexpr double kBlockRadius = 0.065;
  static constexpr double kSuccessDist = 0.07;

 private:
  img::Image render_background(int frame_idx) const;
  Tensor<float> stacked_obs() const;
  void push_frame();

  EnvConfig cfg_;
  VisualVariant variant_;
  EnvState state_;
  Rng rng_;
  std::deque<img::Image> frames_;
  std::vector<img::Image> background_images_;
  int t_ = 0;
  bool ready_ = false;
};

// Disjoint train/test variant suites: test palettes and texture seeds never
// overlap the train side. Same seed -> identical suite.
std::pair<std::vector<VisualVariant>, std::vector<VisualVariant>> make_variant_suite(
    int n_train, int n_test, std::uint64_t seed);

void save_variant_suite(const std::string& path, const std::vector<VisualVariant>& train,
                        const std::vector<VisualVariant>& test);
std::pair<std::vector<VisualVariant>, std::vector<VisualVariant>> load_variant_suite(
    const std::string& path);

}  // namespace eagle::envs
