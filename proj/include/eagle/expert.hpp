#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "eagle/autograd.hpp"
#include "eagle/envs.hpp"
#include "eagle/errors.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle::expert {

// --- scripted PD expert ---

struct ScriptedConfig {
  double kp = 4.0;  // a = clip(kp*(target - pos) - kd*vel)
  double kd = 1.5;
  // Push staging: how far behind the block to stand (in contact radii), how
  // tightly aligned with the push line before committing, and the clearance
  // used when routing around the block.
  double stage_margin = 1.25;
  double align_dot = 0.92;
  double detour_margin = 2.1;

  void validate() const {
    if (kp <= 0 || kd < 0) throw ConfigError("scripted expert: bad gains");
    if (stage_margin < 1.0 || detour_margin < 1.0)
      throw ConfigError("scripted expert: margins must be >= 1 contact radius");
    if (align_dot <= 0 || align_dot >= 1) throw ConfigError("scripted expert: bad align_dot");
  }
};

// Closed-form controller on privileged state. Reach: PD straight to the goal.
// Push: route to a staging point behind the block (detouring around it), then
// drive through the block center so the contact normal points at the goal.
class ScriptedExpert {
 public:
  explicit ScriptedExpert(envs::Task task, ScriptedConfig cfg = {});

  envs::Action act(const envs::EnvState& s) const;
  envs::Task task() const { return task_; }
  const ScriptedConfig& config() const { return cfg_; }

 private:
  envs::Vec2 push_target(const envs::EnvState& s) const;

  envs::Task task_;
  ScriptedConfig cfg_;
};

// --- n-step transition buffer over flat state features ---

struct StateTransition {
  std::vector<float> s;
  std::array<float, 2> a{0, 0};
  float ret = 0;       // discounted n-step return
  float discount = 0;  // gamma^k for the bootstrap term
  std::vector<float> s_next;
};

// Accumulates (s, a, r, s') steps and emits n-step transitions; episodes are
// cut at end_episode() (time-limit termination bootstraps through the cut).
// FIFO once `capacity` transitions are stored.
class NStepBuffer {
 public:
  NStepBuffer(int n_step, double gamma, std::size_t capacity);

  void push(std::vector<float> s, const envs::Action& a, double r, const std::vector<float>& s_next);
  void end_episode();

  std::size_t size() const { return done_.size(); }
  const StateTransition& at(std::size_t i) const { return done_[i]; }
  const StateTransition& sample(Rng& rng) const;
  void clear();

 private:
  struct Pending {
    std::vector<float> s;
    std::array<float, 2> a;
    double r;
  };
  void emit(std::size_t span, const std::vector<float>& boot);

  int n_;
  double gamma_;
  std::size_t capacity_;
  std::deque<Pending> pending_;
  std::deque<StateTransition> done_;
  std::vector<float> last_next_;  // bootstrap state for episode-end flushes
};

// --- learned expert: deterministic actor + twin critics, n-step TD ---

struct RlExpertConfig {
  int hidden = 128;
  int total_steps = 50000;
  int warmup_steps = 2000;      // uniform-random actions, no updates
  int update_every = 2;
  int batch_size = 256;
  int n_step = 3;
  std::size_t buffer_capacity = 100000;
  double gamma = 0.99;
  double tau = 0.01;            // target update: theta' <- tau*theta + (1-tau)*theta'
  double lr = 1e-4;
  double explore_sigma = 0.2;   // exploration noise, clipped with the action box
  double target_sigma = 0.05;   // target-action smoothing noise
  double target_noise_clip = 0.1;
  double divergence_threshold = 1e6;
  int divergence_patience = 10000;  // consecutive over-threshold updates before abort
  int eval_every = 2500;            // steps between deterministic eval snapshots
  int eval_episodes = 5;
  // Stop once a deterministic eval reaches this return (NaN = run to total_steps).
  double early_stop_eval = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 1;

  void validate() const;
};

struct RlProgress {
  int step = 0;
  int episodes = 0;
  double episode_return = 0;   // most recent finished episode
  double eval_return = 0;      // most recent deterministic eval (nan before first)
  double critic_loss = 0;
  double actor_loss = 0;
};

class RlExpert {
 public:
  RlExpert(envs::Task task, int distractor_count, RlExpertConfig cfg);

  envs::Action act(const envs::EnvState& s);  // deterministic, clipped
  envs::Action act_features(const std::vector<float>& f);
  envs::Action act_explore(const std::vector<float>& f, Rng& rng);

  // Full training run on a state-only env. Throws TrainingFault when the
  // critic loss stays above divergence_threshold for divergence_patience
  // consecutive updates. `on_progress` fires after every finished episode.
  void train(envs::PointEnv& env, const std::function<void(const RlProgress&)>& on_progress = {});

  // One gradient step on a batch sampled from `buffer`; exposed for tests.
  std::pair<double, double> update(const NStepBuffer& buffer, Rng& rng);  // (critic, actor) losses

  // theta' <- tau*theta + (1-tau)*theta' on both target critics.
  void soft_update_targets();

  // Per-row min(Q1', Q2') of the target critics; the TD target is
  // ret + discount * this at (s_next, smoothed actor action).
  std::vector<float> target_q_min(const Tensor<float>& states, const Tensor<float>& actions);
  // Raw per-critic target values, mainly for inspecting the min-of-two rule.
  std::pair<std::vector<float>, std::vector<float>> target_q_pair(const Tensor<float>& states,
                                                                  const Tensor<float>& actions);

  envs::Task task() const { return task_; }
  int distractor_count() const { return distractors_; }
  int feature_dim() const { return in_dim_; }
  const RlExpertConfig& config() const { return cfg_; }
  nn::ParamStore<float>& params() { return params_; }
  nn::Adam<float>& actor_optimizer() { return *opt_actor_; }
  nn::Adam<float>& critic_optimizer() { return *opt_critic_; }

 private:
  using Graph = nn::Graph<float>;
  using Ref = Graph::Ref;

  Ref build_actor(Graph& g, Ref s);
  Ref build_critic(Graph& g, const std::string& prefix, Ref s, Ref a);
  Tensor<float> actor_forward(const Tensor<float>& states);

  envs::Task task_;
  int distractors_;
  int in_dim_;
  RlExpertConfig cfg_;
  nn::ParamStore<float> params_;
  std::unique_ptr<nn::Adam<float>> opt_actor_;
  std::unique_ptr<nn::Adam<float>> opt_critic_;
};

// Unified policy handle over the two expert kinds (always clipped to the box).
class ExpertPolicy {
 public:
  enum class Kind { Scripted, Learned };

  static ExpertPolicy scripted(envs::Task task, ScriptedConfig cfg = {});
  static ExpertPolicy learned(std::shared_ptr<RlExpert> net);

  envs::Action act(const envs::EnvState& s) const;  // learned impl is shared, act is non-mutating
  Kind kind() const { return kind_; }
  const ScriptedExpert* scripted_impl() const { return scripted_.get(); }
  const std::shared_ptr<RlExpert>& learned_impl() const { return learned_; }

 private:
  ExpertPolicy() = default;
  Kind kind_ = Kind::Scripted;
  std::shared_ptr<ScriptedExpert> scripted_;
  std::shared_ptr<RlExpert> learned_;
};

// Trains a fresh RlExpert on `env` (which must be state-based for speed;
// rendering is unnecessary for the privileged expert).
std::unique_ptr<RlExpert> train_rl_expert(
    envs::PointEnv& env, RlExpertConfig cfg,
    const std::function<void(const RlProgress&)>& on_progress = {});

// Mean undiscounted return of a policy over `episodes` evaluation episodes.
double evaluate_expert(const ExpertPolicy& policy, envs::PointEnv& env, int episodes,
                       std::uint64_t seed_base);

}  // namespace eagle::expert
