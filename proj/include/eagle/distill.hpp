#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eagle/augment.hpp"
#include "eagle/autograd.hpp"
#include "eagle/envs.hpp"
#include "eagle/expert.hpp"
#include "eagle/mask.hpp"
#include "eagle/replay.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle::distill {

// --- pixel student ---

struct StudentConfig {
  int in_channels = 9;  // frame_stack * 3
  int height = 84;
  int width = 84;
  int channels = 32;  // conv width
  int hidden = 256;   // MLP head
  int action_dim = 2;
  double lr = 1e-4;

  void validate() const;
};

// Conv encoder + MLP head mapping stacked pixels to tanh actions. Never sees
// EnvState.
class StudentPolicy {
 public:
  using Graph = nn::Graph<float>;
  using Ref = Graph::Ref;

  StudentPolicy(StudentConfig cfg, std::uint64_t seed);

  Ref build(Graph& g, Ref obs);               // (B,C,H,W) -> (B,2) in (-1,1)
  Tensor<float> forward(const Tensor<float>& obs);  // batched inference
  envs::Action act(const Tensor<float>& obs);       // single observation

  const StudentConfig& config() const { return cfg_; }
  nn::ParamStore<float>& params() { return params_; }
  nn::Adam<float>& optimizer() { return *opt_; }

 private:
  StudentConfig cfg_;
  nn::ParamStore<float> params_;
  std::unique_ptr<nn::Adam<float>> opt_;
};

// --- Eq. 7: privilege-guided distillation loss ---

struct DistillHooks {
  // Constant (B,2) replacing the student's forward output (loss oracles).
  const Tensor<float>* student_out = nullptr;
  // Constant (B,2) replacing the expert's target actions, e.g. targets cached
  // before the states were discarded.
  const Tensor<float>* targets = nullptr;
};

struct DistillReport {
  float loss = 0;
  double alpha = 0;  // overlay strength used for this batch
  bool stepped = false;
};

// Augmentation context shared by the distill/RL presets: base spec plus the
// step-resolved alpha schedule.
struct AugContext {
  aug::AugmentSpec spec;
  long long step = 0;
  long long total_steps = 1;

  aug::AugmentSpec resolved() const {
    aug::AugmentSpec s = spec;
    s.alpha = aug::alpha_schedule(step, total_steps);
    return s;
  }
};

// Eq. 6 applied per sample: o*M + aug(o)*(1-M) with M = the mask module's
// upsampled attention (forward-only, so no gradient reaches the mask), or
// M ≡ 0 when `mask_module` is null (the E+Aug ablation).
Tensor<float> augment_batch(const Tensor<float>& obs, mask::MaskModule* mask_module,
                            const AugContext& actx, Rng& rng);

// Mean squared L2 between the student on augmented pixels and the expert on
// privileged states. Gradients stay inside the student; expert and mask are
// only evaluated numerically.
DistillReport distill_loss(const Batch& batch, mask::MaskModule* mask_module,
                           StudentPolicy& student, const expert::ExpertPolicy& expert,
                           const AugContext& actx, Rng& rng, const DistillHooks& hooks = {});

// distill_loss + one Adam step on the student (skipped on non-finite grads).
DistillReport student_train_step(const Batch& batch, mask::MaskModule* mask_module,
                                 StudentPolicy& student, const expert::ExpertPolicy& expert,
                                 const AugContext& actx, Rng& rng, const DistillHooks& hooks = {});

struct JointMetrics {
  mask::AttLossReport mask;
  DistillReport distill;
};

// One Algorithm-1 iteration: a single batch drives one mask train step and one
// student distillation step.
JointMetrics joint_update(const PixelReplay& buffer, mask::MaskModule& mask_module,
                          StudentPolicy& student, const expert::ExpertPolicy& expert, int batch,
                          const AugContext& actx, Rng& rng);

// --- rollout collection (episode-level expert/student alternation) ---

class RolloutWorker {
 public:
  // `expert` may be null only when mix == 0 (the expert-free RL presets).
  RolloutWorker(envs::PointEnv& env, PixelReplay& buffer, const expert::ExpertPolicy* expert,
                StudentPolicy* student, double mix, std::uint64_t seed,
                double student_noise = 0.0);

  // Advances one environment step; starts a fresh episode as needed.
  // Returns the finished episode's return when this step ended it.
  std::optional<double> step();

  bool expert_driving() const { return expert_driving_; }
  int episodes_started() const { return episodes_; }

 private:
  void begin_episode();

  envs::PointEnv& env_;
  PixelReplay& buffer_;
  const expert::ExpertPolicy* expert_;
  StudentPolicy* student_;
  double mix_;
  double student_noise_;
  Rng driver_rng_, noise_rng_;
  std::uint64_t seed_;
  bool expert_driving_ = false;
  bool episode_open_ = false;
  int episodes_ = 0;
  double episode_return_ = 0;
  envs::EnvState state_;
  Tensor<float> obs_;
};

// Fills `steps` transitions using per-episode driver choice (probability `mix`
// of the expert). Returns the number of episodes started.
int collect_rollout(const expert::ExpertPolicy* expert, StudentPolicy* student,
                    envs::PointEnv& env, PixelReplay& buffer, int steps, double mix,
                    std::uint64_t seed);

// --- trainer ---

enum class Preset { Eagle, EAug, QOnly, QAug, QMask };

Preset preset_from_string(const std::string& s);
std::string preset_to_string(Preset p);
bool preset_uses_expert(Preset p);
bool preset_uses_mask(Preset p);

struct TrainConfig {
  envs::EnvConfig env;
  envs::VisualVariant variant;  // training variant
  Preset preset = Preset::Eagle;
  long long total_steps = 50000;
  int update_interval = 2;  // env steps per joint update
  int batch = 64;
  int min_buffer = 1000;  // transitions before the first update
  double mix = 0.5;       // probability an episode is expert-driven
  std::size_t buffer_capacity = 100000;
  aug::AugKind aug_kind = aug::AugKind::RandomOverlay;
  int shift_pad = 4;
  int overlay_images = 16;  // procedural overlay set size when no directory given
  std::string distractor_dir;
  mask::MaskConfig mask;
  StudentConfig student;
  // RL presets (Q-only / Q+Aug / Q+Mask): DrQ-v2-style TD hyperparameters.
  double gamma = 0.99;
  double tau = 0.01;
  int n_step = 3;
  double explore_sigma = 0.2;
  double target_sigma = 0.05;
  double target_noise_clip = 0.1;
  int eval_every = 10000;  // 0 = no periodic eval
  int eval_episodes = 5;
  std::string out_dir;  // metrics + checkpoints; empty = no file output
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainResult {
  double final_eval = 0;          // mean return, deterministic student
  double mean_mask_value = 0;     // last joint update's mean mask
  long long joint_updates = 0;
  int episodes = 0;
  std::string metrics_path;       // JSONL, empty when out_dir unset
  std::string episodes_path;      // CSV
};

class PixelRlStudent;

// A trained pixel policy; the closure owns whichever nets back it.
using PixelPolicy = std::function<envs::Action(const Tensor<float>&)>;

struct TrainArtifacts {
  PixelPolicy policy;
  std::shared_ptr<mask::MaskModule> mask;  // null when the preset trains no mask
  std::shared_ptr<StudentPolicy> student;  // distillation presets
  std::shared_ptr<PixelRlStudent> rl;      // RL presets
};

// Phase 2 of Algorithm 1 under the chosen preset. Owns every net it trains;
// pass the phase-1 expert in (scripted by default).
TrainResult train(const TrainConfig& cfg, const expert::ExpertPolicy* expert,
                  TrainArtifacts* artifacts = nullptr);

// Mean undiscounted return over deterministic evaluation episodes.
double evaluate_pixel_policy(const PixelPolicy& policy, envs::PointEnv& env, int episodes,
                             std::uint64_t seed_base);

// --- pixel RL student (ablation presets; approximates the DrQ-v2 baselines) ---

struct PixelRlConfig {
  StudentConfig net;  // actor shape; critics share the conv geometry
  double gamma = 0.99;
  double tau = 0.01;
  double lr = 1e-4;
  double target_sigma = 0.05;
  double target_noise_clip = 0.1;

  void validate() const;
};

class PixelRlStudent {
 public:
  using Graph = nn::Graph<float>;
  using Ref = Graph::Ref;

  PixelRlStudent(PixelRlConfig cfg, std::uint64_t seed);

  envs::Action act(const Tensor<float>& obs);
  Tensor<float> actor_forward(const Tensor<float>& obs);
  // One TD update on an n-step pixel batch whose observations were already
  // augmented by the preset. Returns (critic_loss, actor_loss).
  std::pair<double, double> update(const Tensor<float>& o, const Tensor<float>& a,
                                   const std::vector<float>& ret,
                                   const std::vector<float>& discount, const Tensor<float>& o_boot,
                                   Rng& rng);
  void soft_update_targets();

  StudentPolicy& actor() { return actor_; }
  nn::ParamStore<float>& critic_params() { return params_; }

 private:
  Ref build_critic(Graph& g, const std::string& prefix, Ref obs, Ref action);

  PixelRlConfig cfg_;
  StudentPolicy actor_;
  nn::ParamStore<float> params_;  // q1/q2/tq1/tq2
  std::unique_ptr<nn::Adam<float>> opt_critic_;
};

}  // namespace eagle::distill
