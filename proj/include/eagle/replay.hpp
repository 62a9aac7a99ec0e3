#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <mutex>
#include <vector>

#include "eagle/envs.hpp"
#include "eagle/image.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle::distill {

// Phase-2 replay buffer D. Stores one u8 frame per simulator tick and rebuilds
// stacked float observations on sampling, so the three stacked views of a
// frame share storage. FIFO at transition granularity; one writer plus one
// sampling reader may run concurrently.

struct ReplayConfig {
  std::size_t capacity = 100000;  // transitions, not frames
  int frame_stack = 3;

  void validate() const;
};

// A single reconstructed transition (test/inspection path; training uses the
// batched samplers below).
struct Transition {
  Tensor<float> o, o_next;  // (3*stack, h, w), values k/255
  envs::EnvState s, s_next;
  std::array<float, 2> a{0, 0};
  float r = 0;
  bool done = false;
};

struct Batch {
  Tensor<float> o, o_next;  // (B, 3*stack, h, w)
  Tensor<float> a;          // (B, 2)
  std::vector<float> r;
  std::vector<envs::EnvState> s, s_next;
  std::vector<std::uint8_t> done;
};

// n-step sample for the RL ablation presets; episode tails shrink the span
// and bootstrap from the last stored observation (time-limit cuts bootstrap
// through, matching the state-expert trainer).
struct NStepBatch {
  Tensor<float> o, o_boot;  // (B, 3*stack, h, w)
  Tensor<float> a;          // (B, 2)
  std::vector<float> ret;       // discounted n-step return
  std::vector<float> discount;  // gamma^span for the bootstrap term
};

class PixelReplay {
 public:
  explicit PixelReplay(ReplayConfig cfg);

  // Writer side: one episode = the reset frame plus one frame per step.
  void begin_episode(const img::Image& reset_frame);
  void push_step(const img::Image& frame_after, const envs::Action& a, double r,
                 const envs::EnvState& s, const envs::EnvState& s_next, bool done);

  // Reader side. Batch indices are drawn uniformly without replacement.
  Batch sample(int batch, Rng& rng) const;
  NStepBatch sample_nstep(int batch, int n_step, double gamma, Rng& rng) const;
  Transition transition(std::size_t i) const;  // i in [0, size)

  std::size_t size() const;
  std::size_t evicted() const;  // transitions dropped by FIFO so far
  std::size_t episode_count() const;
  const ReplayConfig& config() const { return cfg_; }
  int obs_channels() const;  // 3 * frame_stack
  int height() const;
  int width() const;
  void clear();

 private:
  struct Episode {
    std::size_t base = 0;  // absolute index of this episode's first transition
    std::vector<img::Image> frames;  // frames.size() == steps.size() + 1
    struct Step {
      std::array<float, 2> a;
      float r;
      envs::EnvState s, s_next;
      bool done;
    };
    std::vector<Step> steps;
  };

  // All of these assume lock_ is held.
  const Episode& locate(std::size_t abs_index, std::size_t* local) const;
  void fill_obs(const Episode& ep, std::size_t t, float* dst) const;
  void check_frame(const img::Image& f) const;
  std::vector<std::size_t> draw_indices(int batch, Rng& rng) const;

  ReplayConfig cfg_;
  mutable std::mutex lock_;
  std::deque<Episode> episodes_;
  std::size_t next_ = 0;     // absolute index of the next pushed transition
  std::size_t evicted_ = 0;  // absolute index of the oldest live transition
  int h_ = 0, w_ = 0;        // fixed by the first frame
};

}  // namespace eagle::distill
