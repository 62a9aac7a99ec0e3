#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "eagle/tensor.hpp"

namespace eagle::aug {

enum class AugKind { RandomShift, RandomConv, RandomOverlay };

AugKind augment_from_string(const std::string& s);
std::string augment_to_string(AugKind k);

// Overlay images in [0,1], shape (3, H, W).
struct DistractorSet {
  std::vector<Tensor<float>> images;
  std::string source;
};

// Ingests every PNG/JPEG directly under `dir`, center-crop + resize to (h, w).
// Missing or empty directory is an error: the set is only loaded when overlay
// augmentation is enabled.
DistractorSet load_distractor_dataset(const std::string& dir, int h, int w);

// Self-contained overlay sources: deterministic procedural textures (stripes,
// radial fades, plaids) for runs that ship no image directory.
DistractorSet procedural_distractors(int n, int h, int w, std::uint64_t seed);

// α for random overlay: linear 0.4 -> 0.9 across training.
double alpha_schedule(long long step, long long total_steps);

// Continuous shift in [-pad, pad]^2, bilinear sampling, replicate padding.
Tensor<float> random_shift(const Tensor<float>& obs, int pad, std::uint64_t seed);

// Depthwise 3x3 convolution with replicate padding followed by a conditional
// min-max renormalization that is the identity when the output already lies
// in [0,1] (so an identity kernel is a no-op).
Tensor<float> conv_with_kernel(const Tensor<float>& obs, const std::array<double, 9>& kernel);
Tensor<float> random_conv(const Tensor<float>& obs, std::uint64_t seed);  // weights ~ N(0, 1/9)

// out = (1 - alpha) * obs + alpha * distractor, distractor tiled across the
// frame stack.
Tensor<float> random_overlay(const Tensor<float>& obs, const Tensor<float>& distractor,
                             double alpha);

struct AugmentSpec {
  AugKind kind = AugKind::RandomOverlay;
  int pad = 4;           // random shift
  double alpha = 0.5;    // random overlay; callers resolve alpha_schedule first
  const DistractorSet* distractors = nullptr;
};

Tensor<float> apply_augment(const Tensor<float>& obs, const AugmentSpec& spec,
                            std::uint64_t seed);

// o_aug = o * m + aug(o) * (1 - m); mask is (H, W) in [0,1], broadcast over
// channels and frame stack.
Tensor<float> masked_augment(const Tensor<float>& obs, const Tensor<float>& mask,
                             const AugmentSpec& spec, std::uint64_t seed);

}  // namespace eagle::aug
