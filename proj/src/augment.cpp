#include "eagle/augment.hpp"

#include <algorithm>
#include <cmath>

#include "eagle/errors.hpp"
#include "eagle/image.hpp"
#include "eagle/rng.hpp"

namespace eagle::aug {

namespace {

void require_chw(const Tensor<float>& obs) {
  if (obs.shape.size() != 3 || obs.shape[0] % 3 != 0)
    throw InputError("augment: observation must be (stack*3, H, W), got " + shape_str(obs.shape));
}

}  // namespace

AugKind augment_from_string(const std::string& s) {
  if (s == "random_shift") return AugKind::RandomShift;
  if (s == "random_conv") return AugKind::RandomConv;
  if (s == "random_overlay") return AugKind::RandomOverlay;
  throw ConfigError("unknown augmentation: " + s);
}

std::string augment_to_string(AugKind k) {
  switch (k) {
    case AugKind::RandomShift: return "random_shift";
    case AugKind::RandomConv: return "random_conv";
    case AugKind::RandomOverlay: return "random_overlay";
  }
  throw ConfigError("bad augment kind");
}

DistractorSet load_distractor_dataset(const std::string& dir, int h, int w) {
  DistractorSet set;
  set.source = dir;
  for (const auto& im : img::load_image_dir(dir, h, w)) {
    Tensor<float> t(im.shape);
    for (std::size_t i = 0; i < im.data.size(); ++i)
      t.data[i] = static_cast<float>(im.data[i]) / 255.0f;
    set.images.push_back(std::move(t));
  }
  if (set.images.empty())
    throw ConfigError("overlay augmentation enabled but no images found in " + dir);
  return set;
}

DistractorSet procedural_distractors(int n, int h, int w, std::uint64_t seed) {
  if (n < 1 || h < 1 || w < 1) throw ConfigError("procedural_distractors: bad sizes");
  DistractorSet set;
  set.source = "procedural";
  for (int i = 0; i < n; ++i) {
    Rng rng = substream(seed, "overlay-image", static_cast<std::uint64_t>(i));
    float c0[3], c1[3];
    for (int k = 0; k < 3; ++k) {
      c0[k] = static_cast<float>(rng.uniform());
      c1[k] = static_cast<float>(rng.uniform());
    }
    const int pattern = static_cast<int>(rng.uniform_int(0, 2));
    const double fx = rng.uniform(1.0, 4.0), fy = rng.uniform(1.0, 4.0);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
    Tensor<float> im(Shape{3, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double u = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
        const double v = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
        double t = 0;
        switch (pattern) {
          case 0: t = 0.5 + 0.5 * std::sin(6.283185307179586 * (fx * u + fy * v) + phase); break;
          case 1: t = std::min(1.0, 2.0 * std::hypot(u - cx, v - cy)); break;
          default: t = 0.5 + 0.25 * std::sin(6.283185307179586 * fx * u + phase) +
                       0.25 * std::sin(6.283185307179586 * fy * v); break;
        }
        for (int k = 0; k < 3; ++k)
          im.at3(k, y, x) = c0[k] + static_cast<float>(t) * (c1[k] - c0[k]);
      }
    set.images.push_back(std::move(im));
  }
  return set;
}

double alpha_schedule(long long step, long long total_steps) {
  if (total_steps <= 0) return 0.4;
  if (step < 0 || step > total_steps) throw InputError("alpha_schedule: step outside [0, total]");
  return 0.4 + 0.5 * (static_cast<double>(step) / static_cast<double>(total_steps));
}

Tensor<float> random_shift(const Tensor<float>& obs, int pad, std::uint64_t seed) {
  require_chw(obs);
  const int ch = obs.shape[0], h = obs.shape[1], w = obs.shape[2];
  if (pad < 0 || pad >= h / 2 || pad >= w / 2) throw InputError("random_shift: bad pad");
  if (pad == 0) return obs;
  Rng rng(substream(seed, "shift"));
  const double dx = rng.uniform(-static_cast<double>(pad), static_cast<double>(pad));
  const double dy = rng.uniform(-static_cast<double>(pad), static_cast<double>(pad));
  Tensor<float> out(obs.shape);
  for (int y = 0; y < h; ++y) {
    const double fy = y + dy;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const float wy = static_cast<float>(std::clamp(fy - y0, 0.0, 1.0));
    for (int x = 0; x < w; ++x) {
      const double fx = x + dx;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const float wx = static_cast<float>(std::clamp(fx - x0, 0.0, 1.0));
      for (int c = 0; c < ch; ++c) {
        const float* p = obs.data.data() + static_cast<std::size_t>(c) * h * w;
        const float v = (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
                        wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
        out.data[(static_cast<std::size_t>(c) * h + y) * w + x] = v;
      }
    }
  }
  return out;
}

Tensor<float> conv_with_kernel(const Tensor<float>& obs, const std::array<double, 9>& kernel) {
  require_chw(obs);
  const int ch = obs.shape[0], h = obs.shape[1], w = obs.shape[2];
  Tensor<float> out(obs.shape);
  for (int c = 0; c < ch; ++c) {
    const float* p = obs.data.data() + static_cast<std::size_t>(c) * h * w;
    float* q = out.data.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int sy = std::clamp(y + ky - 1, 0, h - 1);
            const int sx = std::clamp(x + kx - 1, 0, w - 1);
            acc += kernel[ky * 3 + kx] * p[sy * w + sx];
          }
        q[y * w + x] = static_cast<float>(acc);
      }
  }
  const float lo = std::min(0.0f, out.min_value());
  const float hi = std::max(1.0f, out.max_value());
  if (lo < 0.0f || hi > 1.0f) {
    const float inv = 1.0f / (hi - lo);
    for (auto& v : out.data) v = (v - lo) * inv;
  }
  return out;
}

Tensor<float> random_conv(const Tensor<float>& obs, std::uint64_t seed) {
  Rng rng(substream(seed, "conv"));
  std::array<double, 9> k;
  for (auto& v : k) v = rng.normal() / 3.0;  // N(0, 1/9)
  return conv_with_kernel(obs, k);
}

Tensor<float> random_overlay(const Tensor<float>& obs, const Tensor<float>& distractor,
                             double alpha) {
  require_chw(obs);
  if (alpha < 0.0 || alpha > 1.0) throw InputError("random_overlay: alpha outside [0,1]");
  const int ch = obs.shape[0], h = obs.shape[1], w = obs.shape[2];
  if (distractor.shape.size() != 3 || distractor.shape[0] != 3 || distractor.shape[1] != h ||
      distractor.shape[2] != w)
    throw InputError("random_overlay: distractor shape " + shape_str(distractor.shape) +
                     " does not match observation " + shape_str(obs.shape));
  Tensor<float> out(obs.shape);
  const float a = static_cast<float>(alpha);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < ch; ++c) {
    const float* d = distractor.data.data() + (c % 3) * plane;
    const float* p = obs.data.data() + c * plane;
    float* q = out.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) q[i] = (1.0f - a) * p[i] + a * d[i];
  }
  return out;
}

Tensor<float> apply_augment(const Tensor<float>& obs, const AugmentSpec& spec,
                            std::uint64_t seed) {
  switch (spec.kind) {
    case AugKind::RandomShift: return random_shift(obs, spec.pad, seed);
    case AugKind::RandomConv: return random_conv(obs, seed);
    case AugKind::RandomOverlay: {
      if (!spec.distractors || spec.distractors->images.empty())
        throw ConfigError("random_overlay requires a loaded distractor set");
      Rng rng(substream(seed, "overlay"));
      const auto& im = spec.distractors->images[rng.uniform_int(
          0, static_cast<int>(spec.distractors->images.size()) - 1)];
      return random_overlay(obs, im, spec.alpha);
    }
  }
  throw ConfigError("bad augment kind");
}

Tensor<float> masked_augment(const Tensor<float>& obs, const Tensor<float>& mask,
                             const AugmentSpec& spec, std::uint64_t seed) {
  require_chw(obs);
  const int ch = obs.shape[0], h = obs.shape[1], w = obs.shape[2];
  if (mask.shape.size() != 2 || mask.shape[0] != h || mask.shape[1] != w)
    throw InputError("masked_augment: mask shape " + shape_str(mask.shape) +
                     " does not match observation " + shape_str(obs.shape));
  const Tensor<float> augmented = apply_augment(obs, spec, seed);
  Tensor<float> out(obs.shape);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < ch; ++c) {
    const float* p = obs.data.data() + c * plane;
    const float* a = augmented.data.data() + c * plane;
    float* q = out.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const float m = mask.data[i];
      q[i] = p[i] * m + a[i] * (1.0f - m);
    }
  }
  return out;
}

}  // namespace eagle::aug
