#include "eagle/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "eagle/errors.hpp"

namespace eagle::envs {

namespace {

using json = nlohmann::json;

constexpr Rgb kAgentColor{235, 70, 50};    // red disc
constexpr Rgb kGoalColor{250, 200, 60};    // amber marker
constexpr Rgb kBlockColor{70, 200, 90};    // green disc (PointPush)
constexpr std::array<Rgb, 3> kCanonicalDistractorColors{
    Rgb{150, 90, 200}, Rgb{90, 190, 210}, Rgb{205, 115, 180}};

double dist2d(const Vec2& a, const Vec2& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

// Anti-aliased disc: coverage ramps over one pixel around the rim, so a pixel
// is >= half covered exactly when its center lies inside the radius.
void draw_disc(img::Image& im, const Vec2& center, double radius, const Rgb& color) {
  const int h = im.shape[1], w = im.shape[2];
  const double cx = center[0] * w, cy = center[1] * h, r = radius * h;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      const double a = std::clamp(0.5 + (r - d), 0.0, 1.0);
      if (a <= 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        auto& px = im.data[(static_cast<std::size_t>(c) * h + y) * w + x];
        px = static_cast<std::uint8_t>(std::lround(a * color[c] + (1.0 - a) * px));
      }
    }
  }
}

void rasterize_disc(Tensor<std::uint8_t>& mask, const Vec2& center, double radius) {
  const int h = mask.shape[0], w = mask.shape[1];
  const double cx = center[0] * w, cy = center[1] * h, r = radius * h;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r)
        mask.data[static_cast<std::size_t>(y) * w + x] = 1;
}

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return Rgb{static_cast<std::uint8_t>(std::lround((r + m) * 255)),
             static_cast<std::uint8_t>(std::lround((g + m) * 255)),
             static_cast<std::uint8_t>(std::lround((b + m) * 255))};
}

json rgb_to_json(const Rgb& c) {
  return json::array({c[0], c[1], c[2]});
}

Rgb rgb_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("variant suite: bad color");
  return Rgb{j[0].get<std::uint8_t>(), j[1].get<std::uint8_t>(), j[2].get<std::uint8_t>()};
}

json variant_to_json(const VisualVariant& v) {
  json jp = json::array(), jd = json::array();
  for (const auto& c : v.palette) jp.push_back(rgb_to_json(c));
  for (const auto& c : v.distractor_palette) jd.push_back(rgb_to_json(c));
  return json{{"id", v.variant_id},
              {"background", background_to_string(v.background)},
              {"seed", v.background_seed},
              {"palette", jp},
              {"distractor_palette", jd}};
}

VisualVariant variant_from_json(const json& j) {
  VisualVariant v;
  v.variant_id = j.at("id").get<int>();
  v.background = background_from_string(j.at("background").get<std::string>());
  v.background_seed = j.at("seed").get<std::uint64_t>();
  for (const auto& c : j.at("palette")) v.palette.push_back(rgb_from_json(c));
  for (const auto& c : j.at("distractor_palette")) v.distractor_palette.push_back(rgb_from_json(c));
  return v;
}

}  // namespace

Task task_from_string(const std::string& s) {
  if (s == "point_reach") return Task::PointReach;
  if (s == "point_push") return Task::PointPush;
  throw ConfigError("unknown task: " + s);
}

std::string task_to_string(Task t) {
  return t == Task::PointReach ? "point_reach" : "point_push";
}

BackgroundKind background_from_string(const std::string& s) {
  if (s == "solid_color") return BackgroundKind::SolidColor;
  if (s == "procedural_texture") return BackgroundKind::ProceduralTexture;
  if (s == "image_from_directory") return BackgroundKind::ImageFromDirectory;
  if (s == "animated_noise") return BackgroundKind::AnimatedNoise;
  throw ConfigError("unknown background kind: " + s);
}

std::string background_to_string(BackgroundKind k) {
  switch (k) {
    case BackgroundKind::SolidColor: return "solid_color";
    case BackgroundKind::ProceduralTexture: return "procedural_texture";
    case BackgroundKind::ImageFromDirectory: return "image_from_directory";
    case BackgroundKind::AnimatedNoise: return "animated_noise";
  }
  throw ConfigError("bad background kind");
}

bool states_equal(const EnvState& a, const EnvState& b) {
  if (a.agent_pos != b.agent_pos || a.agent_vel != b.agent_vel || a.goal_pos != b.goal_pos ||
      a.block_pos != b.block_pos || a.block_vel != b.block_vel ||
      a.distractors.size() != b.distractors.size())
    return false;
  for (std::size_t i = 0; i < a.distractors.size(); ++i) {
    const auto& x = a.distractors[i];
    const auto& y = b.distractors[i];
    if (x.pos != y.pos || x.vel != y.vel || x.radius != y.radius || x.color != y.color)
      return false;
  }
  return true;
}

std::vector<double> state_features(const EnvState& s, Task task, int distractor_count) {
  std::vector<double> f;
  f.reserve(state_dim(task, distractor_count));
  f.insert(f.end(), {s.agent_pos[0], s.agent_pos[1], s.agent_vel[0], s.agent_vel[1],
                     s.goal_pos[0], s.goal_pos[1]});
  if (task == Task::PointPush)
    f.insert(f.end(), {s.block_pos[0], s.block_pos[1], s.block_vel[0], s.block_vel[1]});
  for (int i = 0; i < distractor_count; ++i) {
    const auto& d = s.distractors.at(i);
    f.insert(f.end(), {d.pos[0], d.pos[1], d.vel[0], d.vel[1]});
  }
  return f;
}

int state_dim(Task task, int distractor_count) {
  return 6 + (task == Task::PointPush ? 4 : 0) + 4 * distractor_count;
}

bool variants_equal(const VisualVariant& a, const VisualVariant& b) {
  return a.variant_id == b.variant_id && a.background == b.background &&
         a.background_seed == b.background_seed && a.palette == b.palette &&
         a.distractor_palette == b.distractor_palette;
}

VisualVariant canonical_variant() {
  VisualVariant v;
  v.variant_id = 0;
  v.background = BackgroundKind::SolidColor;
  v.background_seed = 0;
  v.palette = {Rgb{40, 40, 46}};
  v.distractor_palette = {};  // canonical per-distractor colors
  return v;
}

PointEnv::PointEnv(EnvConfig cfg, VisualVariant variant)
    : cfg_(std::move(cfg)), variant_(std::move(variant)), rng_(0) {
  if (cfg_.height <= 0 || cfg_.width <= 0) throw ConfigError("env: bad resolution");
  if (cfg_.frame_stack != 1 && cfg_.frame_stack != 3) throw ConfigError("env: frame_stack must be 1 or 3");
  if (cfg_.distractor_count < 0 || cfg_.distractor_count > 3)
    throw ConfigError("env: distractor_count must be in 0..3");
  if (cfg_.horizon <= 0) throw ConfigError("env: bad horizon");
  if (variant_.variant_id < 0) throw ConfigError("env: unknown variant_id");
  if (variant_.palette.empty()) throw ConfigError("env: variant palette empty");
  if (variant_.background == BackgroundKind::ImageFromDirectory) {
    if (cfg_.image_background_dir.empty())
      throw ConfigError("env: image background variant requires image_background_dir");
    background_images_ = img::load_image_dir(cfg_.image_background_dir, cfg_.height, cfg_.width);
    if (background_images_.empty())
      throw ConfigError("env: no images in " + cfg_.image_background_dir);
  }
}

std::pair<Tensor<float>, EnvState> PointEnv::reset(std::uint64_t seed) {
  rng_ = Rng(substream(seed, "episode"));
  state_ = EnvState{};
  t_ = 0;
  ready_ = true;

  auto sample_pos = [&](double lo, double hi) {
    return Vec2{rng_.uniform(lo, hi), rng_.uniform(lo, hi)};
  };
  state_.agent_pos = sample_pos(0.12, 0.88);
  if (cfg_.task == Task::PointReach) {
    state_.goal_pos = sample_pos(0.12, 0.88);
    for (int tries = 0; dist2d(state_.goal_pos, state_.agent_pos) < 0.25 && tries < 200; ++tries)
      state_.goal_pos = sample_pos(0.12, 0.88);
  } else {
    state_.block_pos = sample_pos(0.3, 0.7);
    state_.goal_pos = sample_pos(0.15, 0.85);
    for (int tries = 0; dist2d(state_.goal_pos, state_.block_pos) < 0.25 && tries < 200; ++tries)
      state_.goal_pos = sample_pos(0.15, 0.85);
    const double clear = kAgentRadius + kBlockRadius + 0.05;
    for (int tries = 0; dist2d(state_.agent_pos, state_.block_pos) < clear && tries < 200; ++tries)
      state_.agent_pos = sample_pos(0.12, 0.88);
  }

  auto overlaps_sprites = [&](const Vec2& p, double r) {
    const double pad = 2.0 / cfg_.height;  // keep AA fringes apart too
    if (dist2d(p, state_.agent_pos) < r + kAgentRadius + pad) return true;
    if (dist2d(p, state_.goal_pos) < r + kGoalRadius + pad) return true;
    if (cfg_.task == Task::PointPush && dist2d(p, state_.block_pos) < r + kBlockRadius + pad)
      return true;
    return false;
  };
  for (int i = 0; i < cfg_.distractor_count; ++i) {
    DistractorState d;
    d.radius = rng_.uniform(0.045, 0.08);
    d.pos = sample_pos(d.radius, 1.0 - d.radius);
    for (int tries = 0; overlaps_sprites(d.pos, d.radius) && tries < 500; ++tries)
      d.pos = sample_pos(d.radius, 1.0 - d.radius);
    const double speed = rng_.uniform(0.25, 0.6);
    const double angle = rng_.uniform(0.0, 2.0 * M_PI);
    d.vel = Vec2{speed * std::cos(angle), speed * std::sin(angle)};
    d.color = kCanonicalDistractorColors[i % kCanonicalDistractorColors.size()];
    state_.distractors.push_back(d);
  }

  frames_.clear();
  push_frame();
  return {stacked_obs(), state_};
}

double PointEnv::reward_for(const EnvState& s, const Action& a) const {
  const double ctrl = cfg_.ctrl_cost * (a[0] * a[0] + a[1] * a[1]);
  if (cfg_.task == Task::PointReach) return -dist2d(s.agent_pos, s.goal_pos) - ctrl;
  // Push: weighted so the distance term stays within [-sqrt(2), 0]; the
  // approach term incentivizes reaching the block before pushing.
  return -(2.0 / 3.0) * dist2d(s.block_pos, s.goal_pos) -
         (1.0 / 3.0) * dist2d(s.agent_pos, s.block_pos) - ctrl;
}

bool PointEnv::success(const EnvState& s) const {
  if (cfg_.task == Task::PointReach) return dist2d(s.agent_pos, s.goal_pos) < kSuccessDist;
  return dist2d(s.block_pos, s.goal_pos) < kSuccessDist;
}

StepResult PointEnv::step(const Action& action) {
  if (!ready_) throw StateError("step called before reset");
  if (!std::isfinite(action[0]) || !std::isfinite(action[1]))
    throw InputError("step: non-finite action");
  Action a{std::clamp(action[0], -1.0, 1.0), std::clamp(action[1], -1.0, 1.0)};

  for (int k = 0; k < 2; ++k) {
    state_.agent_vel[k] = std::clamp(state_.agent_vel[k] + a[k] * cfg_.accel_gain * cfg_.dt, -1.0, 1.0);
    state_.agent_pos[k] += state_.agent_vel[k] * cfg_.dt;
    if (state_.agent_pos[k] < 0.0) state_.agent_pos[k] = 0.0, state_.agent_vel[k] = 0.0;
    if (state_.agent_pos[k] > 1.0) state_.agent_pos[k] = 1.0, state_.agent_vel[k] = 0.0;
  }

  if (cfg_.task == Task::PointPush) {
    // Quasi-static block: when the agent disc overlaps it, project the block
    // out along the contact normal; otherwise it stays put.
    const double contact = kAgentRadius + kBlockRadius;
    const double d = dist2d(state_.agent_pos, state_.block_pos);
    Vec2 new_block = state_.block_pos;
    if (d < contact) {
      double nx, ny;
      if (d > 1e-9) {
        nx = (state_.block_pos[0] - state_.agent_pos[0]) / d;
        ny = (state_.block_pos[1] - state_.agent_pos[1]) / d;
      } else {
        nx = 1.0, ny = 0.0;
      }
      new_block[0] = std::clamp(state_.agent_pos[0] + nx * contact, kBlockRadius, 1.0 - kBlockRadius);
      new_block[1] = std::clamp(state_.agent_pos[1] + ny * contact, kBlockRadius, 1.0 - kBlockRadius);
    }
    state_.block_vel = Vec2{(new_block[0] - state_.block_pos[0]) / cfg_.dt,
                            (new_block[1] - state_.block_pos[1]) / cfg_.dt};
    state_.block_pos = new_block;
  }

  for (auto& dstr : state_.distractors) {
    for (int k = 0; k < 2; ++k) {
      dstr.pos[k] += dstr.vel[k] * cfg_.dt;
      if (dstr.pos[k] < dstr.radius) {
        dstr.pos[k] = 2.0 * dstr.radius - dstr.pos[k];
        dstr.vel[k] = -dstr.vel[k];
      }
      if (dstr.pos[k] > 1.0 - dstr.radius) {
        dstr.pos[k] = 2.0 * (1.0 - dstr.radius) - dstr.pos[k];
        dstr.vel[k] = -dstr.vel[k];
      }
      dstr.pos[k] = std::clamp(dstr.pos[k], 0.0, 1.0);
    }
  }

  ++t_;
  push_frame();
  StepResult r;
  r.obs = stacked_obs();
  r.state = state_;
  r.reward = reward_for(state_, a);
  r.done = t_ >= cfg_.horizon;
  return r;
}

img::Image PointEnv::render_background(int frame_idx) const {
  const int h = cfg_.height, w = cfg_.width;
  img::Image im(Shape{3, h, w});
  switch (variant_.background) {
    case BackgroundKind::SolidColor: {
      const Rgb c = variant_.palette[0];
      for (int k = 0; k < 3; ++k)
        std::fill_n(im.data.begin() + static_cast<std::ptrdiff_t>(k) * h * w, h * w, c[k]);
      break;
    }
    case BackgroundKind::ProceduralTexture: {
      Rng r(substream(variant_.background_seed, "texture"));
      const double kx = r.uniform(1.5, 5.0), ky = r.uniform(1.5, 5.0);
      const double phase = r.uniform(0.0, 1.0);
      const int n = static_cast<int>(variant_.palette.size());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double fx = (x + 0.5) / w, fy = (y + 0.5) / h;
          double t = fx * kx + fy * ky + 0.15 * std::sin(2.0 * M_PI * (fx + fy) * 2.0) + phase;
          t -= std::floor(t);
          const Rgb c = variant_.palette[std::min(n - 1, static_cast<int>(t * n))];
          for (int k = 0; k < 3; ++k)
            im.data[(static_cast<std::size_t>(k) * h + y) * w + x] = c[k];
        }
      break;
    }
    case BackgroundKind::ImageFromDirectory: {
      const auto& src =
          background_images_[variant_.background_seed % background_images_.size()];
      im.data = src.data;
      break;
    }
    case BackgroundKind::AnimatedNoise: {
      const Rgb a = variant_.palette[0];
      const Rgb b = variant_.palette.size() > 1 ? variant_.palette[1] : variant_.palette[0];
      const std::uint64_t base =
          hash_combine(variant_.background_seed, static_cast<std::uint64_t>(frame_idx));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::uint64_t hv =
              hash_combine(base, static_cast<std::uint64_t>(y) * 131071u + x);
          const double u = static_cast<double>(hv >> 11) * 0x1.0p-53;
          for (int k = 0; k < 3; ++k)
            im.data[(static_cast<std::size_t>(k) * h + y) * w + x] =
                static_cast<std::uint8_t>(std::lround((1.0 - u) * a[k] + u * b[k]));
        }
      break;
    }
  }
  return im;
}

img::Image PointEnv::render_state(const EnvState& s, int frame_idx) const {
  img::Image im = render_background(frame_idx);
  for (std::size_t i = 0; i < s.distractors.size(); ++i) {
    const auto& d = s.distractors[i];
    const Rgb c = variant_.distractor_palette.empty()
                      ? d.color
                      : variant_.distractor_palette[i % variant_.distractor_palette.size()];
    draw_disc(im, d.pos, d.radius, c);
  }
  draw_disc(im, s.goal_pos, kGoalRadius, kGoalColor);
  if (cfg_.task == Task::PointPush) draw_disc(im, s.block_pos, kBlockRadius, kBlockColor);
  draw_disc(im, s.agent_pos, kAgentRadius, kAgentColor);
  return im;
}

img::Image PointEnv::render_sprites_only(const EnvState& s) const {
  img::Image im(Shape{3, cfg_.height, cfg_.width});
  im.fill(0);
  draw_disc(im, s.goal_pos, kGoalRadius, kGoalColor);
  if (cfg_.task == Task::PointPush) draw_disc(im, s.block_pos, kBlockRadius, kBlockColor);
  draw_disc(im, s.agent_pos, kAgentRadius, kAgentColor);
  return im;
}

Tensor<std::uint8_t> PointEnv::ground_truth_mask() const {
  if (!ready_) throw StateError("ground_truth_mask called before reset");
  Tensor<std::uint8_t> mask(Shape{cfg_.height, cfg_.width});
  mask.fill(0);
  rasterize_disc(mask, state_.goal_pos, kGoalRadius);
  if (cfg_.task == Task::PointPush) rasterize_disc(mask, state_.block_pos, kBlockRadius);
  rasterize_disc(mask, state_.agent_pos, kAgentRadius);
  return mask;
}

const EnvState& PointEnv::state() const {
  if (!ready_) throw StateError("state() called before reset");
  return state_;
}

img::Image PointEnv::last_frame() const {
  if (!cfg_.render) throw StateError("last_frame: rendering disabled for this env");
  if (frames_.empty()) throw StateError("last_frame called before reset");
  return frames_.back();
}

void PointEnv::push_frame() {
  if (!cfg_.render) return;
  img::Image frame = render_state(state_, t_);
  if (frames_.empty())
    for (int i = 0; i < cfg_.frame_stack; ++i) frames_.push_back(frame);
  else
    frames_.push_back(std::move(frame));
  while (static_cast<int>(frames_.size()) > cfg_.frame_stack) frames_.pop_front();
}

Tensor<float> PointEnv::stacked_obs() const {
  if (!cfg_.render) return Tensor<float>(Shape{0});
  const int h = cfg_.height, w = cfg_.width;
  Tensor<float> obs(Shape{cfg_.frame_stack * 3, h, w});
  std::size_t off = 0;
  for (const auto& f : frames_) {
    for (std::size_t i = 0; i < f.data.size(); ++i)
      obs.data[off + i] = static_cast<float>(f.data[i]) / 255.0f;
    off += f.data.size();
  }
  return obs;
}

std::pair<std::vector<VisualVariant>, std::vector<VisualVariant>> make_variant_suite(
    int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ConfigError("make_variant_suite: counts must be >= 1");
  // Exact-RGB disjointness by construction: train colors use hue buckets
  // 0..17 at low value, test colors use buckets 18..35 at high value.
  auto make_color = [](Rng& r, bool test) {
    const int bucket = r.uniform_int(0, 17) + (test ? 18 : 0);
    const double hue = (bucket + 0.5) / 36.0;
    const double sat = test ? r.uniform(0.55, 0.95) : r.uniform(0.35, 0.7);
    const double val = test ? r.uniform(0.55, 0.9) : r.uniform(0.16, 0.4);
    return hsv_to_rgb(hue, sat, val);
  };
  auto make_side = [&](bool test, int count, int id0) {
    Rng r(substream(seed, test ? "suite-test" : "suite-train"));
    std::vector<VisualVariant> out;
    for (int i = 0; i < count; ++i) {
      VisualVariant v;
      v.variant_id = id0 + i;
      if (test) {
        const int k = r.uniform_int(0, 2);
        v.background = k == 0   ? BackgroundKind::SolidColor
                       : k == 1 ? BackgroundKind::ProceduralTexture
                                : BackgroundKind::AnimatedNoise;
      } else {
        v.background =
            r.bernoulli(0.5) ? BackgroundKind::SolidColor : BackgroundKind::ProceduralTexture;
      }
      // Disjoint seed ranges keep test textures unseen in train.
      v.background_seed = r.next_u64() % 1000000 + (test ? 1000000 : 0);
      const int ncol = v.background == BackgroundKind::SolidColor ? 1 : 3;
      for (int c = 0; c < ncol; ++c) v.palette.push_back(make_color(r, test));
      for (int c = 0; c < 3; ++c) v.distractor_palette.push_back(make_color(r, test));
      out.push_back(std::move(v));
    }
    return out;
  };
  return {make_side(false, n_train, 1), make_side(true, n_test, 1001)};
}

void save_variant_suite(const std::string& path, const std::vector<VisualVariant>& train,
                        const std::vector<VisualVariant>& test) {
  json j;
  j["format"] = "eagle-variant-suite";
  j["version"] = 1;
  j["train"] = json::array();
  j["test"] = json::array();
  for (const auto& v : train) j["train"].push_back(variant_to_json(v));
  for (const auto& v : test) j["test"].push_back(variant_to_json(v));
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

std::pair<std::vector<VisualVariant>, std::vector<VisualVariant>> load_variant_suite(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("variant suite parse error: " + std::string(e.what()));
  }
  if (j.value("format", "") != "eagle-variant-suite" || j.value("version", 0) != 1)
    throw ConfigError("variant suite: unknown format/version in " + path);
  std::pair<std::vector<VisualVariant>, std::vector<VisualVariant>> out;
  for (const auto& v : j.at("train")) out.first.push_back(variant_from_json(v));
  for (const auto& v : j.at("test")) out.second.push_back(variant_from_json(v));
  return out;
}

}  // namespace eagle::envs
