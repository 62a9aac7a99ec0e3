#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <vector>

#include "eagle/envs.hpp"
#include "eagle/errors.hpp"
#include "eagle/image.hpp"
#include "test_util.hpp"

using namespace eagle;
using namespace eagle::envs;

namespace {

EnvConfig small_cfg(Task task, int distractors = 2) {
  EnvConfig cfg;
  cfg.task = task;
  cfg.height = cfg.width = 64;
  cfg.frame_stack = 3;
  cfg.distractor_count = distractors;
  return cfg;
}

// Independent rasterization oracle: pixel centers within the disc radius.
int disc_popcount_oracle(const Vec2& c, double radius, int h, int w) {
  int n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = (x + 0.5) - c[0] * w;
      const double dy = (y + 0.5) - c[1] * h;
      if (std::sqrt(dx * dx + dy * dy) <= radius * h) ++n;
    }
  return n;
}

Tensor<std::uint8_t> disc_raster_oracle(const Vec2& c, double radius, int h, int w) {
  Tensor<std::uint8_t> m(Shape{h, w});
  m.fill(0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = (x + 0.5) - c[0] * w;
      const double dy = (y + 0.5) - c[1] * h;
      if (std::sqrt(dx * dx + dy * dy) <= radius * h) m.data[y * w + x] = 1;
    }
  return m;
}

VisualVariant test_variant() {
  VisualVariant v;
  v.variant_id = 42;
  v.background = BackgroundKind::AnimatedNoise;
  v.background_seed = 99;
  v.palette = {Rgb{120, 140, 200}, Rgb{200, 160, 90}};
  v.distractor_palette = {Rgb{10, 240, 240}};
  return v;
}

}  // namespace

TEST_CASE("reset is bit-identical for equal seeds") {
  PointEnv env(small_cfg(Task::PointReach), canonical_variant());
  auto [o1, s1] = env.reset(7);
  auto [o2, s2] = env.reset(7);
  CHECK(tensors_equal(o1, o2));
  CHECK(states_equal(s1, s2));
  auto [o3, s3] = env.reset(8);
  CHECK_FALSE(states_equal(s1, s3));
}

TEST_CASE("variants change pixels but not state") {
  PointEnv a(small_cfg(Task::PointReach), canonical_variant());
  PointEnv b(small_cfg(Task::PointReach), test_variant());
  auto [oa, sa] = a.reset(7);
  auto [ob, sb] = b.reset(7);
  CHECK(states_equal(sa, sb));
  CHECK_FALSE(tensors_equal(oa, ob));
  CHECK(tensors_equal(a.ground_truth_mask(), b.ground_truth_mask()));
}

TEST_CASE("observation shape, range, and u8 quantization") {
  auto cfg = small_cfg(Task::PointReach);
  PointEnv env(cfg, canonical_variant());
  auto [obs, st] = env.reset(3);
  REQUIRE(obs.shape == Shape{9, 64, 64});
  CHECK(obs.min_value() >= 0.0f);
  CHECK(obs.max_value() <= 1.0f);
  // stacked frames at reset repeat the first frame; floats are exactly u8/255
  const auto frame = env.last_frame();
  for (std::size_t i = 0; i < frame.data.size(); ++i)
    CHECK(obs.data[i] == static_cast<float>(frame.data[i]) / 255.0f);
}

TEST_CASE("ground-truth mask matches the rasterization oracle") {
  auto cfg = small_cfg(Task::PointReach, 0);
  PointEnv env(cfg, canonical_variant());
  auto [obs, st] = env.reset(11);
  const auto mask = env.ground_truth_mask();
  const int agent = disc_popcount_oracle(st.agent_pos, PointEnv::kAgentRadius, 64, 64);
  const int goal = disc_popcount_oracle(st.goal_pos, PointEnv::kGoalRadius, 64, 64);
  int pop = 0;
  for (auto v : mask.data) pop += v;
  CHECK(pop == agent + goal);  // discs are disjoint at reset by construction
  CHECK(tensors_equal(mask, [&] {
    auto m = disc_raster_oracle(st.agent_pos, PointEnv::kAgentRadius, 64, 64);
    auto g = disc_raster_oracle(st.goal_pos, PointEnv::kGoalRadius, 64, 64);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = m.data[i] | g.data[i];
    return m;
  }()));
}

TEST_CASE("mask excludes distractor sprites and marks sprite pixels only") {
  auto cfg = small_cfg(Task::PointReach, 3);
  PointEnv env(cfg, canonical_variant());
  auto [obs, st] = env.reset(0);
  REQUIRE(st.distractors.size() == 3);
  const auto mask = env.ground_truth_mask();
  for (const auto& d : st.distractors) {
    const auto dr = disc_raster_oracle(d.pos, d.radius, 64, 64);
    for (std::size_t i = 0; i < mask.data.size(); ++i) CHECK(mask.data[i] * dr.data[i] == 0);
  }
  // every masked pixel differs from the pure background render
  const auto full = env.render_state(st, 0);
  const Rgb bg{40, 40, 46};  // canonical_variant solid color
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (mask.data[y * 64 + x]) {
        bool differs = false;
        for (int c = 0; c < 3; ++c)
          if (full.data[(c * 64 + y) * 64 + x] != bg[c]) differs = true;
        CHECK(differs);
      }
}

TEST_CASE("reward closed forms") {
  auto cfg = small_cfg(Task::PointReach);
  PointEnv env(cfg, canonical_variant());
  EnvState s;
  s.agent_pos = {0.2, 0.2};
  s.goal_pos = {0.8, 0.8};
  CHECK(env.reward_for(s, {0.0, 0.0}) == doctest::Approx(-std::sqrt(0.72)).epsilon(1e-12));
  s.agent_pos = s.goal_pos;
  CHECK(env.reward_for(s, {0.0, 0.0}) == 0.0);
  CHECK(env.reward_for(s, {1.0, 1.0}) == doctest::Approx(-0.2).epsilon(1e-12));
}

TEST_CASE("push reward weights keep the distance term inside the bound") {
  auto cfg = small_cfg(Task::PointPush);
  PointEnv env(cfg, canonical_variant());
  EnvState s;
  s.agent_pos = {0.5, 0.5};
  s.block_pos = {0.5, 0.5};
  s.goal_pos = {0.5, 0.5};
  CHECK(env.reward_for(s, {0.0, 0.0}) == 0.0);
  s.agent_pos = {0.0, 0.0};
  s.block_pos = {1.0, 1.0};
  s.goal_pos = {0.0, 0.0};
  CHECK(env.reward_for(s, {0.0, 0.0}) >= -std::sqrt(2.0));
}

TEST_CASE("horizon is exactly 500 by default") {
  EnvConfig cfg;
  cfg.task = Task::PointReach;
  cfg.height = cfg.width = 32;
  cfg.frame_stack = 1;
  cfg.distractor_count = 0;
  PointEnv env(cfg, canonical_variant());
  env.reset(1);
  for (int t = 1; t <= 500; ++t) {
    auto r = env.step({0.1, -0.1});
    CHECK(r.done == (t == 500));
  }
}

TEST_CASE("dynamics are invariant across variants") {
  auto cfg = small_cfg(Task::PointPush);
  PointEnv a(cfg, canonical_variant());
  PointEnv b(cfg, test_variant());
  a.reset(21);
  b.reset(21);
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const Action act{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    auto ra = a.step(act);
    auto rb = b.step(act);
    CHECK(states_equal(ra.state, rb.state));
    CHECK(ra.reward == rb.reward);
  }
}

TEST_CASE("reward stays within bounds on random rollouts") {
  for (auto task : {Task::PointReach, Task::PointPush}) {
    auto cfg = small_cfg(task);
    cfg.height = cfg.width = 32;
    cfg.frame_stack = 1;
    PointEnv env(cfg, canonical_variant());
    env.reset(13);
    Rng rng(77);
    const double lo = -std::sqrt(2.0) - 2.0 * cfg.ctrl_cost;
    for (int t = 0; t < 300; ++t) {
      auto r = env.step({rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)});
      CHECK(r.reward <= 0.0);
      CHECK(r.reward >= lo);
      CHECK(r.state.agent_pos[0] >= 0.0);
      CHECK(r.state.agent_pos[0] <= 1.0);
      CHECK(std::fabs(r.state.agent_vel[0]) <= 1.0);
    }
  }
}

TEST_CASE("bad usage raises typed errors") {
  auto cfg = small_cfg(Task::PointReach);
  PointEnv env(cfg, canonical_variant());
  CHECK_THROWS_AS(env.step({0, 0}), StateError);
  CHECK_THROWS_AS(env.ground_truth_mask(), StateError);
  env.reset(1);
  CHECK_THROWS_AS(env.step({std::nan(""), 0.0}), InputError);
  auto bad = canonical_variant();
  bad.variant_id = -1;
  CHECK_THROWS_AS(PointEnv(cfg, bad), ConfigError);
  auto img_bad = canonical_variant();
  img_bad.background = BackgroundKind::ImageFromDirectory;
  CHECK_THROWS_AS(PointEnv(cfg, img_bad), ConfigError);
}

TEST_CASE("rendering is pure and animated noise varies by frame") {
  auto cfg = small_cfg(Task::PointReach);
  PointEnv env(cfg, test_variant());
  auto [obs, st] = env.reset(4);
  CHECK(tensors_equal(env.render_state(st, 5), env.render_state(st, 5)));
  CHECK_FALSE(tensors_equal(env.render_state(st, 0), env.render_state(st, 1)));
  PointEnv solid(cfg, canonical_variant());
  auto [o2, s2] = solid.reset(4);
  CHECK(tensors_equal(solid.render_state(s2, 0), solid.render_state(s2, 1)));
}

TEST_CASE("pushing moves the block and the mask includes it") {
  auto cfg = small_cfg(Task::PointPush, 0);
  PointEnv env(cfg, canonical_variant());
  auto [obs, st] = env.reset(2);
  const Vec2 block0 = st.block_pos;
  const auto mask = env.ground_truth_mask();
  int pop = 0;
  for (auto v : mask.data) pop += v;
  const int expect = disc_popcount_oracle(st.agent_pos, PointEnv::kAgentRadius, 64, 64) +
                     disc_popcount_oracle(st.goal_pos, PointEnv::kGoalRadius, 64, 64) +
                     disc_popcount_oracle(st.block_pos, PointEnv::kBlockRadius, 64, 64);
  CHECK(pop == expect);
  // drive straight at the block
  EnvState s = st;
  bool moved = false;
  for (int t = 0; t < 400 && !moved; ++t) {
    const double dx = s.block_pos[0] - s.agent_pos[0];
    const double dy = s.block_pos[1] - s.agent_pos[1];
    const double n = std::max(1e-9, std::hypot(dx, dy));
    auto r = env.step({dx / n, dy / n});
    s = r.state;
    moved = std::hypot(s.block_pos[0] - block0[0], s.block_pos[1] - block0[1]) > 0.05;
  }
  CHECK(moved);
}

TEST_CASE("variant suites are disjoint, deterministic, and serializable") {
  auto [train, test] = make_variant_suite(1, 5, 123);
  REQUIRE(train.size() == 1);
  REQUIRE(test.size() == 5);
  std::set<int> ids;
  for (const auto& v : train) ids.insert(v.variant_id);
  for (const auto& v : test) CHECK(ids.count(v.variant_id) == 0);

  auto key = [](const Rgb& c) { return (c[0] << 16) | (c[1] << 8) | c[2]; };
  std::set<int> train_colors, test_colors;
  for (const auto& v : train) {
    for (const auto& c : v.palette) train_colors.insert(key(c));
    for (const auto& c : v.distractor_palette) train_colors.insert(key(c));
  }
  for (const auto& v : test) {
    for (const auto& c : v.palette) test_colors.insert(key(c));
    for (const auto& c : v.distractor_palette) test_colors.insert(key(c));
  }
  for (int c : test_colors) CHECK(train_colors.count(c) == 0);

  auto [train2, test2] = make_variant_suite(1, 5, 123);
  for (std::size_t i = 0; i < test.size(); ++i) CHECK(variants_equal(test[i], test2[i]));

  const std::string path = "suite_roundtrip_test.json";
  save_variant_suite(path, train, test);
  auto [ltrain, ltest] = load_variant_suite(path);
  REQUIRE(ltrain.size() == train.size());
  REQUIRE(ltest.size() == test.size());
  for (std::size_t i = 0; i < test.size(); ++i) CHECK(variants_equal(test[i], ltest[i]));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_variant_suite("missing_suite.json"), IoError);
  CHECK_THROWS_AS(make_variant_suite(0, 1, 1), ConfigError);
}

TEST_CASE("state features match task dimensionality") {
  CHECK(state_dim(Task::PointReach, 2) == 14);
  CHECK(state_dim(Task::PointPush, 2) == 18);
  auto cfg = small_cfg(Task::PointPush);
  PointEnv env(cfg, canonical_variant());
  auto [obs, st] = env.reset(9);
  const auto f = state_features(st, Task::PointPush, 2);
  CHECK(static_cast<int>(f.size()) == state_dim(Task::PointPush, 2));
  CHECK(f[0] == st.agent_pos[0]);
  CHECK(f[6] == st.block_pos[0]);
}

TEST_CASE("png round-trip and resize/crop behave") {
  img::Image im(Shape{3, 20, 24});
  Rng rng(3);
  for (auto& v : im.data) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  const std::string path = "io_roundtrip_test.png";
  img::write_png(path, im);
  const auto back = img::read_image(path);
  CHECK(tensors_equal(im, back));
  std::filesystem::remove(path);

  CHECK(tensors_equal(img::resize_bilinear(im, 20, 24), im));  // identity at same size
  const auto crop = img::center_crop(im, 10, 12);
  REQUIRE(crop.shape == Shape{3, 10, 12});
  CHECK(crop.data[0] == im.data[5 * 24 + 6]);

  img::Image solid(Shape{3, 16, 16});
  solid.fill(77);
  const auto up = img::resize_bilinear(solid, 40, 40);
  for (auto v : up.data) CHECK(v == 77);
  CHECK_THROWS_AS(img::read_image("does_not_exist.png"), IoError);
}

TEST_CASE("image directory loader resizes and sorts") {
  namespace fs = std::filesystem;
  const std::string dir = "io_dir_test";
  fs::create_directory(dir);
  img::Image a(Shape{3, 30, 50});
  a.fill(10);
  img::Image b(Shape{3, 60, 40});
  b.fill(200);
  img::write_png(dir + "/b.png", b);
  img::write_png(dir + "/a.png", a);
  const auto set = img::load_image_dir(dir, 24, 24);
  REQUIRE(set.size() == 2);
  REQUIRE(set[0].shape == Shape{3, 24, 24});
  CHECK(set[0].data[0] == 10);   // a.png sorts first
  CHECK(set[1].data[0] == 200);
  fs::remove_all(dir);
  CHECK_THROWS_AS(img::load_image_dir("missing_dir_xyz", 8, 8), IoError);
}

TEST_CASE("render-free stepping matches rendered dynamics") {
  EnvConfig cfg = small_cfg(Task::PointPush);
  EnvConfig fast = cfg;
  fast.render = false;
  PointEnv full(cfg, canonical_variant());
  PointEnv bare(fast, canonical_variant());

  auto [o1, s1] = full.reset(77);
  auto [o2, s2] = bare.reset(77);
  CHECK(states_equal(s1, s2));
  CHECK(o2.numel() == 0);  // no pixels without rendering

  Rng rng(4200);
  for (int t = 0; t < 120; ++t) {
    Action a{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    StepResult r1 = full.step(a);
    StepResult r2 = bare.step(a);
    CHECK(states_equal(r1.state, r2.state));
    CHECK(r1.reward == r2.reward);
    CHECK(r2.obs.numel() == 0);
  }
  CHECK_THROWS_AS(bare.last_frame(), StateError);
}
