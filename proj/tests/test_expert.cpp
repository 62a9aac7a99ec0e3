#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "eagle/envs.hpp"
#include "eagle/errors.hpp"
#include "eagle/expert.hpp"
#include "eagle/rng.hpp"
#include "test_util.hpp"

using namespace eagle;
using namespace eagle::envs;
using namespace eagle::expert;

namespace {

EnvConfig state_cfg(Task task) {
  EnvConfig cfg;
  cfg.task = task;
  cfg.render = false;  // expert tests never look at pixels
  return cfg;
}

EnvState random_state(Rng& rng, Task task, int distractors) {
  EnvState s;
  for (int k = 0; k < 2; ++k) {
    s.agent_pos[k] = rng.uniform(0.0, 1.0);
    s.agent_vel[k] = rng.uniform(-1.0, 1.0);
    s.goal_pos[k] = rng.uniform(0.0, 1.0);
    s.block_pos[k] = task == Task::PointPush ? rng.uniform(0.0, 1.0) : 0.0;
    s.block_vel[k] = task == Task::PointPush ? rng.uniform(-1.0, 1.0) : 0.0;
  }
  for (int i = 0; i < distractors; ++i) {
    DistractorState d;
    for (int k = 0; k < 2; ++k) {
      d.pos[k] = rng.uniform(0.0, 1.0);
      d.vel[k] = rng.uniform(-1.0, 1.0);
    }
    d.radius = rng.uniform(0.02, 0.08);
    s.distractors.push_back(d);
  }
  return s;
}

double rollout_return(PointEnv& env, const ExpertPolicy& policy, std::uint64_t seed) {
  auto [obs, state] = env.reset(seed);
  EnvState s = state;
  double ret = 0;
  for (int t = 0; t < env.config().horizon; ++t) {
    StepResult r = env.step(policy.act(s));
    ret += r.reward;
    s = r.state;
  }
  return ret;
}

}  // namespace

TEST_CASE("scripted reach controller has a fixed point at the goal") {
  ScriptedExpert pd(Task::PointReach);
  EnvState s;
  s.agent_pos = {0.4, 0.7};
  s.goal_pos = {0.4, 0.7};
  s.agent_vel = {0.0, 0.0};
  Action a = pd.act(s);
  CHECK(a[0] == 0.0);
  CHECK(a[1] == 0.0);
}

TEST_CASE("scripted controller saturates at the action box") {
  ScriptedConfig cfg;
  cfg.kp = 500.0;
  ScriptedExpert pd(Task::PointReach, cfg);
  EnvState s;
  s.agent_pos = {0.0, 0.0};
  s.goal_pos = {1.0, 1.0};
  s.agent_vel = {0.0, 0.0};
  Action a = pd.act(s);
  CHECK(a[0] == 1.0);
  CHECK(a[1] == 1.0);
}

TEST_CASE("expert actions always stay inside the action box") {
  Rng rng(4101);
  ScriptedExpert reach(Task::PointReach);
  ScriptedExpert push(Task::PointPush);
  RlExpertConfig rl;
  rl.hidden = 32;
  RlExpert net(Task::PointReach, 2, rl);
  for (int i = 0; i < 500; ++i) {
    EnvState sr = random_state(rng, Task::PointReach, 2);
    EnvState sp = random_state(rng, Task::PointPush, 2);
    for (const Action& a : {reach.act(sr), push.act(sp), net.act(sr)}) {
      CHECK(a[0] >= -1.0);
      CHECK(a[0] <= 1.0);
      CHECK(a[1] >= -1.0);
      CHECK(a[1] <= 1.0);
    }
  }
}

TEST_CASE("scripted expert is deterministic") {
  Rng rng(4102);
  ScriptedExpert a(Task::PointPush);
  ScriptedExpert b(Task::PointPush);
  for (int i = 0; i < 200; ++i) {
    EnvState s = random_state(rng, Task::PointPush, 2);
    Action first = a.act(s);
    Action again = a.act(s);
    Action other = b.act(s);
    CHECK(first == again);
    CHECK(first == other);
  }
}

TEST_CASE("scripted reach expert matches a 10k-sequence random search") {
  PointEnv env(state_cfg(Task::PointReach), canonical_variant());
  ExpertPolicy pd = ExpertPolicy::scripted(Task::PointReach);
  const int episodes = 20;
  const int sequences = 10000;

  double scripted_sum = 0, best_sum = 0;
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t seed = hash_combine(fnv1a64("random-search-oracle"), e);
    scripted_sum += rollout_return(env, pd, seed);

    double best = -1e18;
    Rng rng = substream(90210, "random-search", e);
    for (int k = 0; k < sequences; ++k) {
      auto [obs, state] = env.reset(seed);
      double ret = 0;
      for (int t = 0; t < env.config().horizon; ++t)
        ret += env.step({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)}).reward;
      best = std::max(best, ret);
    }
    best_sum += best;
  }
  const double scripted_mean = scripted_sum / episodes;
  const double best_mean = best_sum / episodes;
  // The controller should be at least as good as the search oracle up to 5%
  // slack; in practice it beats the best random sequence by a wide margin.
  CHECK(scripted_mean >= best_mean - 0.05 * std::abs(best_mean));
}

TEST_CASE("scripted push expert drives the block to the goal") {
  PointEnv env(state_cfg(Task::PointPush), canonical_variant());
  ExpertPolicy pd = ExpertPolicy::scripted(Task::PointPush);
  int successes = 0;
  double total = 0;
  for (int e = 0; e < 20; ++e) {
    total += rollout_return(env, pd, hash_combine(fnv1a64("push-oracle"), e));
    successes += env.success(env.state()) ? 1 : 0;
  }
  CHECK(successes >= 18);
  CHECK(total / 20 >= -120.0);
}

TEST_CASE("n-step buffer computes discounted returns and bootstrap discounts") {
  const double gamma = 0.5;
  NStepBuffer buf(3, gamma, 100);
  auto sv = [](float v) { return std::vector<float>{v}; };
  // Rewards 1,2,3,4 over states 0->1->2->3->4.
  for (int t = 0; t < 4; ++t)
    buf.push(sv(static_cast<float>(t)), {0.1 * t, -0.1 * t}, t + 1.0, sv(static_cast<float>(t + 1)));

  // Two full 3-step spans are ready before the episode ends.
  REQUIRE(buf.size() == 2);
  CHECK(buf.at(0).s == sv(0));
  CHECK(buf.at(0).ret == doctest::Approx(1 + 0.5 * 2 + 0.25 * 3));
  CHECK(buf.at(0).discount == doctest::Approx(0.125));
  CHECK(buf.at(0).s_next == sv(3));
  CHECK(buf.at(1).ret == doctest::Approx(2 + 0.5 * 3 + 0.25 * 4));
  CHECK(buf.at(1).s_next == sv(4));

  // Episode cut: the tail flushes as shrinking spans, all bootstrapping from
  // the final observed state with discount gamma^span.
  buf.end_episode();
  REQUIRE(buf.size() == 4);
  CHECK(buf.at(2).s == sv(2));
  CHECK(buf.at(2).ret == doctest::Approx(3 + 0.5 * 4));
  CHECK(buf.at(2).discount == doctest::Approx(0.25));
  CHECK(buf.at(2).s_next == sv(4));
  CHECK(buf.at(3).s == sv(3));
  CHECK(buf.at(3).ret == doctest::Approx(4));
  CHECK(buf.at(3).discount == doctest::Approx(0.5));
  CHECK(buf.at(3).s_next == sv(4));
}

TEST_CASE("n-step buffer is FIFO at capacity") {
  NStepBuffer buf(1, 0.99, 8);
  auto sv = [](float v) { return std::vector<float>{v}; };
  for (int t = 0; t < 30; ++t) buf.push(sv(static_cast<float>(t)), {0, 0}, 0.0, sv(0));
  CHECK(buf.size() == 8);
  CHECK(buf.at(0).s == sv(22));  // oldest surviving transition
  CHECK(buf.at(7).s == sv(29));

  Rng rng(4103);
  for (int i = 0; i < 50; ++i) {
    const StateTransition& t = buf.sample(rng);
    CHECK(t.s[0] >= 22.0f);
    CHECK(t.s[0] <= 29.0f);
  }
}

TEST_CASE("target networks track online networks at rate 0.01") {
  RlExpertConfig cfg;
  cfg.hidden = 16;
  RlExpert net(Task::PointReach, 2, cfg);
  const float tau = 0.01f;

  // Snapshot targets, scramble the online critics, then soft-update.
  Rng rng(4104);
  std::vector<std::string> layers;
  for (const char* l : {".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b", ".fc3.w", ".fc3.b"})
    for (int q = 1; q <= 2; ++q) layers.push_back("q" + std::to_string(q) + l);

  std::vector<Tensor<float>> before;
  for (const auto& name : layers) before.push_back(net.params().at("t" + name).value);
  for (const auto& name : layers) {
    Tensor<float>& online = net.params().at(name).value;
    for (std::size_t i = 0; i < online.numel(); ++i)
      online[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  net.soft_update_targets();

  for (std::size_t k = 0; k < layers.size(); ++k) {
    const Tensor<float>& online = net.params().at(layers[k]).value;
    const Tensor<float>& target = net.params().at("t" + layers[k]).value;
    for (std::size_t i = 0; i < online.numel(); ++i)
      CHECK(target[i] == tau * online[i] + (1.0f - tau) * before[k][i]);
  }
}

TEST_CASE("twin critics are distinct and targets take their minimum") {
  RlExpertConfig cfg;
  cfg.hidden = 32;
  cfg.batch_size = 16;
  RlExpert net(Task::PointReach, 2, cfg);

  // A few real updates so both critics move from their init.
  Rng rng(4105);
  NStepBuffer buf(cfg.n_step, cfg.gamma, 1000);
  const int dim = state_dim(Task::PointReach, 2);
  for (int t = 0; t < 200; ++t) {
    std::vector<float> s(dim), sn(dim);
    for (auto& v : s) v = static_cast<float>(rng.uniform(0.0, 1.0));
    for (auto& v : sn) v = static_cast<float>(rng.uniform(0.0, 1.0));
    buf.push(s, {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)}, rng.uniform(-1.0, 0.0), sn);
  }
  buf.end_episode();
  for (int u = 0; u < 10; ++u) net.update(buf, rng);

  bool differ = false;
  const Tensor<float>& w1 = net.params().at("q1.fc1.w").value;
  const Tensor<float>& w2 = net.params().at("q2.fc1.w").value;
  for (std::size_t i = 0; i < w1.numel() && !differ; ++i) differ = w1[i] != w2[i];
  CHECK(differ);

  const int B = 8;
  Tensor<float> S(Shape{B, dim}), A(Shape{B, 2});
  for (auto& v : S.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  for (auto& v : A.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto [q1, q2] = net.target_q_pair(S, A);
  std::vector<float> qmin = net.target_q_min(S, A);
  bool pair_differs = false;
  for (int i = 0; i < B; ++i) {
    CHECK(qmin[i] == std::min(q1[i], q2[i]));
    pair_differs = pair_differs || q1[i] != q2[i];
  }
  CHECK(pair_differs);
}

TEST_CASE("sustained critic divergence aborts training") {
  PointEnv env(state_cfg(Task::PointReach), canonical_variant());
  RlExpertConfig cfg;
  cfg.hidden = 16;
  cfg.total_steps = 2000;
  cfg.warmup_steps = 100;
  cfg.update_every = 1;
  cfg.batch_size = 16;
  cfg.eval_every = 100000;
  cfg.divergence_threshold = 1e-12;  // any real critic loss trips the guard
  cfg.divergence_patience = 5;
  CHECK_THROWS_AS(train_rl_expert(env, cfg), TrainingFault);
}

// The TD3 expert should recover most of the scripted controller's reach
// performance from scratch. With the default config the three probe seeds all
// clear a -60 mean return (scripted is about -5.9, random about -250) well
// before 30k steps; early stopping keeps the test short.
TEST_CASE("td3 expert learns point reach close to scripted level") {
  PointEnv env(state_cfg(Task::PointReach), canonical_variant());
  RlExpertConfig cfg;
  cfg.seed = 3;
  cfg.total_steps = 30000;
  cfg.early_stop_eval = -60.0;

  double best_eval = -std::numeric_limits<double>::infinity();
  auto track = [&](const RlProgress& p) {
    if (p.eval_return == p.eval_return) best_eval = std::max(best_eval, p.eval_return);
  };
  auto net = train_rl_expert(env, cfg, track);
  CHECK(best_eval >= -60.0);

  // The trained policy should also hold up on freshly seeded episodes.
  PointEnv eval_env(state_cfg(Task::PointReach), canonical_variant());
  const double ret = evaluate_expert(ExpertPolicy::learned(std::move(net)), eval_env, 10, 424242);
  CHECK(ret >= -80.0);
}
