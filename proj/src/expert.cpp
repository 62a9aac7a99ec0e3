#include "eagle/expert.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace eagle::expert {

using envs::Action;
using envs::EnvState;
using envs::PointEnv;
using envs::Task;
using envs::Vec2;

namespace {

double norm2(const Vec2& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1]); }

Vec2 sub2(const Vec2& a, const Vec2& b) { return {a[0] - b[0], a[1] - b[1]}; }

Vec2 add_scaled(const Vec2& a, const Vec2& d, double s) {
  return {a[0] + d[0] * s, a[1] + d[1] * s};
}

double dot2(const Vec2& a, const Vec2& b) { return a[0] * b[0] + a[1] * b[1]; }

double cross2(const Vec2& a, const Vec2& b) { return a[0] * b[1] - a[1] * b[0]; }

Vec2 clamp_arena(Vec2 p) {
  return {std::clamp(p[0], 0.02, 0.98), std::clamp(p[1], 0.02, 0.98)};
}

std::vector<float> features_of(const EnvState& s, Task task, int distractors) {
  const std::vector<double> f = envs::state_features(s, task, distractors);
  return std::vector<float>(f.begin(), f.end());
}

}  // namespace

// --- ScriptedExpert ---

ScriptedExpert::ScriptedExpert(Task task, ScriptedConfig cfg) : task_(task), cfg_(cfg) {
  cfg_.validate();
}

Action ScriptedExpert::act(const EnvState& s) const {
  const Vec2 target = task_ == Task::PointReach ? s.goal_pos : push_target(s);
  Action a;
  for (int k = 0; k < 2; ++k)
    a[k] = std::clamp(cfg_.kp * (target[k] - s.agent_pos[k]) - cfg_.kd * s.agent_vel[k], -1.0, 1.0);
  return a;
}

Vec2 ScriptedExpert::push_target(const EnvState& s) const {
  const double contact = PointEnv::kAgentRadius + PointEnv::kBlockRadius;
  const Vec2 to_goal = sub2(s.goal_pos, s.block_pos);
  const double d_goal = norm2(to_goal);
  if (d_goal < PointEnv::kSuccessDist * 0.6) return s.agent_pos;  // done: brake in place
  const Vec2 dir{to_goal[0] / d_goal, to_goal[1] / d_goal};

  // already lined up behind the block: drive through its center toward the goal
  const Vec2 rel = sub2(s.block_pos, s.agent_pos);
  const double d_rel = norm2(rel);
  if (d_rel > 1e-9 && d_rel <= contact * cfg_.stage_margin * 1.4 &&
      dot2({rel[0] / d_rel, rel[1] / d_rel}, dir) >= cfg_.align_dot)
    return add_scaled(s.block_pos, dir, contact * 0.5);

  const Vec2 stage = clamp_arena(add_scaled(s.block_pos, dir, -contact * cfg_.stage_margin));

  // detour sideways when the straight path to the staging point clips the block
  const Vec2 seg = sub2(stage, s.agent_pos);
  const double len = norm2(seg);
  if (len > 1e-9) {
    const double t = std::clamp(dot2(sub2(s.block_pos, s.agent_pos), seg) / (len * len), 0.0, 1.0);
    const Vec2 closest = add_scaled(s.agent_pos, seg, t);
    if (norm2(sub2(closest, s.block_pos)) < contact * 1.05) {
      const double side = cross2(dir, sub2(s.agent_pos, s.block_pos)) >= 0.0 ? 1.0 : -1.0;
      const Vec2 perp{-dir[1] * side, dir[0] * side};
      return clamp_arena(add_scaled(s.block_pos, perp, contact * cfg_.detour_margin));
    }
  }
  return stage;
}

// --- NStepBuffer ---

NStepBuffer::NStepBuffer(int n_step, double gamma, std::size_t capacity)
    : n_(n_step), gamma_(gamma), capacity_(capacity) {
  if (n_step < 1) throw ConfigError("n-step buffer: n_step must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("n-step buffer: gamma out of (0,1]");
  if (capacity == 0) throw ConfigError("n-step buffer: capacity must be > 0");
}

void NStepBuffer::push(std::vector<float> s, const Action& a, double r,
                       const std::vector<float>& s_next) {
  pending_.push_back({std::move(s), {static_cast<float>(a[0]), static_cast<float>(a[1])}, r});
  last_next_ = s_next;
  if (static_cast<int>(pending_.size()) >= n_) emit(static_cast<std::size_t>(n_), s_next);
}

void NStepBuffer::end_episode() {
  if (pending_.empty()) return;
  // time-limit cut: flush shrinking spans, all bootstrapping from the final state
  const std::vector<float> boot = last_next_;
  while (!pending_.empty()) emit(pending_.size(), boot);
}

void NStepBuffer::emit(std::size_t span, const std::vector<float>& boot) {
  StateTransition t;
  t.s = std::move(pending_.front().s);
  t.a = pending_.front().a;
  double ret = 0.0, g = 1.0;
  for (std::size_t k = 0; k < span; ++k) {
    ret += g * pending_[k].r;
    g *= gamma_;
  }
  t.ret = static_cast<float>(ret);
  t.discount = static_cast<float>(g);
  t.s_next = boot;
  pending_.pop_front();
  done_.push_back(std::move(t));
  while (done_.size() > capacity_) done_.pop_front();
}

const StateTransition& NStepBuffer::sample(Rng& rng) const {
  if (done_.empty()) throw StateError("n-step buffer: sample from empty buffer");
  return done_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(done_.size()) - 1))];
}

void NStepBuffer::clear() {
  pending_.clear();
  done_.clear();
}

// --- RlExpert ---

void RlExpertConfig::validate() const {
  if (hidden < 1 || total_steps < 1 || batch_size < 1 || n_step < 1)
    throw ConfigError("rl expert: bad sizes");
  if (warmup_steps < 0 || update_every < 1 || eval_every < 1 || eval_episodes < 1)
    throw ConfigError("rl expert: bad schedule");
  if (!(gamma > 0.0 && gamma <= 1.0) || !(tau > 0.0 && tau <= 1.0) || lr <= 0.0)
    throw ConfigError("rl expert: bad gamma/tau/lr");
  if (explore_sigma < 0.0 || target_sigma < 0.0 || target_noise_clip < 0.0)
    throw ConfigError("rl expert: bad noise");
  if (divergence_threshold <= 0.0 || divergence_patience < 1)
    throw ConfigError("rl expert: bad divergence guard");
}

RlExpert::RlExpert(Task task, int distractor_count, RlExpertConfig cfg)
    : task_(task), distractors_(distractor_count),
      in_dim_(envs::state_dim(task, distractor_count)), cfg_(cfg) {
  cfg_.validate();
  Rng rng = substream(cfg_.seed, "rl-expert-init");
  const int h = cfg_.hidden;
  auto add_mlp = [&](const std::string& prefix, int in) {
    params_.add(prefix + ".fc1.w", {h, in}, in, rng);
    params_.add_zero(prefix + ".fc1.b", {h});
    params_.add(prefix + ".fc2.w", {h, h}, h, rng);
    params_.add_zero(prefix + ".fc2.b", {h});
    const int out = prefix == "actor" ? 2 : 1;
    params_.add(prefix + ".fc3.w", {out, h}, h, rng);
    params_.add_zero(prefix + ".fc3.b", {out});
  };
  add_mlp("actor", in_dim_);
  add_mlp("q1", in_dim_ + 2);
  add_mlp("q2", in_dim_ + 2);
  add_mlp("tq1", in_dim_ + 2);
  add_mlp("tq2", in_dim_ + 2);
  for (const char* layer : {".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b", ".fc3.w", ".fc3.b"})
    for (int q = 1; q <= 2; ++q) {
      const std::string src = "q" + std::to_string(q) + layer;
      params_.at("t" + src).value = params_.at(src).value;
    }

  std::vector<nn::Param<float>*> actor_ps, critic_ps;
  for (auto& p : params_) {
    if (p.name.rfind("actor.", 0) == 0) actor_ps.push_back(&p);
    if (p.name.rfind("q1.", 0) == 0 || p.name.rfind("q2.", 0) == 0) critic_ps.push_back(&p);
  }
  opt_actor_ = std::make_unique<nn::Adam<float>>(actor_ps, static_cast<float>(cfg_.lr));
  opt_critic_ = std::make_unique<nn::Adam<float>>(critic_ps, static_cast<float>(cfg_.lr));
}

RlExpert::Ref RlExpert::build_actor(Graph& g, Ref s) {
  Ref h1 = g.relu(g.linear(s, g.param(params_.at("actor.fc1.w")), g.param(params_.at("actor.fc1.b"))));
  Ref h2 = g.relu(g.linear(h1, g.param(params_.at("actor.fc2.w")), g.param(params_.at("actor.fc2.b"))));
  return g.tanh_(g.linear(h2, g.param(params_.at("actor.fc3.w")), g.param(params_.at("actor.fc3.b"))));
}

RlExpert::Ref RlExpert::build_critic(Graph& g, const std::string& prefix, Ref s, Ref a) {
  Ref x = g.concat_cols(s, a);
  Ref h1 = g.relu(g.linear(x, g.param(params_.at(prefix + ".fc1.w")),
                           g.param(params_.at(prefix + ".fc1.b"))));
  Ref h2 = g.relu(g.linear(h1, g.param(params_.at(prefix + ".fc2.w")),
                           g.param(params_.at(prefix + ".fc2.b"))));
  return g.linear(h2, g.param(params_.at(prefix + ".fc3.w")), g.param(params_.at(prefix + ".fc3.b")));
}

Tensor<float> RlExpert::actor_forward(const Tensor<float>& states) {
  Graph g;
  return g.value(build_actor(g, g.constant(states)));
}

Action RlExpert::act(const EnvState& s) { return act_features(features_of(s, task_, distractors_)); }

Action RlExpert::act_features(const std::vector<float>& f) {
  if (static_cast<int>(f.size()) != in_dim_) throw InputError("rl expert: bad feature size");
  Tensor<float> in(Shape{1, in_dim_});
  std::copy(f.begin(), f.end(), in.data.begin());
  const Tensor<float> out = actor_forward(in);
  return {std::clamp(static_cast<double>(out[0]), -1.0, 1.0),
          std::clamp(static_cast<double>(out[1]), -1.0, 1.0)};
}

Action RlExpert::act_explore(const std::vector<float>& f, Rng& rng) {
  Action a = act_features(f);
  for (int k = 0; k < 2; ++k)
    a[k] = std::clamp(a[k] + rng.normal(0.0, cfg_.explore_sigma), -1.0, 1.0);
  return a;
}

void RlExpert::soft_update_targets() {
  const float tau = static_cast<float>(cfg_.tau);
  for (const char* layer : {".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b", ".fc3.w", ".fc3.b"})
    for (int q = 1; q <= 2; ++q) {
      const std::string src = "q" + std::to_string(q) + layer;
      Tensor<float>& online = params_.at(src).value;
      Tensor<float>& target = params_.at("t" + src).value;
      for (std::size_t i = 0; i < online.numel(); ++i)
        target[i] = tau * online[i] + (1.0f - tau) * target[i];
    }
}

std::vector<float> RlExpert::target_q_min(const Tensor<float>& states, const Tensor<float>& actions) {
  Graph g;
  Ref s = g.constant(states);
  Ref a = g.constant(actions);
  Ref q = g.minimum(build_critic(g, "tq1", s, a), build_critic(g, "tq2", s, a));
  const Tensor<float>& v = g.value(q);
  return std::vector<float>(v.data.begin(), v.data.end());
}

std::pair<std::vector<float>, std::vector<float>> RlExpert::target_q_pair(
    const Tensor<float>& states, const Tensor<float>& actions) {
  Graph g;
  Ref s = g.constant(states);
  Ref a = g.constant(actions);
  const Tensor<float>& v1 = g.value(build_critic(g, "tq1", s, a));
  const Tensor<float>& v2 = g.value(build_critic(g, "tq2", s, a));
  return {std::vector<float>(v1.data.begin(), v1.data.end()),
          std::vector<float>(v2.data.begin(), v2.data.end())};
}

std::pair<double, double> RlExpert::update(const NStepBuffer& buffer, Rng& rng) {
  const int B = cfg_.batch_size;
  Tensor<float> S(Shape{B, in_dim_}), SN(Shape{B, in_dim_}), A(Shape{B, 2});
  std::vector<float> ret(B), disc(B);
  for (int i = 0; i < B; ++i) {
    const StateTransition& t = buffer.sample(rng);
    std::copy(t.s.begin(), t.s.end(), S.data.begin() + static_cast<std::ptrdiff_t>(i) * in_dim_);
    std::copy(t.s_next.begin(), t.s_next.end(),
              SN.data.begin() + static_cast<std::ptrdiff_t>(i) * in_dim_);
    A.at2(i, 0) = t.a[0];
    A.at2(i, 1) = t.a[1];
    ret[i] = t.ret;
    disc[i] = t.discount;
  }

  // TD target: smoothed target action, min of the two target critics
  Tensor<float> AN = actor_forward(SN);
  for (auto& v : AN.data) {
    const double eps = std::clamp(rng.normal(0.0, cfg_.target_sigma), -cfg_.target_noise_clip,
                                  cfg_.target_noise_clip);
    v = static_cast<float>(std::clamp(static_cast<double>(v) + eps, -1.0, 1.0));
  }
  const std::vector<float> qn = target_q_min(SN, AN);
  Tensor<float> Y(Shape{B, 1});
  for (int i = 0; i < B; ++i) Y[i] = ret[i] + disc[i] * qn[i];

  double critic_loss = 0.0, actor_loss = 0.0;
  {
    Graph g;
    Ref s = g.constant(S), a = g.constant(A), y = g.constant(Y);
    Ref loss = g.add(g.mse_mean(build_critic(g, "q1", s, a), y),
                     g.mse_mean(build_critic(g, "q2", s, a), y));
    critic_loss = g.value(loss)[0];
    opt_critic_->zero_grad();
    g.backward(loss);
    opt_critic_->step();
  }
  {
    Graph g;
    Ref s = g.constant(S);
    Ref pa = build_actor(g, s);
    Ref q = g.minimum(build_critic(g, "q1", s, pa), build_critic(g, "q2", s, pa));
    Ref loss = g.scale(g.mean_all(q), -1.0f);
    actor_loss = g.value(loss)[0];
    opt_actor_->zero_grad();
    g.backward(loss);
    opt_actor_->step();
  }
  soft_update_targets();
  return {critic_loss, actor_loss};
}

void RlExpert::train(PointEnv& env, const std::function<void(const RlProgress&)>& on_progress) {
  if (env.config().task != task_ || env.config().distractor_count != distractors_)
    throw ConfigError("rl expert: env task/distractors do not match the policy");

  Rng act_rng = substream(cfg_.seed, "rl-expert-act");
  Rng update_rng = substream(cfg_.seed, "rl-expert-update");
  NStepBuffer buffer(cfg_.n_step, cfg_.gamma, cfg_.buffer_capacity);

  envs::EnvConfig eval_cfg = env.config();
  eval_cfg.render = false;
  PointEnv eval_env(eval_cfg, env.variant());
  ExpertPolicy self = ExpertPolicy::learned(std::shared_ptr<RlExpert>(this, [](RlExpert*) {}));

  RlProgress prog;
  prog.eval_return = std::numeric_limits<double>::quiet_NaN();
  int divergence_streak = 0;
  int episode = 0;
  double episode_return = 0.0;
  auto ep_seed = [&](int e) {
    return hash_combine(hash_combine(cfg_.seed, fnv1a64("rl-expert-episode")),
                        static_cast<std::uint64_t>(e));
  };
  auto [obs, state] = env.reset(ep_seed(episode));
  std::vector<float> feat = features_of(state, task_, distractors_);

  for (int step = 1; step <= cfg_.total_steps; ++step) {
    Action a;
    if (step <= cfg_.warmup_steps) {
      a = {act_rng.uniform(-1.0, 1.0), act_rng.uniform(-1.0, 1.0)};
    } else {
      a = act_explore(feat, act_rng);
    }
    const envs::StepResult r = env.step(a);
    const std::vector<float> feat_next = features_of(r.state, task_, distractors_);
    buffer.push(feat, a, r.reward, feat_next);
    episode_return += r.reward;
    feat = feat_next;

    if (r.done) {
      buffer.end_episode();
      ++episode;
      prog.step = step;
      prog.episodes = episode;
      prog.episode_return = episode_return;
      if (on_progress) on_progress(prog);
      episode_return = 0.0;
      auto [obs2, state2] = env.reset(ep_seed(episode));
      feat = features_of(state2, task_, distractors_);
    }

    if (step > cfg_.warmup_steps && step % cfg_.update_every == 0 &&
        buffer.size() >= static_cast<std::size_t>(cfg_.batch_size)) {
      const auto [lc, la] = update(buffer, update_rng);
      prog.critic_loss = lc;
      prog.actor_loss = la;
      if (!std::isfinite(lc) || lc > cfg_.divergence_threshold) {
        if (++divergence_streak >= cfg_.divergence_patience)
          throw TrainingFault("rl expert diverged: critic loss " + std::to_string(lc) + " for " +
                              std::to_string(divergence_streak) + " consecutive updates at step " +
                              std::to_string(step));
      } else {
        divergence_streak = 0;
      }
    }

    if (step % cfg_.eval_every == 0) {
      prog.eval_return = evaluate_expert(self, eval_env, cfg_.eval_episodes,
                                         hash_combine(cfg_.seed, fnv1a64("rl-expert-eval")));
      if (std::isfinite(cfg_.early_stop_eval) && prog.eval_return >= cfg_.early_stop_eval) {
        prog.step = step;
        if (on_progress) on_progress(prog);
        return;
      }
    }
  }
}

// --- ExpertPolicy ---

ExpertPolicy ExpertPolicy::scripted(Task task, ScriptedConfig cfg) {
  ExpertPolicy p;
  p.kind_ = Kind::Scripted;
  p.scripted_ = std::make_shared<ScriptedExpert>(task, cfg);
  return p;
}

ExpertPolicy ExpertPolicy::learned(std::shared_ptr<RlExpert> net) {
  if (!net) throw InputError("ExpertPolicy::learned: null expert");
  ExpertPolicy p;
  p.kind_ = Kind::Learned;
  p.learned_ = std::move(net);
  return p;
}

Action ExpertPolicy::act(const EnvState& s) const {
  Action a = kind_ == Kind::Scripted ? scripted_->act(s) : learned_->act(s);
  a[0] = std::clamp(a[0], -1.0, 1.0);
  a[1] = std::clamp(a[1], -1.0, 1.0);
  return a;
}

std::unique_ptr<RlExpert> train_rl_expert(PointEnv& env, RlExpertConfig cfg,
                                          const std::function<void(const RlProgress&)>& on_progress) {
  auto ex = std::make_unique<RlExpert>(env.config().task, env.config().distractor_count, cfg);
  ex->train(env, on_progress);
  return ex;
}

double evaluate_expert(const ExpertPolicy& policy, PointEnv& env, int episodes,
                       std::uint64_t seed_base) {
  if (episodes < 1) throw InputError("evaluate_expert: episodes must be >= 1");
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    auto [obs, state] = env.reset(hash_combine(seed_base, static_cast<std::uint64_t>(e)));
    EnvState s = state;
    for (int t = 0; t < env.config().horizon; ++t) {
      const envs::StepResult r = env.step(policy.act(s));
      total += r.reward;
      s = r.state;
    }
  }
  return total / episodes;
}

}  // namespace eagle::expert
