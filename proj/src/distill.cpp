#include "eagle/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string_view>
#include <utility>

#include "eagle/errors.hpp"
#include "eagle/metrics.hpp"

namespace eagle::distill {

using envs::Action;
using envs::EnvState;
using expert::ExpertPolicy;
using mask::MaskModule;

// --- student ---

void StudentConfig::validate() const {
  if (in_channels <= 0 || in_channels % 3 != 0) throw ConfigError("student: bad in_channels");
  if (height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0)
    throw ConfigError("student: height/width must be multiples of 4 and >= 8");
  if (channels < 1 || hidden < 1 || action_dim < 1) throw ConfigError("student: bad net dims");
  if (lr <= 0) throw ConfigError("student: bad lr");
}

StudentPolicy::StudentPolicy(StudentConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(substream(seed, "student-init"));
  const int C = cfg_.channels, in = cfg_.in_channels;
  const int lh = mask::conv_out(mask::conv_out(cfg_.height, 2), 2);
  const int lw = mask::conv_out(mask::conv_out(cfg_.width, 2), 2);
  const int feat = C * lh * lw;
  params_.add("enc.conv1.w", {C, in, 3, 3}, in * 9, rng);
  params_.add_zero("enc.conv1.b", {C});
  params_.add("enc.conv2.w", {C, C, 3, 3}, C * 9, rng);
  params_.add_zero("enc.conv2.b", {C});
  params_.add("enc.conv3.w", {C, C, 3, 3}, C * 9, rng);
  params_.add_zero("enc.conv3.b", {C});
  params_.add("head.fc1.w", {cfg_.hidden, feat}, feat, rng);
  params_.add_zero("head.fc1.b", {cfg_.hidden});
  params_.add("head.fc2.w", {cfg_.action_dim, cfg_.hidden}, cfg_.hidden, rng);
  params_.add_zero("head.fc2.b", {cfg_.action_dim});
  opt_ = std::make_unique<nn::Adam<float>>(params_.all(), static_cast<float>(cfg_.lr));
}

StudentPolicy::Ref StudentPolicy::build(Graph& g, Ref obs) {
  Ref c1 = g.relu(g.conv2d(obs, g.param(params_.at("enc.conv1.w")),
                           g.param(params_.at("enc.conv1.b")), 2, 1));
  Ref c2 = g.relu(g.conv2d(c1, g.param(params_.at("enc.conv2.w")),
                           g.param(params_.at("enc.conv2.b")), 2, 1));
  Ref c3 = g.relu(g.conv2d(c2, g.param(params_.at("enc.conv3.w")),
                           g.param(params_.at("enc.conv3.b")), 1, 1));
  Ref h = g.relu(g.linear(g.flatten(c3), g.param(params_.at("head.fc1.w")),
                          g.param(params_.at("head.fc1.b"))));
  return g.tanh_(g.linear(h, g.param(params_.at("head.fc2.w")), g.param(params_.at("head.fc2.b"))));
}

namespace {

Tensor<float> as_obs_batch(const Tensor<float>& t, int c, int h, int w) {
  if (t.shape.size() == 4) {
    if (t.shape[1] != c || t.shape[2] != h || t.shape[3] != w)
      throw InputError("student: bad input shape " + shape_str(t.shape));
    return t;
  }
  require_shape(t, Shape{c, h, w}, "student input");
  Tensor<float> out = t;
  out.shape = Shape{1, c, h, w};
  return out;
}

}  // namespace

Tensor<float> StudentPolicy::forward(const Tensor<float>& obs) {
  Graph g;
  Ref out = build(g, g.constant(as_obs_batch(obs, cfg_.in_channels, cfg_.height, cfg_.width)));
  return g.value(out);
}

Action StudentPolicy::act(const Tensor<float>& obs) {
  const Tensor<float> out = forward(obs);
  return {std::clamp(static_cast<double>(out[0]), -1.0, 1.0),
          std::clamp(static_cast<double>(out[1]), -1.0, 1.0)};
}

// --- Eq. 6 / Eq. 7 ---

Tensor<float> augment_batch(const Tensor<float>& obs, MaskModule* mask_module,
                            const AugContext& actx, Rng& rng) {
  if (obs.shape.size() != 4) throw InputError("augment_batch: need (B,C,H,W)");
  const int B = obs.shape[0], H = obs.shape[2], W = obs.shape[3];
  const std::size_t sample = obs.numel() / B;
  const aug::AugmentSpec spec = actx.resolved();

  Tensor<float> masks;  // (B,H,W) when masked
  if (mask_module) masks = mask_module->infer_mask(obs);

  Tensor<float> out(obs.shape);
  Tensor<float> one(Shape{obs.shape[1], H, W});
  Tensor<float> m_one(Shape{H, W});
  for (int b = 0; b < B; ++b) {
    std::copy_n(obs.ptr() + b * sample, sample, one.ptr());
    const std::uint64_t seed = rng.next_u64();
    Tensor<float> aug_b;
    if (mask_module) {
      std::copy_n(masks.ptr() + static_cast<std::size_t>(b) * H * W, m_one.numel(), m_one.ptr());
      aug_b = aug::masked_augment(one, m_one, spec, seed);
    } else {
      aug_b = aug::apply_augment(one, spec, seed);
    }
    std::copy_n(aug_b.ptr(), sample, out.ptr() + b * sample);
  }
  return out;
}

namespace {

Tensor<float> expert_targets(const Batch& batch, const ExpertPolicy& expert) {
  const int B = batch.a.shape[0];
  Tensor<float> t(Shape{B, 2});
  for (int b = 0; b < B; ++b) {
    const Action a = expert.act(batch.s[b]);
    t.at2(b, 0) = static_cast<float>(a[0]);
    t.at2(b, 1) = static_cast<float>(a[1]);
  }
  return t;
}

std::uint64_t batch_fingerprint(const Tensor<float>& o_aug, const Tensor<float>& targets) {
  const auto bytes = [](const Tensor<float>& t) {
    return std::string_view(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  };
  return hash_combine(fnv1a64(bytes(o_aug)), fnv1a64(bytes(targets)));
}

DistillReport distill_impl(const Batch& batch, MaskModule* mask_module, StudentPolicy& student,
                           const ExpertPolicy& expert, const AugContext& actx, Rng& rng,
                           const DistillHooks& hooks, bool step_optimizer) {
  if (batch.a.shape.size() != 2 || batch.a.shape[0] < 1)
    throw InputError("distill: empty batch");
  const Tensor<float> o_aug = augment_batch(batch.o, mask_module, actx, rng);
  const Tensor<float> targets = hooks.targets ? *hooks.targets : expert_targets(batch, expert);

  StudentPolicy::Graph g;
  StudentPolicy::Ref out = hooks.student_out
                               ? g.constant(*hooks.student_out)
                               : student.build(g, g.constant(o_aug));
  StudentPolicy::Ref loss = g.sq_l2_rowmean(out, g.constant(targets));

  DistillReport rep;
  rep.loss = g.value(loss)[0];
  rep.alpha = actx.resolved().alpha;
  if (!std::isfinite(rep.loss)) {
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(batch_fingerprint(o_aug, targets)));
    throw TrainingFault("distill: non-finite loss at step " + std::to_string(actx.step) +
                        " (batch fingerprint " + fp + ")");
  }
  if (step_optimizer) {
    if (hooks.student_out) throw InputError("distill: cannot step with a student override");
    student.optimizer().zero_grad();
    g.backward(loss);
    rep.stepped = student.optimizer().step();
  }
  return rep;
}

}  // namespace

DistillReport distill_loss(const Batch& batch, MaskModule* mask_module, StudentPolicy& student,
                           const ExpertPolicy& expert, const AugContext& actx, Rng& rng,
                           const DistillHooks& hooks) {
  return distill_impl(batch, mask_module, student, expert, actx, rng, hooks, false);
}

DistillReport student_train_step(const Batch& batch, MaskModule* mask_module,
                                 StudentPolicy& student, const ExpertPolicy& expert,
                                 const AugContext& actx, Rng& rng, const DistillHooks& hooks) {
  return distill_impl(batch, mask_module, student, expert, actx, rng, hooks, true);
}

JointMetrics joint_update(const PixelReplay& buffer, MaskModule& mask_module,
                          StudentPolicy& student, const ExpertPolicy& expert, int batch,
                          const AugContext& actx, Rng& rng) {
  const Batch b = buffer.sample(batch, rng);
  JointMetrics m;
  m.mask = mask_module.train_step(b.o, b.a, b.o_next);
  m.distill = student_train_step(b, &mask_module, student, expert, actx, rng);
  return m;
}

// --- rollouts ---

RolloutWorker::RolloutWorker(envs::PointEnv& env, PixelReplay& buffer, const ExpertPolicy* expert,
                             StudentPolicy* student, double mix, std::uint64_t seed,
                             double student_noise)
    : env_(env),
      buffer_(buffer),
      expert_(expert),
      student_(student),
      mix_(mix),
      student_noise_(student_noise),
      driver_rng_(substream(seed, "rollout-driver")),
      noise_rng_(substream(seed, "rollout-noise")),
      seed_(seed) {
  if (mix_ < 0.0 || mix_ > 1.0) throw ConfigError("rollout: mix must be in [0,1]");
  if (!expert_ && mix_ > 0.0) throw ConfigError("rollout: expert required when mix > 0");
  if (!student_ && mix_ < 1.0) throw ConfigError("rollout: student required when mix < 1");
  if (!env_.config().render) throw ConfigError("rollout: env must render pixels");
}

void RolloutWorker::begin_episode() {
  const std::uint64_t ep_seed = hash_combine(hash_combine(seed_, fnv1a64("episode")),
                                             static_cast<std::uint64_t>(episodes_));
  auto [obs, state] = env_.reset(ep_seed);
  obs_ = std::move(obs);
  state_ = state;
  buffer_.begin_episode(env_.last_frame());
  expert_driving_ = expert_ && driver_rng_.bernoulli(mix_);
  episode_open_ = true;
  episode_return_ = 0;
  ++episodes_;
}

std::optional<double> RolloutWorker::step() {
  if (!episode_open_) begin_episode();
  Action a;
  if (expert_driving_) {
    a = expert_->act(state_);
  } else {
    a = student_->act(obs_);
    if (student_noise_ > 0.0)
      for (int k = 0; k < 2; ++k)
        a[k] = std::clamp(a[k] + noise_rng_.normal(0.0, student_noise_), -1.0, 1.0);
  }
  const envs::StepResult r = env_.step(a);
  buffer_.push_step(env_.last_frame(), a, r.reward, state_, r.state, r.done);
  episode_return_ += r.reward;
  state_ = r.state;
  obs_ = r.obs;
  if (!r.done) return std::nullopt;
  episode_open_ = false;
  return episode_return_;
}

int collect_rollout(const ExpertPolicy* expert, StudentPolicy* student, envs::PointEnv& env,
                    PixelReplay& buffer, int steps, double mix, std::uint64_t seed) {
  if (steps < 0) throw InputError("collect_rollout: negative step count");
  RolloutWorker worker(env, buffer, expert, student, mix, seed);
  for (int i = 0; i < steps; ++i) worker.step();
  return worker.episodes_started();
}

// --- presets ---

Preset preset_from_string(const std::string& s) {
  if (s == "eagle") return Preset::Eagle;
  if (s == "e-aug") return Preset::EAug;
  if (s == "q-only") return Preset::QOnly;
  if (s == "q-aug") return Preset::QAug;
  if (s == "q-mask") return Preset::QMask;
  throw ConfigError("unknown preset '" + s + "'");
}

std::string preset_to_string(Preset p) {
  switch (p) {
    case Preset::Eagle: return "eagle";
    case Preset::EAug: return "e-aug";
    case Preset::QOnly: return "q-only";
    case Preset::QAug: return "q-aug";
    case Preset::QMask: return "q-mask";
  }
  throw StateError("bad preset enum");
}

bool preset_uses_expert(Preset p) { return p == Preset::Eagle || p == Preset::EAug; }

bool preset_uses_mask(Preset p) { return p == Preset::Eagle || p == Preset::QMask; }

void TrainConfig::validate() const {
  mask.validate();
  student.validate();
  if (total_steps < 1 || update_interval < 1 || batch < 1 || min_buffer < 1)
    throw ConfigError("train: bad schedule");
  if (mix < 0.0 || mix > 1.0) throw ConfigError("train: mix must be in [0,1]");
  if (!preset_uses_expert(preset) && mix != 0.0)
    throw ConfigError("train: RL presets are expert-free; set mix = 0");
  if (buffer_capacity < static_cast<std::size_t>(batch))
    throw ConfigError("train: buffer smaller than batch");
  if (overlay_images < 1) throw ConfigError("train: overlay_images must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0) || !(tau > 0.0 && tau <= 1.0) || n_step < 1)
    throw ConfigError("train: bad TD hyperparameters");
  if (explore_sigma < 0.0 || target_sigma < 0.0 || target_noise_clip < 0.0)
    throw ConfigError("train: bad noise");
  if (eval_every < 0 || eval_episodes < 1) throw ConfigError("train: bad eval cadence");
  if (!env.render) throw ConfigError("train: pixel training requires rendering");
  if (mask.in_channels != 3 * env.frame_stack || mask.height != env.height ||
      mask.width != env.width)
    throw ConfigError("train: mask geometry does not match the environment");
  if (student.in_channels != 3 * env.frame_stack || student.height != env.height ||
      student.width != env.width)
    throw ConfigError("train: student geometry does not match the environment");
  if (preset_uses_expert(preset) && mix <= 0.0)
    throw ConfigError("train: distillation presets need expert rollouts (mix > 0)");
}

// --- pixel RL student ---

void PixelRlConfig::validate() const {
  net.validate();
  if (!(gamma > 0.0 && gamma <= 1.0) || !(tau > 0.0 && tau <= 1.0) || lr <= 0.0)
    throw ConfigError("pixel rl: bad gamma/tau/lr");
  if (target_sigma < 0.0 || target_noise_clip < 0.0) throw ConfigError("pixel rl: bad noise");
}

PixelRlStudent::PixelRlStudent(PixelRlConfig cfg, std::uint64_t seed)
    : cfg_(cfg), actor_(cfg.net, seed) {
  cfg_.validate();
  Rng rng(substream(seed, "pixel-rl-init"));
  const StudentConfig& n = cfg_.net;
  const int C = n.channels, in = n.in_channels;
  const int lh = mask::conv_out(mask::conv_out(n.height, 2), 2);
  const int lw = mask::conv_out(mask::conv_out(n.width, 2), 2);
  const int feat = C * lh * lw;
  for (const char* q : {"q1", "q2", "tq1", "tq2"}) {
    const std::string p(q);
    params_.add(p + ".conv1.w", {C, in, 3, 3}, in * 9, rng);
    params_.add_zero(p + ".conv1.b", {C});
    params_.add(p + ".conv2.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero(p + ".conv2.b", {C});
    params_.add(p + ".conv3.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero(p + ".conv3.b", {C});
    params_.add(p + ".fc1.w", {n.hidden, feat + 2}, feat + 2, rng);
    params_.add_zero(p + ".fc1.b", {n.hidden});
    params_.add(p + ".fc2.w", {1, n.hidden}, n.hidden, rng);
    params_.add_zero(p + ".fc2.b", {1});
  }
  // Targets start as copies of the online critics.
  for (int q = 1; q <= 2; ++q)
    for (const char* l : {".conv1.w", ".conv1.b", ".conv2.w", ".conv2.b", ".conv3.w", ".conv3.b",
                          ".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b"}) {
      const std::string s = "q" + std::to_string(q) + l;
      params_.at("t" + s).value = params_.at(s).value;
    }
  std::vector<nn::Param<float>*> critic;
  for (auto* p : params_.all())
    if (p->name.rfind("q", 0) == 0) critic.push_back(p);
  opt_critic_ = std::make_unique<nn::Adam<float>>(critic, static_cast<float>(cfg_.lr));
}

PixelRlStudent::Ref PixelRlStudent::build_critic(Graph& g, const std::string& prefix, Ref obs,
                                                 Ref action) {
  Ref c1 = g.relu(g.conv2d(obs, g.param(params_.at(prefix + ".conv1.w")),
                           g.param(params_.at(prefix + ".conv1.b")), 2, 1));
  Ref c2 = g.relu(g.conv2d(c1, g.param(params_.at(prefix + ".conv2.w")),
                           g.param(params_.at(prefix + ".conv2.b")), 2, 1));
  Ref c3 = g.relu(g.conv2d(c2, g.param(params_.at(prefix + ".conv3.w")),
                           g.param(params_.at(prefix + ".conv3.b")), 1, 1));
  Ref x = g.concat_cols(g.flatten(c3), action);
  Ref h = g.relu(
      g.linear(x, g.param(params_.at(prefix + ".fc1.w")), g.param(params_.at(prefix + ".fc1.b"))));
  return g.linear(h, g.param(params_.at(prefix + ".fc2.w")), g.param(params_.at(prefix + ".fc2.b")));
}

envs::Action PixelRlStudent::act(const Tensor<float>& obs) { return actor_.act(obs); }

Tensor<float> PixelRlStudent::actor_forward(const Tensor<float>& obs) {
  return actor_.forward(obs);
}

std::pair<double, double> PixelRlStudent::update(const Tensor<float>& o, const Tensor<float>& a,
                                                 const std::vector<float>& ret,
                                                 const std::vector<float>& discount,
                                                 const Tensor<float>& o_boot, Rng& rng) {
  const int B = o.shape[0];
  // Target actions with clipped smoothing noise.
  Tensor<float> an = actor_.forward(o_boot);
  for (std::size_t i = 0; i < an.numel(); ++i) {
    const double noise = std::clamp(rng.normal(0.0, cfg_.target_sigma), -cfg_.target_noise_clip,
                                    cfg_.target_noise_clip);
    an[i] = static_cast<float>(std::clamp(static_cast<double>(an[i]) + noise, -1.0, 1.0));
  }
  Tensor<float> y(Shape{B, 1});
  {
    Graph g;
    Ref ob = g.constant(o_boot);
    Ref ab = g.constant(an);
    Ref q = g.minimum(build_critic(g, "tq1", ob, ab), build_critic(g, "tq2", ob, ab));
    const Tensor<float>& qv = g.value(q);
    for (int i = 0; i < B; ++i) y[i] = ret[i] + discount[i] * qv[i];
  }
  double critic_loss = 0, actor_loss = 0;
  {
    Graph g;
    Ref ob = g.constant(o), ab = g.constant(a), yb = g.constant(y);
    Ref loss = g.add(g.mse_mean(build_critic(g, "q1", ob, ab), yb),
                     g.mse_mean(build_critic(g, "q2", ob, ab), yb));
    critic_loss = g.value(loss)[0];
    opt_critic_->zero_grad();
    g.backward(loss);
    opt_critic_->step();
  }
  {
    Graph g;
    Ref ob = g.constant(o);
    Ref pa = actor_.build(g, ob);
    Ref q = g.minimum(build_critic(g, "q1", ob, pa), build_critic(g, "q2", ob, pa));
    Ref loss = g.scale(g.mean_all(q), -1.0f);
    actor_loss = g.value(loss)[0];
    actor_.optimizer().zero_grad();
    g.backward(loss);
    actor_.optimizer().step();
  }
  soft_update_targets();
  return {critic_loss, actor_loss};
}

void PixelRlStudent::soft_update_targets() {
  const float tau = static_cast<float>(cfg_.tau);
  for (int q = 1; q <= 2; ++q)
    for (const char* l : {".conv1.w", ".conv1.b", ".conv2.w", ".conv2.b", ".conv3.w", ".conv3.b",
                          ".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b"}) {
      const std::string s = "q" + std::to_string(q) + l;
      Tensor<float>& online = params_.at(s).value;
      Tensor<float>& target = params_.at("t" + s).value;
      for (std::size_t i = 0; i < online.numel(); ++i)
        target[i] = tau * online[i] + (1.0f - tau) * target[i];
    }
}

// --- trainer ---

double evaluate_pixel_policy(const PixelPolicy& policy, envs::PointEnv& env, int episodes,
                             std::uint64_t seed_base) {
  if (episodes < 1) throw InputError("evaluate_pixel_policy: episodes must be >= 1");
  double total = 0;
  for (int e = 0; e < episodes; ++e) {
    auto [obs, state] = env.reset(hash_combine(seed_base, static_cast<std::uint64_t>(e)));
    Tensor<float> o = std::move(obs);
    for (int t = 0; t < env.config().horizon; ++t) {
      envs::StepResult r = env.step(policy(o));
      total += r.reward;
      o = std::move(r.obs);
    }
  }
  return total / episodes;
}

TrainResult train(const TrainConfig& cfg, const ExpertPolicy* expert, TrainArtifacts* artifacts) {
  cfg.validate();
  const bool uses_expert = preset_uses_expert(cfg.preset);
  const bool uses_mask = preset_uses_mask(cfg.preset);
  if (uses_expert && !expert)
    throw ConfigError("train: preset " + preset_to_string(cfg.preset) + " needs an expert");

  envs::PointEnv env(cfg.env, cfg.variant);
  envs::PointEnv eval_env(cfg.env, cfg.variant);
  PixelReplay replay({cfg.buffer_capacity, cfg.env.frame_stack});

  std::shared_ptr<mask::MaskModule> mask_module;
  if (uses_mask)
    mask_module = std::make_shared<mask::MaskModule>(cfg.mask, hash_combine(cfg.seed, fnv1a64("mask")));

  std::shared_ptr<StudentPolicy> student;
  std::shared_ptr<PixelRlStudent> rl;
  PixelPolicy policy;
  if (uses_expert) {
    student = std::make_shared<StudentPolicy>(cfg.student, hash_combine(cfg.seed, fnv1a64("student")));
    policy = [student](const Tensor<float>& o) { return student->act(o); };
  } else {
    PixelRlConfig rc;
    rc.net = cfg.student;
    rc.gamma = cfg.gamma;
    rc.tau = cfg.tau;
    rc.lr = cfg.student.lr;
    rc.target_sigma = cfg.target_sigma;
    rc.target_noise_clip = cfg.target_noise_clip;
    rl = std::make_shared<PixelRlStudent>(rc, hash_combine(cfg.seed, fnv1a64("student")));
    policy = [rl](const Tensor<float>& o) { return rl->act(o); };
  }

  // Overlay sources; Q-only keeps DrQ-v2's native random shift instead.
  aug::DistractorSet distractors;
  AugContext actx;
  actx.total_steps = cfg.total_steps;
  actx.spec.kind = cfg.preset == Preset::QOnly ? aug::AugKind::RandomShift : cfg.aug_kind;
  actx.spec.pad = cfg.shift_pad;
  if (actx.spec.kind == aug::AugKind::RandomOverlay) {
    distractors = cfg.distractor_dir.empty()
                      ? aug::procedural_distractors(cfg.overlay_images, cfg.env.height,
                                                    cfg.env.width, hash_combine(cfg.seed, fnv1a64("overlay")))
                      : aug::load_distractor_dataset(cfg.distractor_dir, cfg.env.height,
                                                     cfg.env.width);
    actx.spec.distractors = &distractors;
  }

  RolloutWorker worker(env, replay, uses_expert ? expert : nullptr,
                       uses_expert ? student.get() : &rl->actor(), uses_expert ? cfg.mix : 0.0,
                       cfg.seed, uses_expert ? 0.0 : cfg.explore_sigma);
  Rng update_rng = substream(cfg.seed, "train-update");

  TrainResult res;
  metrics::JsonlWriter jsonl;
  metrics::CsvWriter episodes_csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    res.metrics_path = cfg.out_dir + "/metrics.jsonl";
    res.episodes_path = cfg.out_dir + "/episodes.csv";
    jsonl = metrics::JsonlWriter(res.metrics_path);
    episodes_csv = metrics::CsvWriter(res.episodes_path,
                                      {"episode", "end_step", "return", "driver", "success"});
  }

  const std::string preset_name = preset_to_string(cfg.preset);
  for (long long step = 1; step <= cfg.total_steps; ++step) {
    const std::optional<double> ep_ret = worker.step();
    if (ep_ret) {
      ++res.episodes;
      if (episodes_csv.is_open())
        episodes_csv.row({std::to_string(res.episodes), std::to_string(step),
                          metrics::CsvWriter::num(*ep_ret),
                          worker.expert_driving() ? "expert" : "student",
                          env.success(env.state()) ? "1" : "0"});
    }

    if (replay.size() >= static_cast<std::size_t>(cfg.min_buffer) &&
        step % cfg.update_interval == 0) {
      actx.step = step;
      nlohmann::json rec;
      rec["step"] = step;
      rec["preset"] = preset_name;
      rec["total"] = 0.0;
      rec["l_rec"] = 0.0;
      rec["l_ae"] = 0.0;
      rec["l_ctl"] = 0.0;
      rec["l_sps"] = 0.0;
      rec["mean_mask"] = 0.0;
      rec["distill"] = 0.0;
      rec["critic"] = 0.0;
      rec["actor"] = 0.0;
      rec["alpha"] = actx.resolved().alpha;

      if (uses_expert) {
        JointMetrics m;
        if (uses_mask) {
          m = joint_update(replay, *mask_module, *student, *expert, cfg.batch, actx, update_rng);
        } else {
          const Batch b = replay.sample(cfg.batch, update_rng);
          m.distill = student_train_step(b, nullptr, *student, *expert, actx, update_rng);
        }
        rec["total"] = m.mask.total;
        rec["l_rec"] = m.mask.l_rec;
        rec["l_ae"] = m.mask.l_ae;
        rec["l_ctl"] = m.mask.l_ctl;
        rec["l_sps"] = m.mask.l_sps;
        rec["mean_mask"] = m.mask.mean_mask;
        rec["distill"] = m.distill.loss;
        res.mean_mask_value = m.mask.mean_mask;
      } else {
        if (uses_mask) {
          const Batch b = replay.sample(cfg.batch, update_rng);
          const mask::AttLossReport mr = mask_module->train_step(b.o, b.a, b.o_next);
          rec["total"] = mr.total;
          rec["l_rec"] = mr.l_rec;
          rec["l_ae"] = mr.l_ae;
          rec["l_ctl"] = mr.l_ctl;
          rec["l_sps"] = mr.l_sps;
          rec["mean_mask"] = mr.mean_mask;
          res.mean_mask_value = mr.mean_mask;
        }
        NStepBatch nb = replay.sample_nstep(cfg.batch, cfg.n_step, cfg.gamma, update_rng);
        mask::MaskModule* gate = uses_mask ? mask_module.get() : nullptr;
        const Tensor<float> o_aug = augment_batch(nb.o, gate, actx, update_rng);
        const Tensor<float> boot_aug = augment_batch(nb.o_boot, gate, actx, update_rng);
        const auto [closs, aloss] =
            rl->update(o_aug, nb.a, nb.ret, nb.discount, boot_aug, update_rng);
        rec["critic"] = closs;
        rec["actor"] = aloss;
      }
      ++res.joint_updates;
      if (jsonl.is_open()) jsonl.write(rec);
    }

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.total_steps) {
      const double ev = evaluate_pixel_policy(policy, eval_env, cfg.eval_episodes,
                                              hash_combine(cfg.seed, fnv1a64("train-eval")));
      if (jsonl.is_open())
        jsonl.write({{"step", step}, {"preset", preset_name}, {"eval_return", ev}});
    }
  }

  res.final_eval = evaluate_pixel_policy(policy, eval_env, cfg.eval_episodes,
                                         hash_combine(cfg.seed, fnv1a64("train-eval")));
  if (jsonl.is_open()) {
    jsonl.write({{"step", cfg.total_steps}, {"preset", preset_name}, {"eval_return", res.final_eval}});
    jsonl.flush();
  }
  if (episodes_csv.is_open()) episodes_csv.flush();

  if (artifacts) {
    artifacts->policy = policy;
    artifacts->mask = mask_module;
    artifacts->student = student;
    artifacts->rl = rl;
  }
  return res;
}

}  // namespace eagle::distill
