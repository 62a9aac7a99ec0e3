#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "eagle/autograd.hpp"
#include "eagle/errors.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle::mask {

inline int conv_out(int size, int stride) { return (size - 1) / stride + 1; }  // k=3, p=1

struct MaskConfig {
  int in_channels = 9;  // frame_stack * 3
  int height = 84;
  int width = 84;
  int channels = 32;
  int action_dim = 2;
  int ctl_hidden = 64;
  int attn_reduction = 8;  // channel-attention MLP bottleneck divisor
  double beta = 0.5;
  double lambda = 0.001;
  double lr = 1e-4;
  bool per_channel_mask = false;  // fold channel attention into the latent gating

  int latent_h() const { return conv_out(conv_out(height, 2), 2); }
  int latent_w() const { return conv_out(conv_out(width, 2), 2); }

  void validate() const {
    if (in_channels <= 0 || in_channels % 3 != 0) throw ConfigError("mask: bad in_channels");
    if (height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0)
      throw ConfigError("mask: height/width must be multiples of 4 and >= 8");
    if (channels < 1 || action_dim < 1 || ctl_hidden < 1 || attn_reduction < 1)
      throw ConfigError("mask: bad network dims");
    if (beta < 0 || lambda < 0 || lr <= 0) throw ConfigError("mask: bad loss weights / lr");
  }
};

template <typename T>
struct AttLossReportT {
  T total = 0, l_rec = 0, l_ae = 0, l_ctl = 0, l_sps = 0;
  T mean_mask = 0;
  T beta = 0, lambda = 0;
  bool stepped = false;  // train steps only: false when non-finite grads skipped the update
};
using AttLossReport = AttLossReportT<float>;

// Test instrumentation for att_loss. Feeding source_branch_values() back via
// source_z/source_m/source_chan replaces the detached o_t branch with fixed
// constants; that graph's full derivative equals the detached graph's gradient,
// which makes finite differencing across a stop-gradient well-defined.
template <typename T>
struct AttLossHooks {
  const Tensor<T>* force_mask = nullptr;       // constant (B,1,h,w) replacing both masks
  const Tensor<T>* decoder_returns = nullptr;  // constant (B,in,H,W) replacing f_d output
  const Tensor<T>* source_z = nullptr;         // constant z_t (B,C,h,w) instead of detached node
  const Tensor<T>* source_m = nullptr;         // constant spatial m_t (B,1,h,w)
  const Tensor<T>* source_chan = nullptr;      // constant channel attention (B,C)
  int only_component = 0;                      // 0 = Eq.5 total, 1..4 = rec/ae/ctl/sps alone
};

// z_hat = z_next*m_next + z_t*(1-m_t)*(1-m_next), masks broadcast over channels.
template <typename T>
Tensor<T> synthesize_latent(const Tensor<T>& z_t, const Tensor<T>& m_t, const Tensor<T>& z_next,
                            const Tensor<T>& m_next) {
  require_shape(z_next, z_t.shape, "synthesize_latent: z_next");
  require_shape(m_next, m_t.shape, "synthesize_latent: m_next");
  if (z_t.shape.size() != 4 || m_t.shape.size() != 4 || m_t.shape[1] != 1 ||
      z_t.shape[0] != m_t.shape[0] || z_t.shape[2] != m_t.shape[2] || z_t.shape[3] != m_t.shape[3])
    throw InputError("synthesize_latent: incompatible shapes " + shape_str(z_t.shape) + " vs " +
                     shape_str(m_t.shape));
  const int B = z_t.shape[0], C = z_t.shape[1];
  const std::size_t hw = static_cast<std::size_t>(z_t.shape[2]) * z_t.shape[3];
  Tensor<T> out(z_t.shape);
  for (int b = 0; b < B; ++b) {
    const T* mt = m_t.ptr() + static_cast<std::size_t>(b) * hw;
    const T* mn = m_next.ptr() + static_cast<std::size_t>(b) * hw;
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        out[off + i] = z_next[off + i] * mn[i] + z_t[off + i] * (T(1) - mt[i]) * (T(1) - mn[i]);
    }
  }
  return out;
}

// Bilinear upsample of the trailing two dims (align_corners), computed as
// lerp(a, b, w) = a + w*(b - a) so constants are preserved exactly.
template <typename T>
Tensor<T> upsample_mask(const Tensor<T>& m, int out_h, int out_w) {
  if (m.shape.size() < 2) throw InputError("upsample_mask: need at least 2 dims");
  if (out_h < 1 || out_w < 1) throw InputError("upsample_mask: bad target size");
  const int h = m.shape[m.shape.size() - 2], w = m.shape[m.shape.size() - 1];
  std::size_t lead = 1;
  Shape out_shape(m.shape.begin(), m.shape.end() - 2);
  for (int d : out_shape) lead *= static_cast<std::size_t>(d);
  out_shape.push_back(out_h);
  out_shape.push_back(out_w);
  Tensor<T> out(out_shape);
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  for (std::size_t l = 0; l < lead; ++l) {
    const T* src = m.ptr() + l * static_cast<std::size_t>(h) * w;
    T* dst = out.ptr() + l * static_cast<std::size_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = oy * sy;
      const int y0 = std::min(static_cast<int>(fy), h - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const T wy = static_cast<T>(fy - y0);
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = ox * sx;
        const int x0 = std::min(static_cast<int>(fx), w - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const T wx = static_cast<T>(fx - x0);
        const T top = src[y0 * w + x0] + wx * (src[y0 * w + x1] - src[y0 * w + x0]);
        const T bot = src[y1 * w + x0] + wx * (src[y1 * w + x1] - src[y1 * w + x0]);
        dst[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  return out;
}

template <typename T>
class MaskModuleT {
 public:
  using Graph = nn::Graph<T>;
  using Ref = typename Graph::Ref;

  MaskModuleT(MaskConfig cfg, std::uint64_t seed) : cfg_(cfg), bn_(1) {
    cfg_.validate();
    Rng rng(substream(seed, "mask-init"));
    const int C = cfg_.channels, in = cfg_.in_channels;
    const int red = std::max(1, C / cfg_.attn_reduction);
    const int feat = C * cfg_.latent_h() * cfg_.latent_w();
    params_.add("enc.conv1.w", {C, in, 3, 3}, in * 9, rng);
    params_.add_zero("enc.conv1.b", {C});
    params_.add("enc.conv2.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero("enc.conv2.b", {C});
    params_.add("enc.conv3.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero("enc.conv3.b", {C});
    params_.add("attn.ch.fc1.w", {red, C}, C, rng);
    params_.add_zero("attn.ch.fc1.b", {red});
    params_.add("attn.ch.fc2.w", {C, red}, red, rng);
    params_.add_zero("attn.ch.fc2.b", {C});
    params_.add("attn.sp.conv.w", {1, 2, 7, 7}, 2 * 49, rng);
    params_.add_zero("attn.sp.conv.b", {1});
    params_.add_const("attn.sp.bn.gamma", {1}, T(1));
    params_.add_zero("attn.sp.bn.beta", {1});
    params_.add("dec.convt3.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero("dec.convt3.b", {C});
    params_.add("dec.convt2.w", {C, C, 3, 3}, C * 9, rng);
    params_.add_zero("dec.convt2.b", {C});
    params_.add("dec.convt1.w", {C, in, 3, 3}, C * 9, rng);
    params_.add_zero("dec.convt1.b", {in});
    params_.add("ctl.fc1.w", {cfg_.ctl_hidden, 2 * feat}, 2 * feat, rng);
    params_.add_zero("ctl.fc1.b", {cfg_.ctl_hidden});
    params_.add("ctl.fc2.w", {cfg_.action_dim, cfg_.ctl_hidden}, cfg_.ctl_hidden, rng);
    params_.add_zero("ctl.fc2.b", {cfg_.action_dim});
    opt_ = std::make_unique<nn::Adam<T>>(params_.all(), static_cast<T>(cfg_.lr));
  }

  const MaskConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  nn::Adam<T>& optimizer() { return *opt_; }
  nn::BatchNormState<T>& bn_state() { return bn_; }

  // --- graph builders (shared by eval and training paths) ---

  Ref build_encoder(Graph& g, Ref obs) {
    Ref c1 = g.relu(g.conv2d(obs, g.param(params_.at("enc.conv1.w")),
                             g.param(params_.at("enc.conv1.b")), 2, 1));
    Ref c2 = g.relu(g.conv2d(c1, g.param(params_.at("enc.conv2.w")),
                             g.param(params_.at("enc.conv2.b")), 2, 1));
    return g.relu(g.conv2d(c2, g.param(params_.at("enc.conv3.w")),
                           g.param(params_.at("enc.conv3.b")), 1, 1));
  }

  struct Attend {
    Ref spatial;  // (B,1,h,w)
    Ref chan;     // (B,C)
  };

  Attend build_attend(Graph& g, Ref z, bool training) {
    auto mlp = [&](Ref v) {
      return g.linear(g.relu(g.linear(v, g.param(params_.at("attn.ch.fc1.w")),
                                      g.param(params_.at("attn.ch.fc1.b")))),
                      g.param(params_.at("attn.ch.fc2.w")), g.param(params_.at("attn.ch.fc2.b")));
    };
    Ref s = g.sigmoid(g.add(mlp(g.global_avg_pool(z)), mlp(g.global_max_pool(z))));
    Ref zr = g.channel_scale(z, s);
    Ref pooled = g.concat_channels(g.channel_max(zr), g.channel_mean(zr));
    Ref conv = g.conv2d(pooled, g.param(params_.at("attn.sp.conv.w")),
                        g.param(params_.at("attn.sp.conv.b")), 1, 3);
    Ref m = g.sigmoid(g.batchnorm2d(conv, g.param(params_.at("attn.sp.bn.gamma")),
                                    g.param(params_.at("attn.sp.bn.beta")), bn_, training));
    return {m, s};
  }

  Ref build_decoder(Graph& g, Ref z) {
    Ref u3 = g.relu(g.conv_transpose2d(z, g.param(params_.at("dec.convt3.w")),
                                       g.param(params_.at("dec.convt3.b")), 1, 1, 0));
    Ref u2 = g.relu(g.conv_transpose2d(u3, g.param(params_.at("dec.convt2.w")),
                                       g.param(params_.at("dec.convt2.b")), 2, 1, 1));
    return g.sigmoid(g.conv_transpose2d(u2, g.param(params_.at("dec.convt1.w")),
                                        g.param(params_.at("dec.convt1.b")), 2, 1, 1));
  }

  Ref build_ctl(Graph& g, Ref zm_t, Ref zm_next) {
    Ref x = g.concat_cols(g.flatten(zm_t), g.flatten(zm_next));
    Ref h = g.relu(g.linear(x, g.param(params_.at("ctl.fc1.w")), g.param(params_.at("ctl.fc1.b"))));
    return g.linear(h, g.param(params_.at("ctl.fc2.w")), g.param(params_.at("ctl.fc2.b")));
  }

  // --- forward-only operations (batchnorm in eval mode) ---

  Tensor<T> encode(const Tensor<T>& obs) {
    const bool batched = obs.shape.size() == 4;
    Graph g;
    Ref z = build_encoder(g, g.constant(as_batch(obs, cfg_.in_channels, cfg_.height, cfg_.width)));
    Tensor<T> out = g.value(z);
    if (!batched && out.shape[0] == 1) out.shape = Shape(out.shape.begin() + 1, out.shape.end());
    return out;
  }

  Tensor<T> attend(const Tensor<T>& z) {
    const bool batched = z.shape.size() == 4;
    Graph g;
    Attend a =
        build_attend(g, g.constant(as_batch(z, cfg_.channels, cfg_.latent_h(), cfg_.latent_w())),
                     /*training=*/false);
    Tensor<T> out = g.value(a.spatial);
    if (!batched && out.shape[0] == 1) out.shape = Shape(out.shape.begin() + 1, out.shape.end());
    return out;
  }

  Tensor<T> predict_control(const Tensor<T>& zm_t, const Tensor<T>& zm_next) {
    const bool batched = zm_t.shape.size() == 4;
    Graph g;
    Ref a = build_ctl(g, g.constant(as_batch(zm_t, cfg_.channels, cfg_.latent_h(), cfg_.latent_w())),
                      g.constant(as_batch(zm_next, cfg_.channels, cfg_.latent_h(), cfg_.latent_w())));
    Tensor<T> out = g.value(a);
    if (!batched && out.shape[0] == 1) out.shape = Shape(out.shape.begin() + 1, out.shape.end());
    return out;
  }

  // Training-mode values of the stop-gradient branch (z_t, spatial m_t, channel
  // attention) as produced inside att_loss for the same batch.
  struct SourceValues {
    Tensor<T> z, m, chan;
  };
  SourceValues source_branch_values(const Tensor<T>& o_t_raw, bool training = true) {
    const Tensor<T> o_t = as_batch(o_t_raw, cfg_.in_channels, cfg_.height, cfg_.width);
    Graph g;
    Ref z = build_encoder(g, g.constant(o_t));
    Attend a = build_attend(g, z, training);
    return {g.value(z), g.value(a.spatial), g.value(a.chan)};
  }

  // Mask at observation scale: (B, H, W) in [0,1].
  Tensor<T> infer_mask(const Tensor<T>& obs) {
    Graph g;
    Ref z = build_encoder(g, g.constant(as_batch(obs, cfg_.in_channels, cfg_.height, cfg_.width)));
    Attend a = build_attend(g, z, /*training=*/false);
    Tensor<T> m = g.value(a.spatial);  // (B,1,h,w)
    m.shape = Shape{m.shape[0], m.shape[2], m.shape[3]};
    return upsample_mask(m, cfg_.height, cfg_.width);
  }

  AttLossReportT<T> att_loss(const Tensor<T>& o_t, const Tensor<T>& a_t, const Tensor<T>& o_next,
                             bool training = true, const AttLossHooks<T>& hooks = {}) {
    Graph g;
    Parts p = build_att_graph(g, o_t, a_t, o_next, training, hooks);
    return make_report(g, p);
  }

  // One Adam step on all four networks; skips the update on non-finite grads.
  AttLossReportT<T> train_step(const Tensor<T>& o_t, const Tensor<T>& a_t,
                               const Tensor<T>& o_next) {
    Graph g;
    Parts p = build_att_graph(g, o_t, a_t, o_next, /*training=*/true, {});
    AttLossReportT<T> report = make_report(g, p);
    opt_->zero_grad();
    g.backward(p.total);
    report.stepped = opt_->step();
    return report;
  }

  // Accumulates parameter gradients of the (hooked) loss without touching the
  // optimizer; used by the gradient-verification suites.
  AttLossReportT<T> accumulate_gradients(const Tensor<T>& o_t, const Tensor<T>& a_t,
                                         const Tensor<T>& o_next,
                                         const AttLossHooks<T>& hooks = {}) {
    Graph g;
    Parts p = build_att_graph(g, o_t, a_t, o_next, /*training=*/true, hooks);
    AttLossReportT<T> report = make_report(g, p);
    g.backward(p.total);
    return report;
  }

 private:
  struct Parts {
    Ref total, rec, ae, ctl, sps, mask_next;
  };

  static Tensor<T> as_batch(const Tensor<T>& t, int c, int h, int w) {
    if (t.shape.size() == 4) {
      if (t.shape[1] != c || t.shape[2] != h || t.shape[3] != w)
        throw InputError("mask: bad input shape " + shape_str(t.shape));
      return t;
    }
    require_shape(t, Shape{c, h, w}, "mask input");
    Tensor<T> out = t;
    out.shape = Shape{1, c, h, w};
    return out;
  }

  Parts build_att_graph(Graph& g, const Tensor<T>& o_t_raw, const Tensor<T>& a_t_raw,
                        const Tensor<T>& o_next_raw, bool training, const AttLossHooks<T>& hooks) {
    const Tensor<T> o_t = as_batch(o_t_raw, cfg_.in_channels, cfg_.height, cfg_.width);
    const Tensor<T> o_next = as_batch(o_next_raw, cfg_.in_channels, cfg_.height, cfg_.width);
    Tensor<T> a_t = a_t_raw;
    if (a_t.shape.size() == 1) a_t.shape = Shape{1, a_t.shape[0]};
    if (a_t.shape.size() != 2 || a_t.shape[0] != o_t.shape[0] || a_t.shape[1] != cfg_.action_dim)
      throw InputError("att_loss: bad action shape " + shape_str(a_t_raw.shape));

    Ref on = g.constant(o_next);
    Ref at = g.constant(a_t);

    // source branch: stop-gradient on both z_t and m_t
    Ref zt, mt;
    Attend att_t{};
    if (hooks.source_z) {
      if (!hooks.source_m) throw InputError("att_loss: source_z hook requires source_m");
      zt = g.constant(*hooks.source_z);
      att_t = {g.constant(*hooks.source_m),
               hooks.source_chan ? g.constant(*hooks.source_chan) : nullptr};
      mt = att_t.spatial;
      if (cfg_.per_channel_mask && !att_t.chan)
        throw InputError("att_loss: per_channel_mask requires source_chan with source_z");
    } else {
      Ref zt_live = build_encoder(g, g.constant(o_t));
      att_t = build_attend(g, zt_live, training);
      zt = g.detach(zt_live);
      att_t.spatial = g.detach(att_t.spatial);
      if (att_t.chan) att_t.chan = g.detach(att_t.chan);
      mt = att_t.spatial;
    }
    Ref zn = build_encoder(g, on);
    Attend att_n = build_attend(g, zn, training);
    Ref mn = att_n.spatial;

    if (hooks.force_mask) {
      mt = g.constant(*hooks.force_mask);
      mn = g.constant(*hooks.force_mask);
      att_t.spatial = mt;
      att_n.spatial = mn;
      att_t.chan = att_n.chan = nullptr;
    }

    Ref mt_full = build_full_mask_from(g, zt, mt, att_t.chan);
    Ref mn_full = build_full_mask_from(g, zn, mn, att_n.chan);

    // Eq. 1
    Ref synth = g.add(g.mul(zn, mn_full), g.mul(g.mul(zt, g.one_minus(mt_full)), g.one_minus(mn_full)));

    Ref dec_synth = hooks.decoder_returns ? g.constant(*hooks.decoder_returns)
                                          : build_decoder(g, synth);
    Ref dec_ae = hooks.decoder_returns ? g.constant(*hooks.decoder_returns) : build_decoder(g, zn);

    Parts p;
    p.rec = g.mse_mean(dec_synth, on);                                  // Eq. 2
    p.ae = g.mse_mean(dec_ae, on);                                      // Eq. 3
    p.ctl = g.sq_l2_rowmean(build_ctl(g, g.mul(zt, mt_full), g.mul(zn, mn_full)), at);  // Eq. 4
    p.sps = g.mean_all(mn);                                             // ||m||_1, mean-reduced
    p.mask_next = mn;
    switch (hooks.only_component) {
      case 0:
        p.total = g.weighted_sum({{p.rec, T(1)},
                                  {p.ae, T(1)},
                                  {p.ctl, static_cast<T>(cfg_.beta)},
                                  {p.sps, static_cast<T>(cfg_.lambda)}});  // Eq. 5
        break;
      case 1: p.total = p.rec; break;
      case 2: p.total = p.ae; break;
      case 3: p.total = p.ctl; break;
      case 4: p.total = p.sps; break;
      default: throw InputError("att_loss: bad only_component");
    }
    return p;
  }

  Ref build_full_mask_from(Graph& g, Ref z, Ref spatial, Ref chan) {
    Tensor<T> ones(z->value.shape);
    ones.fill(T(1));
    Ref full = g.broadcast_mul(g.constant(std::move(ones)), spatial);
    if (cfg_.per_channel_mask && chan) full = g.channel_scale(full, chan);
    return full;
  }

  AttLossReportT<T> make_report(Graph& g, const Parts& p) {
    AttLossReportT<T> r;
    r.l_rec = g.value(p.rec)[0];
    r.l_ae = g.value(p.ae)[0];
    r.l_ctl = g.value(p.ctl)[0];
    r.l_sps = g.value(p.sps)[0];
    r.total = g.value(p.total)[0];
    r.beta = static_cast<T>(cfg_.beta);
    r.lambda = static_cast<T>(cfg_.lambda);
    const Tensor<T>& m = g.value(p.mask_next);
    T acc = 0;
    for (std::size_t i = 0; i < m.numel(); ++i) acc += m[i];
    r.mean_mask = acc / static_cast<T>(m.numel());
    if (!std::isfinite(static_cast<double>(r.total)))
      throw TrainingFault("att_loss non-finite: rec=" + std::to_string(static_cast<double>(r.l_rec)) +
                          " ae=" + std::to_string(static_cast<double>(r.l_ae)) +
                          " ctl=" + std::to_string(static_cast<double>(r.l_ctl)) +
                          " sps=" + std::to_string(static_cast<double>(r.l_sps)));
    return r;
  }

  MaskConfig cfg_;
  nn::ParamStore<T> params_;
  nn::BatchNormState<T> bn_;
  std::unique_ptr<nn::Adam<T>> opt_;
};

using MaskModule = MaskModuleT<float>;

}  // namespace eagle::mask
