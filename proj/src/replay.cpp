#include "eagle/replay.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "eagle/errors.hpp"

namespace eagle::distill {

using envs::EnvState;

void ReplayConfig::validate() const {
  if (capacity < 1) throw ConfigError("replay: capacity must be >= 1");
  if (frame_stack < 1) throw ConfigError("replay: frame_stack must be >= 1");
}

PixelReplay::PixelReplay(ReplayConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::size_t PixelReplay::size() const {
  std::lock_guard<std::mutex> g(lock_);
  return next_ - evicted_;
}

std::size_t PixelReplay::evicted() const {
  std::lock_guard<std::mutex> g(lock_);
  return evicted_;
}

std::size_t PixelReplay::episode_count() const {
  std::lock_guard<std::mutex> g(lock_);
  return episodes_.size();
}

int PixelReplay::obs_channels() const { return 3 * cfg_.frame_stack; }

int PixelReplay::height() const {
  std::lock_guard<std::mutex> g(lock_);
  if (h_ == 0) throw StateError("replay: no frames stored yet");
  return h_;
}

int PixelReplay::width() const {
  std::lock_guard<std::mutex> g(lock_);
  if (w_ == 0) throw StateError("replay: no frames stored yet");
  return w_;
}

void PixelReplay::clear() {
  std::lock_guard<std::mutex> g(lock_);
  episodes_.clear();
  next_ = evicted_ = 0;
}

void PixelReplay::check_frame(const img::Image& f) const {
  if (f.shape.size() != 3 || f.shape[0] != 3)
    throw InputError("replay: frames must be (3, h, w)");
  if (h_ != 0 && (f.shape[1] != h_ || f.shape[2] != w_))
    throw InputError("replay: frame size changed mid-buffer");
}

void PixelReplay::begin_episode(const img::Image& reset_frame) {
  std::lock_guard<std::mutex> g(lock_);
  check_frame(reset_frame);
  if (h_ == 0) {
    h_ = reset_frame.shape[1];
    w_ = reset_frame.shape[2];
  }
  // A begin without any steps just replaces the empty episode.
  if (!episodes_.empty() && episodes_.back().steps.empty()) episodes_.pop_back();
  Episode ep;
  ep.base = next_;
  ep.frames.push_back(reset_frame);
  episodes_.push_back(std::move(ep));
}

void PixelReplay::push_step(const img::Image& frame_after, const envs::Action& a, double r,
                            const EnvState& s, const EnvState& s_next, bool done) {
  std::lock_guard<std::mutex> g(lock_);
  if (episodes_.empty() || episodes_.back().frames.empty())
    throw StateError("replay: push_step before begin_episode");
  check_frame(frame_after);
  Episode& ep = episodes_.back();
  ep.frames.push_back(frame_after);
  ep.steps.push_back({{static_cast<float>(a[0]), static_cast<float>(a[1])},
                      static_cast<float>(r),
                      s,
                      s_next,
                      done});
  ++next_;
  while (next_ - evicted_ > cfg_.capacity) {
    ++evicted_;
    const Episode& front = episodes_.front();
    if (evicted_ - front.base >= front.steps.size()) episodes_.pop_front();
  }
}

const PixelReplay::Episode& PixelReplay::locate(std::size_t abs_index, std::size_t* local) const {
  // Binary search over episode base indices.
  std::size_t lo = 0, hi = episodes_.size();
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (episodes_[mid].base <= abs_index)
      lo = mid;
    else
      hi = mid;
  }
  const Episode& ep = episodes_[lo];
  *local = abs_index - ep.base;
  return ep;
}

void PixelReplay::fill_obs(const Episode& ep, std::size_t t, float* dst) const {
  const std::size_t plane = static_cast<std::size_t>(3) * h_ * w_;
  for (int k = 0; k < cfg_.frame_stack; ++k) {
    const long idx = static_cast<long>(t) - (cfg_.frame_stack - 1) + k;
    const img::Image& f = ep.frames[idx < 0 ? 0 : static_cast<std::size_t>(idx)];
    float* out = dst + static_cast<std::size_t>(k) * plane;
    for (std::size_t i = 0; i < plane; ++i) out[i] = static_cast<float>(f.data[i]) / 255.0f;
  }
}

std::vector<std::size_t> PixelReplay::draw_indices(int batch, Rng& rng) const {
  const std::size_t n = next_ - evicted_;
  if (batch < 1) throw InputError("replay: batch must be >= 1");
  if (static_cast<std::size_t>(batch) > n)
    throw InputError("replay: batch " + std::to_string(batch) + " exceeds size " +
                     std::to_string(n));
  std::vector<std::size_t> idx;
  idx.reserve(batch);
  std::unordered_set<std::size_t> seen;
  while (idx.size() < static_cast<std::size_t>(batch)) {
    const std::size_t i =
        evicted_ + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    if (seen.insert(i).second) idx.push_back(i);
  }
  return idx;
}

Batch PixelReplay::sample(int batch, Rng& rng) const {
  std::lock_guard<std::mutex> g(lock_);
  const std::vector<std::size_t> idx = draw_indices(batch, rng);
  const int C = obs_channels();
  Batch out;
  out.o = Tensor<float>(Shape{batch, C, h_, w_});
  out.o_next = Tensor<float>(Shape{batch, C, h_, w_});
  out.a = Tensor<float>(Shape{batch, 2});
  out.r.resize(batch);
  out.done.resize(batch);
  out.s.resize(batch);
  out.s_next.resize(batch);
  const std::size_t obs_sz = static_cast<std::size_t>(C) * h_ * w_;
  for (int b = 0; b < batch; ++b) {
    std::size_t t = 0;
    const Episode& ep = locate(idx[b], &t);
    fill_obs(ep, t, out.o.ptr() + b * obs_sz);
    fill_obs(ep, t + 1, out.o_next.ptr() + b * obs_sz);
    const Episode::Step& st = ep.steps[t];
    out.a.at2(b, 0) = st.a[0];
    out.a.at2(b, 1) = st.a[1];
    out.r[b] = st.r;
    out.s[b] = st.s;
    out.s_next[b] = st.s_next;
    out.done[b] = st.done ? 1 : 0;
  }
  return out;
}

NStepBatch PixelReplay::sample_nstep(int batch, int n_step, double gamma, Rng& rng) const {
  if (n_step < 1) throw InputError("replay: n_step must be >= 1");
  std::lock_guard<std::mutex> g(lock_);
  const std::vector<std::size_t> idx = draw_indices(batch, rng);
  const int C = obs_channels();
  NStepBatch out;
  out.o = Tensor<float>(Shape{batch, C, h_, w_});
  out.o_boot = Tensor<float>(Shape{batch, C, h_, w_});
  out.a = Tensor<float>(Shape{batch, 2});
  out.ret.resize(batch);
  out.discount.resize(batch);
  const std::size_t obs_sz = static_cast<std::size_t>(C) * h_ * w_;
  for (int b = 0; b < batch; ++b) {
    std::size_t t = 0;
    const Episode& ep = locate(idx[b], &t);
    const std::size_t span = std::min<std::size_t>(n_step, ep.steps.size() - t);
    double ret = 0, g_k = 1;
    for (std::size_t k = 0; k < span; ++k, g_k *= gamma) ret += g_k * ep.steps[t + k].r;
    fill_obs(ep, t, out.o.ptr() + b * obs_sz);
    fill_obs(ep, t + span, out.o_boot.ptr() + b * obs_sz);
    out.a.at2(b, 0) = ep.steps[t].a[0];
    out.a.at2(b, 1) = ep.steps[t].a[1];
    out.ret[b] = static_cast<float>(ret);
    out.discount[b] = static_cast<float>(g_k);
  }
  return out;
}

Transition PixelReplay::transition(std::size_t i) const {
  std::lock_guard<std::mutex> g(lock_);
  if (i >= next_ - evicted_) throw InputError("replay: transition index out of range");
  std::size_t t = 0;
  const Episode& ep = locate(evicted_ + i, &t);
  const int C = obs_channels();
  Transition tr;
  tr.o = Tensor<float>(Shape{C, h_, w_});
  tr.o_next = Tensor<float>(Shape{C, h_, w_});
  fill_obs(ep, t, tr.o.ptr());
  fill_obs(ep, t + 1, tr.o_next.ptr());
  const Episode::Step& st = ep.steps[t];
  tr.s = st.s;
  tr.s_next = st.s_next;
  tr.a = st.a;
  tr.r = st.r;
  tr.done = st.done;
  return tr;
}

}  // namespace eagle::distill
