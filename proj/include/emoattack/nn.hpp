#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/random.hpp"

namespace emoattack {

struct CnnShape {
  std::size_t frames = 98;
  std::size_t mels = 40;
  std::size_t channels = 8;
  std::size_t hidden = 64;
  std::size_t classes = 10;

  std::size_t h1() const { return frames / 2; }
  std::size_t w1() const { return mels / 2; }
  std::size_t h2() const { return h1() / 2; }
  std::size_t w2() const { return w1() / 2; }
  std::size_t flat() const { return channels * h2() * w2(); }
  std::size_t input_size() const { return frames * mels; }

  void validate() const {
    if (frames < 4 || mels < 4) throw DomainError("cnn: input must be at least 4x4");
    if (channels == 0 || hidden == 0 || classes < 2) throw DomainError("cnn: empty layer");
  }
  bool operator==(const CnnShape&) const = default;
};

// conv(3x3, same) -> ReLU -> maxpool 2x2 -> conv(3x3, same) -> ReLU -> maxpool 2x2
// -> dense(hidden) -> ReLU -> dense(classes). Inputs are row-major [frames][mels].
template <class T>
struct CnnParams {
  CnnShape shape;
  std::vector<T> conv1_w, conv1_b, conv2_w, conv2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  CnnParams() = default;
  explicit CnnParams(const CnnShape& s) : shape(s) {
    s.validate();
    const std::size_t c = s.channels;
    conv1_w.assign(c * 9, T(0));
    conv1_b.assign(c, T(0));
    conv2_w.assign(c * c * 9, T(0));
    conv2_b.assign(c, T(0));
    fc1_w.assign(s.hidden * s.flat(), T(0));
    fc1_b.assign(s.hidden, T(0));
    fc2_w.assign(s.classes * s.hidden, T(0));
    fc2_b.assign(s.classes, T(0));
  }

  static constexpr std::array<const char*, 8> kNames = {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                                                        "fc1.weight",   "fc1.bias",   "fc2.weight",   "fc2.bias"};

  std::array<std::vector<T>*, 8> tensors() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
  }
  std::array<const std::vector<T>*, 8> tensors() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
  }
  std::array<std::vector<std::size_t>, 8> tensor_shapes() const {
    const std::size_t c = shape.channels;
    return {{{c, 1, 3, 3}, {c}, {c, c, 3, 3}, {c}, {shape.hidden, shape.flat()}, {shape.hidden},
             {shape.classes, shape.hidden}, {shape.classes}}};
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (auto* t : tensors()) n += t->size();
    return n;
  }

  void zero() {
    for (auto* t : tensors()) std::fill(t->begin(), t->end(), T(0));
  }

  bool finite() const {
    for (auto* t : tensors()) {
      for (T v : *t) {
        if (!std::isfinite(static_cast<double>(v))) return false;
      }
    }
    return true;
  }

  template <class U>
  CnnParams<U> cast() const {
    CnnParams<U> out(shape);
    auto dst = out.tensors();
    auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::transform(src[i]->begin(), src[i]->end(), dst[i]->begin(), [](T v) { return static_cast<U>(v); });
    }
    return out;
  }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <class T>
CnnParams<T> init_cnn(const CnnShape& shape, std::uint64_t seed) {
  CnnParams<T> p(shape);
  Rng rng(derive_seed({seed, 0x1417ULL}));
  const std::size_t c = shape.channels;
  const std::array<std::size_t, 8> fan_in = {9, 9, c * 9, c * 9, shape.flat(), shape.flat(), shape.hidden, shape.hidden};
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in[i]));
    for (auto& v : *ts[i]) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

// Scratch buffers for one forward/backward pass; reusable across calls.
template <class T>
struct CnnWorkspace {
  std::vector<T> in_pad, z1, pool1_pad, z2, pool2, h_pre, h, logits, probs;
  std::vector<std::uint32_t> arg1, arg2;
  std::vector<T> d_logits, d_h, d_pool2, d_z2, d_pool1_pad, d_z1;

  explicit CnnWorkspace(const CnnShape& s) {
    const std::size_t c = s.channels;
    in_pad.assign((s.frames + 2) * (s.mels + 2), T(0));
    z1.assign(c * s.frames * s.mels, T(0));
    pool1_pad.assign(c * (s.h1() + 2) * (s.w1() + 2), T(0));
    arg1.assign(c * s.h1() * s.w1(), 0);
    z2.assign(c * s.h1() * s.w1(), T(0));
    pool2.assign(s.flat(), T(0));
    arg2.assign(s.flat(), 0);
    h_pre.assign(s.hidden, T(0));
    h.assign(s.hidden, T(0));
    logits.assign(s.classes, T(0));
    probs.assign(s.classes, T(0));
    d_logits.assign(s.classes, T(0));
    d_h.assign(s.hidden, T(0));
    d_pool2.assign(s.flat(), T(0));
    d_z2.assign(z2.size(), T(0));
    d_pool1_pad.assign(pool1_pad.size(), T(0));
    d_z1.assign(z1.size(), T(0));
  }
};

namespace detail {

// out[o][y][x] (+)= sum_i sum_{ky,kx} w[o][i][ky][kx] * in_pad[i][y+ky][x+kx]
template <class T>
void conv3x3_forward(const T* in_pad, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out) {
  const std::size_t pw = w + 2, plane = (h + 2) * pw;
  for (std::size_t o = 0; o < cout; ++o) {
    T* dst = out + o * h * w;
    std::fill(dst, dst + h * w, bias[o]);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* src = in_pad + i * plane;
      const T* k = weight + (o * cin + i) * 9;
      for (std::size_t y = 0; y < h; ++y) {
        T* row = dst + y * w;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const T* s = src + (y + ky) * pw;
          const T k0 = k[ky * 3], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
          for (std::size_t x = 0; x < w; ++x) row[x] += k0 * s[x] + k1 * s[x + 1] + k2 * s[x + 2];
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and (optionally) the padded input gradient.
template <class T>
void conv3x3_backward(const T* in_pad, std::size_t cin, std::size_t h, std::size_t w, const T* weight, std::size_t cout,
                      const T* d_out, T* g_weight, T* g_bias, T* d_in_pad) {
  const std::size_t pw = w + 2, plane = (h + 2) * pw;
  for (std::size_t o = 0; o < cout; ++o) {
    const T* g = d_out + o * h * w;
    T sum = T(0);
    for (std::size_t j = 0; j < h * w; ++j) sum += g[j];
    g_bias[o] += sum;
    for (std::size_t i = 0; i < cin; ++i) {
      const T* src = in_pad + i * plane;
      const std::size_t kidx = (o * cin + i) * 9;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        T a0 = T(0), a1 = T(0), a2 = T(0);
        for (std::size_t y = 0; y < h; ++y) {
          const T* row = g + y * w;
          const T* s = src + (y + ky) * pw;
          for (std::size_t x = 0; x < w; ++x) {
            a0 += row[x] * s[x];
            a1 += row[x] * s[x + 1];
            a2 += row[x] * s[x + 2];
          }
        }
        g_weight[kidx + ky * 3] += a0;
        g_weight[kidx + ky * 3 + 1] += a1;
        g_weight[kidx + ky * 3 + 2] += a2;
      }
      if (d_in_pad != nullptr) {
        T* dst = d_in_pad + i * plane;
        const T* k = weight + kidx;
        for (std::size_t y = 0; y < h; ++y) {
          const T* row = g + y * w;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            T* d = dst + (y + ky) * pw;
            const T k0 = k[ky * 3], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
            for (std::size_t x = 0; x < w; ++x) {
              d[x] += k0 * row[x];
              d[x + 1] += k1 * row[x];
              d[x + 2] += k2 * row[x];
            }
          }
        }
      }
    }
  }
}

// ReLU then 2x2 max-pool (floor). Output written at stride `out_pitch` with
// offset `out_pad` so it can land inside a padded buffer.
template <class T>
void relu_pool(const T* z, std::size_t c, std::size_t h, std::size_t w, T* out, std::size_t out_pitch,
               std::size_t out_plane, std::size_t out_pad, std::uint32_t* arg) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = z + ch * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = 2 * y * w + 2 * x;
        std::size_t best = base;
        for (std::size_t idx : {base + 1, base + w, base + w + 1}) {
          if (src[idx] > src[best]) best = idx;
        }
        const T v = std::max(src[best], T(0));
        out[ch * out_plane + (y + out_pad) * out_pitch + x + out_pad] = v;
        arg[(ch * oh + y) * ow + x] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

template <class T>
void relu_pool_backward(const T* z, std::size_t c, std::size_t h, std::size_t w, const T* d_out,
                        std::size_t out_pitch, std::size_t out_plane, std::size_t out_pad, const std::uint32_t* arg,
                        T* d_z) {
  const std::size_t oh = h / 2, ow = w / 2;
  std::fill(d_z, d_z + c * h * w, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t src = arg[(ch * oh + y) * ow + x];
        if (z[ch * h * w + src] > T(0)) {
          d_z[ch * h * w + src] += d_out[ch * out_plane + (y + out_pad) * out_pitch + x + out_pad];
        }
      }
    }
  }
}

}  // namespace detail

// Fills ws.logits and ws.probs (softmax) for one input of shape.frames x shape.mels.
template <class T>
void cnn_forward(const CnnParams<T>& p, const T* input, CnnWorkspace<T>& ws) {
  const auto& s = p.shape;
  const std::size_t c = s.channels;
  const std::size_t pw0 = s.mels + 2;
  for (std::size_t y = 0; y < s.frames; ++y) {
    std::copy(input + y * s.mels, input + (y + 1) * s.mels, ws.in_pad.begin() + static_cast<std::ptrdiff_t>((y + 1) * pw0 + 1));
  }
  detail::conv3x3_forward(ws.in_pad.data(), 1, s.frames, s.mels, p.conv1_w.data(), p.conv1_b.data(), c, ws.z1.data());
  const std::size_t pw1 = s.w1() + 2, plane1 = (s.h1() + 2) * pw1;
  detail::relu_pool(ws.z1.data(), c, s.frames, s.mels, ws.pool1_pad.data(), pw1, plane1, 1, ws.arg1.data());
  detail::conv3x3_forward(ws.pool1_pad.data(), c, s.h1(), s.w1(), p.conv2_w.data(), p.conv2_b.data(), c, ws.z2.data());
  detail::relu_pool(ws.z2.data(), c, s.h1(), s.w1(), ws.pool2.data(), s.w2(), s.h2() * s.w2(), 0, ws.arg2.data());

  const std::size_t flat = s.flat();
  for (std::size_t j = 0; j < s.hidden; ++j) {
    const T* row = p.fc1_w.data() + j * flat;
    T acc = p.fc1_b[j];
    for (std::size_t i = 0; i < flat; ++i) acc += row[i] * ws.pool2[i];
    ws.h_pre[j] = acc;
    ws.h[j] = std::max(acc, T(0));
  }
  T top = -std::numeric_limits<T>::infinity();
  for (std::size_t k = 0; k < s.classes; ++k) {
    const T* row = p.fc2_w.data() + k * s.hidden;
    T acc = p.fc2_b[k];
    for (std::size_t j = 0; j < s.hidden; ++j) acc += row[j] * ws.h[j];
    ws.logits[k] = acc;
    top = std::max(top, acc);
  }
  T total = T(0);
  for (std::size_t k = 0; k < s.classes; ++k) {
    ws.probs[k] = std::exp(ws.logits[k] - top);
    total += ws.probs[k];
  }
  for (auto& v : ws.probs) v /= total;
}

// Backpropagates d(loss)/d(logits) = scale * (probs - onehot(label)) from the
// state left in `ws` by cnn_forward, accumulating into `grad`.
template <class T>
void cnn_backward(const CnnParams<T>& p, std::size_t label, T scale, CnnWorkspace<T>& ws, CnnParams<T>& grad) {
  const auto& s = p.shape;
  const std::size_t c = s.channels, flat = s.flat();
  for (std::size_t k = 0; k < s.classes; ++k) {
    ws.d_logits[k] = scale * (ws.probs[k] - (k == label ? T(1) : T(0)));
  }
  std::fill(ws.d_h.begin(), ws.d_h.end(), T(0));
  for (std::size_t k = 0; k < s.classes; ++k) {
    const T g = ws.d_logits[k];
    grad.fc2_b[k] += g;
    T* grow = grad.fc2_w.data() + k * s.hidden;
    const T* row = p.fc2_w.data() + k * s.hidden;
    for (std::size_t j = 0; j < s.hidden; ++j) {
      grow[j] += g * ws.h[j];
      ws.d_h[j] += g * row[j];
    }
  }
  std::fill(ws.d_pool2.begin(), ws.d_pool2.end(), T(0));
  for (std::size_t j = 0; j < s.hidden; ++j) {
    if (ws.h_pre[j] <= T(0)) continue;
    const T g = ws.d_h[j];
    grad.fc1_b[j] += g;
    T* grow = grad.fc1_w.data() + j * flat;
    const T* row = p.fc1_w.data() + j * flat;
    for (std::size_t i = 0; i < flat; ++i) {
      grow[i] += g * ws.pool2[i];
      ws.d_pool2[i] += g * row[i];
    }
  }
  detail::relu_pool_backward(ws.z2.data(), c, s.h1(), s.w1(), ws.d_pool2.data(), s.w2(), s.h2() * s.w2(), 0,
                             ws.arg2.data(), ws.d_z2.data());
  std::fill(ws.d_pool1_pad.begin(), ws.d_pool1_pad.end(), T(0));
  detail::conv3x3_backward(ws.pool1_pad.data(), c, s.h1(), s.w1(), p.conv2_w.data(), c, ws.d_z2.data(),
                           grad.conv2_w.data(), grad.conv2_b.data(), ws.d_pool1_pad.data());
  const std::size_t pw1 = s.w1() + 2, plane1 = (s.h1() + 2) * pw1;
  detail::relu_pool_backward(ws.z1.data(), c, s.frames, s.mels, ws.d_pool1_pad.data(), pw1, plane1, 1,
                             ws.arg1.data(), ws.d_z1.data());
  detail::conv3x3_backward<T>(ws.in_pad.data(), 1, s.frames, s.mels, p.conv1_w.data(), c, ws.d_z1.data(),
                              grad.conv1_w.data(), grad.conv1_b.data(), nullptr);
}

template <class T>
std::vector<T> cnn_logits(const CnnParams<T>& p, const T* input) {
  CnnWorkspace<T> ws(p.shape);
  cnn_forward(p, input, ws);
  return ws.logits;
}

struct Example {
  const float* input;  // shape.frames x shape.mels, already normalized
  std::size_t label;
};

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  CnnParams<T> grad;
};

// Mean cross-entropy over the batch and its gradient.
template <class T>
LossAndGrad<T> loss_and_grad(const CnnParams<T>& p, std::span<const std::vector<T>> inputs,
                             std::span<const std::size_t> labels) {
  if (inputs.empty() || inputs.size() != labels.size()) throw DomainError("loss_and_grad: empty or mismatched batch");
  LossAndGrad<T> out{0.0, CnnParams<T>(p.shape)};
  CnnWorkspace<T> ws(p.shape);
  const T scale = T(1) / static_cast<T>(inputs.size());
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (labels[b] >= p.shape.classes) throw DomainError("loss_and_grad: label out of range");
    if (inputs[b].size() != p.shape.input_size()) throw DomainError("loss_and_grad: input shape mismatch");
    cnn_forward(p, inputs[b].data(), ws);
    out.loss -= std::log(std::max(static_cast<double>(ws.probs[labels[b]]), 1e-300));
    cnn_backward(p, labels[b], scale, ws, out.grad);
  }
  out.loss /= static_cast<double>(inputs.size());
  return out;
}

inline std::size_t argmax_lowest(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam(const CnnParams<T>& like, AdamConfig cfg) : cfg_(cfg), m_(like.shape), v_(like.shape) {}

  void step(CnnParams<T>& p, const CnnParams<T>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto ps = p.tensors();
    auto gs = g.tensors();
    auto ms = m_.tensors();
    auto vs = v_.tensors();
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(cfg_.eps);
    for (std::size_t t = 0; t < ps.size(); ++t) {
      T* w = ps[t]->data();
      const T* gr = gs[t]->data();
      T* m = ms[t]->data();
      T* v = vs[t]->data();
      for (std::size_t i = 0; i < ps[t]->size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * gr[i];
        v[i] = b2 * v[i] + (T(1) - b2) * gr[i] * gr[i];
        w[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  CnnParams<T> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 60;
  AdamConfig adam{};
  std::uint64_t shuffle_seed = 1;
  std::uint64_t init_seed = 1;
  CnnShape shape{};

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
    if (epochs < 1) throw ConfigError("train.epochs", "must be at least 1");
    if (!(adam.lr > 0.0)) throw ConfigError("train.lr", "must be positive");
    shape.validate();
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};
using TrainHistory = std::vector<EpochStats>;

// Trained classifier: network plus the per-mel-band input standardization
// measured on its training set.
struct Classifier {
  CnnParams<float> net;
  std::vector<float> band_mean, band_std;

  std::vector<float> normalize(std::span<const float> logmel) const {
    const std::size_t mels = net.shape.mels;
    if (logmel.size() != net.shape.input_size()) throw DomainError("classifier: input shape mismatch");
    std::vector<float> out(logmel.size());
    for (std::size_t i = 0; i < logmel.size(); ++i) out[i] = (logmel[i] - band_mean[i % mels]) / band_std[i % mels];
    return out;
  }

  std::vector<float> logits(std::span<const float> logmel) const {
    const auto x = normalize(logmel);
    return cnn_logits(net, x.data());
  }

  std::size_t predict(std::span<const float> logmel) const {
    const auto l = logits(logmel);
    return argmax_lowest(l);
  }
};

inline void compute_band_stats(std::span<const std::vector<float>* const> inputs, std::size_t mels,
                               std::vector<float>& mean, std::vector<float>& stddev) {
  std::vector<double> s(mels, 0.0), q(mels, 0.0);
  std::size_t count = 0;
  for (const auto* in : inputs) {
    for (std::size_t i = 0; i < in->size(); ++i) {
      s[i % mels] += (*in)[i];
      q[i % mels] += static_cast<double>((*in)[i]) * (*in)[i];
    }
    count += in->size() / mels;
  }
  mean.assign(mels, 0.0f);
  stddev.assign(mels, 1.0f);
  if (count == 0) return;
  for (std::size_t m = 0; m < mels; ++m) {
    const double mu = s[m] / static_cast<double>(count);
    const double var = std::max(0.0, q[m] / static_cast<double>(count) - mu * mu);
    mean[m] = static_cast<float>(mu);
    stddev[m] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
  }
}

struct LabeledFeatures {
  const std::vector<float>* logmel;
  std::size_t label;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Mini-batch Adam on mean cross-entropy. The final short batch is kept.
inline std::pair<Classifier, TrainHistory> train_classifier(const TrainConfig& cfg,
                                                            std::span<const LabeledFeatures> train_set,
                                                            std::span<const LabeledFeatures> test_set,
                                                            const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty() || test_set.empty()) throw DomainError("train: training and test sets must be nonempty");
  const auto& shape = cfg.shape;
  for (const auto& ex : train_set) {
    if (ex.label >= shape.classes) throw DomainError("train: label out of range");
    if (ex.logmel->size() != shape.input_size()) throw DomainError("train: input shape mismatch");
  }

  Classifier model;
  model.net = init_cnn<float>(shape, cfg.init_seed);
  {
    std::vector<const std::vector<float>*> ptrs;
    for (const auto& ex : train_set) ptrs.push_back(ex.logmel);
    compute_band_stats(ptrs, shape.mels, model.band_mean, model.band_std);
  }
  std::vector<std::vector<float>> inputs;
  inputs.reserve(train_set.size());
  for (const auto& ex : train_set) inputs.push_back(model.normalize(*ex.logmel));
  std::vector<std::vector<float>> test_inputs;
  for (const auto& ex : test_set) test_inputs.push_back(model.normalize(*ex.logmel));

  Adam<float> opt(model.net, cfg.adam);
  CnnParams<float> grad(shape);
  CnnWorkspace<float> ws(shape);
  std::vector<std::size_t> order(train_set.size());
  TrainHistory history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed({cfg.shuffle_seed, 0x5407ULL, epoch}));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const float scale = 1.0f / static_cast<float>(end - start);
      grad.zero();
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const std::size_t label = train_set[idx].label;
        cnn_forward(model.net, inputs[idx].data(), ws);
        batch_loss -= std::log(std::max(static_cast<double>(ws.probs[label]), 1e-300));
        if (argmax_lowest(ws.logits) == label) ++correct;
        cnn_backward(model.net, label, scale, ws, grad);
      }
      if (!std::isfinite(batch_loss) || !grad.finite()) {
        throw TrainingError("non-finite loss or gradient", static_cast<int>(epoch), static_cast<int>(batch_index));
      }
      loss_sum += batch_loss;
      opt.step(model.net, grad);
    }
    std::size_t test_correct = 0;
    for (std::size_t i = 0; i < test_inputs.size(); ++i) {
      cnn_forward(model.net, test_inputs[i].data(), ws);
      if (argmax_lowest(ws.logits) == test_set[i].label) ++test_correct;
    }
    EpochStats st;
    st.epoch = epoch + 1;
    st.loss = loss_sum / static_cast<double>(order.size());
    st.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    st.test_acc = static_cast<double>(test_correct) / static_cast<double>(test_inputs.size());
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return {std::move(model), std::move(history)};
}

// ---- persistence ----

inline std::string serialize(const Classifier& m) {
  std::ostringstream os;
  char buf[64];
  const auto& s = m.net.shape;
  os << "model-v1\n";
  os << "shape " << s.frames << ' ' << s.mels << ' ' << s.channels << ' ' << s.hidden << ' ' << s.classes << '\n';
  auto write = [&](const std::string& name, const std::vector<std::size_t>& dims, const std::vector<float>& data) {
    os << "tensor " << name << ' ' << dims.size();
    for (auto d : dims) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(data[i]));
      os << buf << (i + 1 == data.size() ? '\n' : ' ');
    }
  };
  write("input.band_mean", {m.band_mean.size()}, m.band_mean);
  write("input.band_std", {m.band_std.size()}, m.band_std);
  const auto shapes = m.net.tensor_shapes();
  const auto ts = m.net.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) write(CnnParams<float>::kNames[i], shapes[i], *ts[i]);
  return os.str();
}

inline Classifier deserialize_classifier(const std::string& text) {
  std::istringstream is(text);
  std::string word;
  if (!(is >> word) || word != "model-v1") throw FormatError("checkpoint: missing model-v1 header");
  CnnShape s;
  if (!(is >> word) || word != "shape" || !(is >> s.frames >> s.mels >> s.channels >> s.hidden >> s.classes)) {
    throw FormatError("checkpoint: bad shape line");
  }
  s.validate();
  Classifier m;
  m.net = CnnParams<float>(s);
  std::map<std::string, std::vector<float>*> slots{{"input.band_mean", &m.band_mean}, {"input.band_std", &m.band_std}};
  const auto ts = m.net.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) slots[CnnParams<float>::kNames[i]] = ts[i];
  std::map<std::string, std::size_t> expected{{"input.band_mean", s.mels}, {"input.band_std", s.mels}};
  for (std::size_t i = 0; i < ts.size(); ++i) expected[CnnParams<float>::kNames[i]] = ts[i]->size();

  std::size_t seen = 0;
  while (is >> word) {
    if (word != "tensor") throw FormatError("checkpoint: expected 'tensor', got '" + word + "'");
    std::string name;
    std::size_t rank = 0;
    if (!(is >> name >> rank)) throw FormatError("checkpoint: bad tensor header");
    std::size_t count = 1;
    for (std::size_t r = 0; r < rank; ++r) {
      std::size_t d = 0;
      if (!(is >> d)) throw FormatError("checkpoint: bad dims for " + name);
      count *= d;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unknown tensor " + name);
    if (count != expected[name]) throw FormatError("checkpoint: wrong size for " + name);
    it->second->assign(count, 0.0f);
    for (auto& v : *it->second) {
      double d = 0.0;
      if (!(is >> d)) throw FormatError("checkpoint: truncated tensor " + name);
      v = static_cast<float>(d);
    }
    ++seen;
  }
  if (seen != slots.size()) throw FormatError("checkpoint: missing tensors");
  return m;
}

inline void save_classifier(const Classifier& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << serialize(m);
  if (!f) throw IoError("write failed: " + path.string());
}

inline Classifier load_classifier(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_classifier(ss.str());
}

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  char buf[128];
  os << "epoch,loss,train_acc,test_acc\n";
  for (const auto& e : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", e.epoch, e.loss, e.train_acc, e.test_acc);
    os << buf;
  }
  return os.str();
}

}  // namespace emoattack
