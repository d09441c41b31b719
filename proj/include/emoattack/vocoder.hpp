#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/features.hpp"
#include "emoattack/fft.hpp"

namespace emoattack {

struct VocoderConfig {
  std::size_t fft_size = 1024;
  std::size_t hop = 256;
};

namespace detail {

inline double wrap_phase(double a) { return a - 2.0 * std::numbers::pi * std::round(a / (2.0 * std::numbers::pi)); }

// Weighted overlap-add of already-windowed synthesis frames; divides by the
// summed squared window wherever that sum is non-negligible.
class OverlapAdd {
 public:
  OverlapAdd(std::size_t length, const std::vector<double>& window) : out_(length, 0.0), norm_(length, 0.0), window_(window) {}

  void add(std::ptrdiff_t start, std::span<const double> frame) {
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(i);
      if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(out_.size())) continue;
      out_[pos] += frame[i] * window_[i];
      norm_[pos] += window_[i] * window_[i];
    }
  }

  std::vector<double> finish() && {
    for (std::size_t i = 0; i < out_.size(); ++i) {
      if (norm_[i] > 1e-8) out_[i] /= norm_[i];
    }
    return std::move(out_);
  }

 private:
  std::vector<double> out_;
  std::vector<double> norm_;
  const std::vector<double>& window_;
};

}  // namespace detail

// Phase-vocoder time stretch with identity phase locking: spectral peaks
// advance at their measured instantaneous frequency, every other bin keeps
// its analysis phase offset from the peak whose region it falls in. The
// result has round(x.size() * ratio) samples; ratio > 1 lengthens.
inline std::vector<double> time_stretch(std::span<const double> x, double ratio, const VocoderConfig& cfg = {}) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw DomainError("time_stretch: ratio must be positive");
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(x.size()) * ratio));
  if (ratio == 1.0) return {x.begin(), x.end()};
  const std::size_t n = cfg.fft_size;
  const std::size_t bins = n / 2 + 1;
  // The larger of the two hops is pinned to cfg.hop.
  const double ha = ratio >= 1.0 ? static_cast<double>(cfg.hop) / ratio : static_cast<double>(cfg.hop);
  const double hs = ha * ratio;

  // Zero-pad by a full window on both sides so edge frames are complete.
  std::vector<double> padded(x.size() + 2 * n, 0.0);
  std::copy(x.begin(), x.end(), padded.begin() + static_cast<std::ptrdiff_t>(n));

  const auto window = hann_window(n);
  const auto plan = real_fft_plan(n);
  const std::size_t out_padded = out_len + 2 * n;
  detail::OverlapAdd ola(out_padded, window);

  std::vector<double> frame(n), mag(bins), phase(bins);
  std::vector<cplx> spec(bins);
  std::vector<double> prev_phase(bins, 0.0), synth_phase(bins, 0.0), next_synth(bins, 0.0);
  std::vector<std::size_t> peaks;
  std::size_t prev_pos = 0;
  for (std::size_t j = 0;; ++j) {
    const auto out_start = static_cast<std::size_t>(std::llround(static_cast<double>(j) * hs));
    if (out_start >= out_padded) break;
    const auto pos = static_cast<std::size_t>(std::llround(static_cast<double>(j) * ha));
    if (pos + n > padded.size()) break;
    for (std::size_t i = 0; i < n; ++i) frame[i] = padded[pos + i] * window[i];
    plan->forward(frame, spec);
    double top = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      mag[k] = std::abs(spec[k]);
      phase[k] = std::arg(spec[k]);
      top = std::max(top, mag[k]);
    }
    const double hop_a = static_cast<double>(pos) - static_cast<double>(prev_pos);
    const double hop_s = static_cast<double>(out_start) -
                         static_cast<double>(j == 0 ? 0 : std::llround(static_cast<double>(j - 1) * hs));
    if (j == 0 || top <= 0.0) {
      next_synth = phase;
    } else {
      peaks.clear();
      for (std::size_t k = 1; k + 1 < bins; ++k) {
        if (mag[k] > mag[k - 1] && mag[k] >= mag[k + 1] && mag[k] > 1e-9 * top) peaks.push_back(k);
      }
      if (peaks.empty()) peaks.push_back(0);
      for (std::size_t k : peaks) {
        const double omega = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
        const double inst = omega + detail::wrap_phase(phase[k] - prev_phase[k] - omega * hop_a) / hop_a;
        next_synth[k] = synth_phase[k] + inst * hop_s;
      }
      // Region boundaries sit at the magnitude minimum between neighbouring peaks.
      std::size_t lo = 0;
      for (std::size_t p = 0; p < peaks.size(); ++p) {
        std::size_t hi = bins;
        if (p + 1 < peaks.size()) {
          hi = peaks[p];
          for (std::size_t k = peaks[p]; k <= peaks[p + 1]; ++k) {
            if (mag[k] < mag[hi]) hi = k;
          }
          hi += 1;
        }
        const std::size_t pk = peaks[p];
        for (std::size_t k = lo; k < hi; ++k) {
          if (k != pk) next_synth[k] = next_synth[pk] + (phase[k] - phase[pk]);
        }
        lo = hi;
      }
    }
    for (std::size_t k = 0; k < bins; ++k) {
      synth_phase[k] = detail::wrap_phase(next_synth[k]);
      prev_phase[k] = phase[k];
      spec[k] = std::polar(mag[k], synth_phase[k]);
    }
    prev_pos = pos;
    plan->inverse(spec, frame);
    ola.add(static_cast<std::ptrdiff_t>(out_start), frame);
  }
  auto y = std::move(ola).finish();
  return {y.begin() + static_cast<std::ptrdiff_t>(n), y.begin() + static_cast<std::ptrdiff_t>(n + out_len)};
}

// Band-limited (Hann-windowed sinc) reader: output sample i takes the input at
// position read_pos(i). `step_max` bounds the local step so the anti-alias
// cutoff can be set to min(1, 1/step).
inline std::vector<double> resample_positions(std::span<const double> x, std::size_t out_len,
                                              const std::function<double(std::size_t)>& read_pos, double step_max,
                                              int half_taps = 16) {
  const double cutoff = std::min(1.0, 1.0 / std::max(step_max, 1e-9));
  std::vector<double> out(out_len, 0.0);
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  for (std::size_t i = 0; i < out_len; ++i) {
    const double p = read_pos(i);
    const double base = std::floor(p);
    const double frac = p - base;
    const auto b = static_cast<std::ptrdiff_t>(base);
    if (frac == 0.0 && cutoff == 1.0) {
      out[i] = (b >= 0 && b < n) ? x[b] : 0.0;
      continue;
    }
    double acc = 0.0, wsum = 0.0;
    for (int t = -half_taps + 1; t <= half_taps; ++t) {
      const double d = static_cast<double>(t) - frac;
      const double arg = std::numbers::pi * d * cutoff;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * d / half_taps);
      const double k = sinc * win * cutoff;
      wsum += k;
      const std::ptrdiff_t idx = b + t;
      if (idx >= 0 && idx < n) acc += k * x[idx];
    }
    out[i] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

// Stretch by `factor`, then read back `factor` times faster: duration is
// kept, every frequency is scaled by `factor`.
inline std::vector<double> pitch_shift(std::span<const double> x, double factor, const VocoderConfig& cfg = {}) {
  if (!(factor >= 0.5 && factor <= 2.0)) throw DomainError("pitch_shift: factor must lie in [0.5, 2]");
  if (factor == 1.0) return {x.begin(), x.end()};
  const auto stretched = time_stretch(x, factor, cfg);
  return resample_positions(stretched, x.size(), [factor](std::size_t i) { return static_cast<double>(i) * factor; },
                            factor);
}

inline Waveform pitch_shift(const Waveform& w, double factor, const VocoderConfig& cfg = {}) {
  const auto x = w.to_double();
  return Waveform::clamped(pitch_shift(x, factor, cfg), w.sample_rate());
}

namespace detail {

// Log-power envelope through the harmonic peaks, linearly interpolated between
// them and held flat beyond the first and last. Each peak is searched for
// within +-30% of f0 around the previous peak plus f0, so a slightly wrong f0
// does not drift off the harmonics.
inline void harmonic_envelope(std::span<const cplx> spec, double f0_bins, std::vector<double>& env) {
  const std::size_t bins = spec.size();
  std::vector<std::pair<double, double>> pts;
  const double reach = 0.3 * f0_bins;
  for (double c = f0_bins; c + reach < static_cast<double>(bins) - 1.0;) {
    const auto lo = static_cast<std::size_t>(std::max(1.0, std::ceil(c - reach)));
    const auto hi = static_cast<std::size_t>(std::floor(c + reach));
    std::size_t best = lo;
    for (std::size_t k = lo; k <= hi; ++k) {
      if (std::norm(spec[k]) > std::norm(spec[best])) best = k;
    }
    pts.emplace_back(static_cast<double>(best), std::log(std::norm(spec[best]) + 1e-20));
    c = static_cast<double>(best) + f0_bins;
  }
  env.resize(bins);
  std::size_t p = 0;
  for (std::size_t k = 0; k < bins; ++k) {
    const auto kd = static_cast<double>(k);
    while (p + 1 < pts.size() && pts[p + 1].first <= kd) ++p;
    if (pts.empty()) {
      env[k] = 0.0;
    } else if (kd <= pts.front().first) {
      env[k] = pts.front().second;
    } else if (p + 1 >= pts.size()) {
      env[k] = pts.back().second;
    } else {
      const double u = (kd - pts[p].first) / (pts[p + 1].first - pts[p].first);
      env[k] = (1.0 - u) * pts[p].second + u * pts[p + 1].second;
    }
  }
}

// Log of the power spectrum averaged over `half` bins either side.
inline void smooth_envelope(std::span<const cplx> spec, std::size_t half, std::vector<double>& env) {
  const std::size_t bins = spec.size();
  std::vector<double> prefix(bins + 1, 0.0);
  for (std::size_t k = 0; k < bins; ++k) prefix[k + 1] = prefix[k] + std::norm(spec[k]);
  env.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const std::size_t lo = k > half ? k - half : 0;
    const std::size_t hi = std::min(bins, k + half + 1);
    env[k] = std::log((prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo) + 1e-20);
  }
}

}  // namespace detail

// Pitch shift that keeps the spectral envelope in place: in each frame every
// spectral peak region is moved from bin k to k * factor(i) and rescaled by
// the envelope ratio at the two positions; peak phases advance at the scaled
// instantaneous frequency. factor(i) is evaluated at each frame's centre
// sample and must lie in [0.5, 2].
inline std::vector<double> envelope_preserving_shift(std::span<const double> x, int sample_rate,
                                                     const std::function<double(std::size_t)>& factor,
                                                     const VocoderConfig& cfg = {}) {
  const std::size_t n = cfg.fft_size;
  const std::size_t bins = n / 2 + 1;
  const std::size_t len = x.size();
  std::vector<double> padded(len + 2 * n, 0.0);
  std::copy(x.begin(), x.end(), padded.begin() + static_cast<std::ptrdiff_t>(n));

  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n);
  const auto half = static_cast<std::size_t>(std::max(1.0, std::round(200.0 / bin_hz)));
  const double hop = static_cast<double>(cfg.hop);
  const auto window = hann_window(n);
  const auto plan = real_fft_plan(n);
  detail::OverlapAdd ola(padded.size(), window);
  std::vector<double> frame(n), mag(bins), phase(bins), prev_phase(bins, 0.0), env;
  std::vector<double> synth_phase(bins, 0.0), next_synth(bins, 0.0);
  std::vector<cplx> spec(bins), out(bins);
  std::vector<std::size_t> peaks;

  for (std::size_t start = 0, j = 0; start + n <= padded.size(); start += cfg.hop, ++j) {
    const std::span<const double> raw(padded.data() + start, n);
    for (std::size_t i = 0; i < n; ++i) frame[i] = raw[i] * window[i];
    plan->forward(frame, spec);
    double top = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      mag[k] = std::abs(spec[k]);
      phase[k] = std::arg(spec[k]);
      top = std::max(top, mag[k]);
    }
    const std::size_t mid = start + n / 2;
    const double alpha = factor(std::min(mid > n ? mid - n : 0, len == 0 ? 0 : len - 1));
    if (!(alpha >= 0.5 && alpha <= 2.0)) throw DomainError("envelope_preserving_shift: factor must lie in [0.5, 2]");
    if (const auto f0 = estimate_f0(raw, sample_rate)) {
      detail::harmonic_envelope(spec, *f0 / bin_hz, env);
    } else {
      detail::smooth_envelope(spec, half, env);
    }
    auto env_at = [&](double kf) {
      kf = std::clamp(kf, 0.0, static_cast<double>(bins - 1));
      const auto k0 = static_cast<std::size_t>(kf);
      const std::size_t k1 = std::min(k0 + 1, bins - 1);
      const double u = kf - static_cast<double>(k0);
      return (1.0 - u) * env[k0] + u * env[k1];
    };

    peaks.clear();
    if (top > 0.0) {
      for (std::size_t k = 1; k + 1 < bins; ++k) {
        if (mag[k] > mag[k - 1] && mag[k] >= mag[k + 1] && mag[k] > 1e-9 * top) peaks.push_back(k);
      }
    }
    std::fill(out.begin(), out.end(), cplx{});
    std::fill(next_synth.begin(), next_synth.end(), 0.0);
    std::size_t lo = 0;
    for (std::size_t p = 0; p < peaks.size(); ++p) {
      std::size_t hi = bins;
      if (p + 1 < peaks.size()) {
        hi = peaks[p];
        for (std::size_t k = peaks[p]; k <= peaks[p + 1]; ++k) {
          if (mag[k] < mag[hi]) hi = k;
        }
        hi += 1;
      }
      const std::size_t pk = peaks[p];
      const double omega = 2.0 * std::numbers::pi * static_cast<double>(pk) / static_cast<double>(n);
      const double inst = j == 0 ? omega : omega + detail::wrap_phase(phase[pk] - prev_phase[pk] - omega * hop) / hop;
      const auto target = static_cast<std::ptrdiff_t>(std::llround(static_cast<double>(pk) * alpha));
      const std::ptrdiff_t shift = target - static_cast<std::ptrdiff_t>(pk);
      if (target <= 0 || target >= static_cast<std::ptrdiff_t>(bins)) {
        lo = hi;
        continue;
      }
      const double peak_phase = synth_phase[static_cast<std::size_t>(target)] + alpha * inst * hop;
      const double gain = std::clamp(std::exp(0.5 * (env_at(static_cast<double>(target)) - env[pk])), 1e-3, 1e3);
      for (std::size_t k = lo; k < hi; ++k) {
        const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(k) + shift;
        if (dst <= 0 || dst >= static_cast<std::ptrdiff_t>(bins)) continue;
        const double ph = peak_phase + (phase[k] - phase[pk]);
        out[static_cast<std::size_t>(dst)] += std::polar(mag[k] * gain, ph);
        next_synth[static_cast<std::size_t>(dst)] = ph;
      }
      lo = hi;
    }
    for (std::size_t k = 0; k < bins; ++k) {
      synth_phase[k] = detail::wrap_phase(next_synth[k]);
      prev_phase[k] = phase[k];
    }
    out[0] = cplx{out[0].real(), 0.0};
    out[bins - 1] = cplx{out[bins - 1].real(), 0.0};
    plan->inverse(out, frame);
    ola.add(static_cast<std::ptrdiff_t>(start), frame);
  }
  auto y = std::move(ola).finish();
  return {y.begin() + static_cast<std::ptrdiff_t>(n), y.begin() + static_cast<std::ptrdiff_t>(n + len)};
}

}  // namespace emoattack
