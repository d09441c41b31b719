#pragma once

#include <algorithm>
#include <cmath>
#include <array>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/fft.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

// Periodic Hann window (sums to a constant under 50% and 75% overlap).
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

inline std::size_t num_frames(std::size_t len, std::size_t win, std::size_t hop) {
  return len < win ? 0 : 1 + (len - win) / hop;
}

struct Spectrogram {
  std::size_t n_frames = 0;
  std::size_t n_bins = 0;
  std::size_t win_length = 0;
  std::size_t hop_length = 0;
  int sample_rate_hz = kDefaultSampleRate;
  std::vector<cplx> frames;  // row-major [n_frames x n_bins]

  cplx at(std::size_t t, std::size_t k) const { return frames[t * n_bins + k]; }
  std::span<const cplx> frame(std::size_t t) const { return {frames.data() + t * n_bins, n_bins}; }
};

inline Spectrogram stft(std::span<const double> x, int sample_rate, std::size_t win_length, std::size_t hop_length) {
  if (win_length < 2 || win_length % 2 != 0) throw DomainError("stft: window length must be even and >= 2");
  if (hop_length == 0) throw DomainError("stft: hop must be positive");
  if (win_length > x.size()) throw DomainError("stft: window longer than signal");
  Spectrogram s;
  s.win_length = win_length;
  s.hop_length = hop_length;
  s.sample_rate_hz = sample_rate;
  s.n_bins = win_length / 2 + 1;
  s.n_frames = num_frames(x.size(), win_length, hop_length);
  s.frames.resize(s.n_frames * s.n_bins);
  const auto window = hann_window(win_length);
  const auto plan = real_fft_plan(win_length);
  std::vector<double> buf(win_length);
  for (std::size_t t = 0; t < s.n_frames; ++t) {
    for (std::size_t i = 0; i < win_length; ++i) buf[i] = x[t * hop_length + i] * window[i];
    plan->forward(buf, std::span<cplx>(s.frames.data() + t * s.n_bins, s.n_bins));
  }
  return s;
}

inline Spectrogram stft(const Waveform& w, std::size_t win_length, std::size_t hop_length) {
  const auto x = w.to_double();
  return stft(x, w.sample_rate(), win_length, hop_length);
}

// ---------------------------------------------------------------------------
// Mel filterbank

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelConfig {
  std::size_t n_mels = 40;
  std::size_t win_length = 400;
  std::size_t hop_length = 160;
  double f_min = 0.0;
  double f_max = 8000.0;
  bool log = true;
};

inline constexpr double kLogFloor = 1e-10;

// Rows are HTK-scale triangles over FFT bin frequencies, each rescaled so
// its largest sampled weight is exactly 1.
inline std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate,
                                                       double f_min, double f_max) {
  if (n_mels < 2) throw DomainError("mel filterbank needs at least 2 filters");
  if (!(f_max > f_min) || f_min < 0.0) throw DomainError("mel filterbank: need 0 <= f_min < f_max");
  if (f_max > sample_rate / 2.0 + 1e-9) throw DomainError("mel filterbank: f_max above Nyquist");
  const std::size_t n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  std::vector<std::vector<double>> bank(n_mels, std::vector<double>(n_bins, 0.0));
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    double peak = 0.0;
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double v = 0.0;
      if (f > lo && f <= c) v = (f - lo) / (c - lo);
      else if (f > c && f < hi) v = (hi - f) / (hi - c);
      bank[m][k] = v;
      peak = std::max(peak, v);
    }
    if (peak <= 0.0) throw DomainError("mel filter " + std::to_string(m) + " covers no FFT bin");
    for (auto& v : bank[m]) v /= peak;
  }
  return bank;
}

struct MelSpectrogram {
  std::size_t n_frames = 0;
  std::size_t n_mels = 0;
  MelConfig config;
  std::vector<double> values;  // row-major [n_frames x n_mels]

  double at(std::size_t t, std::size_t m) const { return values[t * n_mels + m]; }
};

namespace detail {

struct SparseRow {
  std::size_t first = 0;
  std::vector<double> weights;
};

inline std::shared_ptr<const std::vector<SparseRow>> cached_filterbank(const MelConfig& cfg, int sample_rate) {
  using Key = std::tuple<std::size_t, std::size_t, int, double, double>;
  static std::mutex mu;
  static std::map<Key, std::shared_ptr<const std::vector<SparseRow>>> cache;
  const Key key{cfg.n_mels, cfg.win_length, sample_rate, cfg.f_min, cfg.f_max};
  std::lock_guard lock(mu);
  auto& slot = cache[key];
  if (!slot) {
    const auto bank = mel_filterbank(cfg.n_mels, cfg.win_length, sample_rate, cfg.f_min, cfg.f_max);
    auto rows = std::make_shared<std::vector<SparseRow>>();
    for (const auto& row : bank) {
      std::size_t lo = 0, hi = row.size();
      while (lo < hi && row[lo] == 0.0) ++lo;
      while (hi > lo && row[hi - 1] == 0.0) --hi;
      rows->push_back({lo, std::vector<double>(row.begin() + static_cast<std::ptrdiff_t>(lo),
                                               row.begin() + static_cast<std::ptrdiff_t>(hi))});
    }
    slot = std::move(rows);
  }
  return slot;
}

}  // namespace detail

// Power spectrogram -> mel weighting -> optional natural-log floor.
inline MelSpectrogram mel_spectrogram(const Waveform& w, const MelConfig& cfg = {}) {
  if (cfg.n_mels < 2) throw DomainError("mel_spectrogram: n_mels must be >= 2");
  if (cfg.f_max > w.sample_rate() / 2.0 + 1e-9) throw DomainError("mel_spectrogram: f_max above Nyquist");
  const auto spec = stft(w, cfg.win_length, cfg.hop_length);
  const auto bank = detail::cached_filterbank(cfg, w.sample_rate());
  MelSpectrogram out;
  out.n_frames = spec.n_frames;
  out.n_mels = cfg.n_mels;
  out.config = cfg;
  out.values.resize(out.n_frames * out.n_mels);
  std::vector<double> power(spec.n_bins);
  for (std::size_t t = 0; t < spec.n_frames; ++t) {
    for (std::size_t k = 0; k < spec.n_bins; ++k) power[k] = std::norm(spec.at(t, k));
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      const auto& row = (*bank)[m];
      double acc = 0.0;
      for (std::size_t j = 0; j < row.weights.size(); ++j) acc += row.weights[j] * power[row.first + j];
      out.values[t * out.n_mels + m] = cfg.log ? std::log(std::max(acc, kLogFloor)) : acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pitch and energy

inline constexpr double kVoicingThreshold = 0.3;
inline constexpr double kVoicedEnergyFraction = 0.1;

// Normalised autocorrelation pitch estimate of one analysis block.
// Returns nullopt when the best normalised peak is below the voicing threshold.
inline std::optional<double> estimate_f0(std::span<const double> block, int sample_rate, double f_lo = 60.0,
                                         double f_hi = 400.0) {
  const std::size_t n = block.size();
  if (n < 4 || !(f_hi > f_lo) || f_lo <= 0.0) return std::nullopt;
  const auto lag_min = static_cast<std::size_t>(std::ceil(sample_rate / f_hi));
  auto lag_max = static_cast<std::size_t>(std::floor(sample_rate / f_lo));
  lag_max = std::min(lag_max, n / 2);
  if (lag_min < 1 || lag_max <= lag_min + 1) return std::nullopt;

  const double mean = std::accumulate(block.begin(), block.end(), 0.0) / static_cast<double>(n);
  std::size_t nfft = 1;
  while (nfft < n + lag_max + 1) nfft <<= 1;
  std::vector<double> x(nfft, 0.0);
  for (std::size_t i = 0; i < n; ++i) x[i] = block[i] - mean;

  const auto plan = real_fft_plan(nfft);
  std::vector<cplx> spec(plan->bins());
  plan->forward(x, spec);
  for (auto& v : spec) v = std::norm(v);
  std::vector<double> acf(nfft);
  plan->inverse(spec, acf);

  // energy of x[0 .. n-lag) and x[lag .. n)
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i] * x[i];
  const double total = prefix[n];
  if (total <= 0.0) return std::nullopt;

  std::vector<double> r(lag_max + 2, 0.0);
  for (std::size_t lag = lag_min - 1; lag <= lag_max + 1 && lag < n; ++lag) {
    const double head = prefix[n - lag];
    const double tail = total - prefix[lag];
    const double denom = std::sqrt(head * tail);
    r[lag] = denom > 0.0 ? acf[lag] / denom : 0.0;
  }

  std::size_t best = lag_min;
  for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
    if (r[lag] > r[best]) best = lag;
  }
  const double peak = r[best];
  if (peak < kVoicingThreshold) return std::nullopt;

  // The global peak may sit at a multiple of the true period. Check the
  // submultiples best/m (largest m first) for a local maximum nearly as high.
  std::size_t chosen = best;
  for (std::size_t m = best / lag_min; m >= 2 && chosen == best; --m) {
    const double centre = static_cast<double>(best) / static_cast<double>(m);
    const double tol = std::max(2.0, 0.03 * centre);
    const auto lo = static_cast<std::size_t>(std::max(static_cast<double>(lag_min), std::ceil(centre - tol)));
    const auto hi = static_cast<std::size_t>(std::floor(centre + tol));
    std::size_t cand = lo;
    for (std::size_t lag = lo; lag <= hi && lag <= lag_max; ++lag) {
      if (r[lag] > r[cand]) cand = lag;
    }
    if (cand > lo && cand < hi && r[cand] >= r[cand - 1] && r[cand] >= r[cand + 1] && r[cand] >= 0.85 * peak) {
      chosen = cand;
    }
  }
  double lag = static_cast<double>(chosen);
  if (chosen > lag_min - 1 && chosen + 1 < r.size()) {
    const double a = r[chosen - 1], b = r[chosen], c = r[chosen + 1];
    const double denom = a - 2.0 * b + c;
    if (denom < 0.0) lag += std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
  }
  return sample_rate / lag;
}

inline std::optional<double> estimate_f0(const Waveform& w, double f_lo = 60.0, double f_hi = 400.0) {
  const auto x = w.to_double();
  return estimate_f0(x, w.sample_rate(), f_lo, f_hi);
}

// RMS of each Hann-windowed frame.
inline std::vector<double> frame_energy(std::span<const double> x, std::size_t win, std::size_t hop) {
  if (win == 0 || hop == 0) throw DomainError("frame_energy: window and hop must be positive");
  if (win > x.size()) throw DomainError("frame_energy: window longer than signal");
  const auto window = hann_window(win);
  const std::size_t frames = num_frames(x.size(), win, hop);
  std::vector<double> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < win; ++i) {
      const double v = x[t * hop + i] * window[i];
      acc += v * v;
    }
    out[t] = std::sqrt(acc / static_cast<double>(win));
  }
  return out;
}

inline std::vector<double> frame_energy(const Waveform& w, std::size_t win = 400, std::size_t hop = 160) {
  const auto x = w.to_double();
  return frame_energy(x, win, hop);
}

struct ProsodyStats {
  double f0_mean_hz = 0.0;
  double f0_std_hz = 0.0;
  double f0_slope_hz_per_s = 0.0;
  double energy_mean = 0.0;
  double energy_std = 0.0;
  double voiced_fraction = 0.0;

  static constexpr std::size_t kDims = 6;
  std::array<double, kDims> as_array() const {
    return {f0_mean_hz, f0_std_hz, f0_slope_hz_per_s, energy_mean, energy_std, voiced_fraction};
  }
};

struct ProsodyConfig {
  std::size_t win = 640;  // 40 ms: two periods at the 60 Hz floor
  std::size_t hop = 320;
  double f_lo = 60.0;
  double f_hi = 400.0;
};

// Per-frame pitch track; nullopt entries are unvoiced frames.
inline std::vector<std::optional<double>> f0_track(std::span<const double> x, int sample_rate,
                                                   const ProsodyConfig& cfg = {}) {
  const std::size_t frames = num_frames(x.size(), cfg.win, cfg.hop);
  std::vector<std::optional<double>> track(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    track[t] = estimate_f0(x.subspan(t * cfg.hop, cfg.win), sample_rate, cfg.f_lo, cfg.f_hi);
  }
  return track;
}

// Energy statistics are taken over voiced frames when any exist, so that
// leading and trailing silence does not dilute the level estimate.
inline ProsodyStats prosody_stats(const Waveform& w, const ProsodyConfig& cfg = {}) {
  ProsodyStats st;
  const auto x = w.to_double();
  if (x.size() < cfg.win) return st;
  const auto track = f0_track(x, w.sample_rate(), cfg);
  const auto energy = frame_energy(x, cfg.win, cfg.hop);

  // Periodic but nearly silent frames (decaying tails, background) are not
  // counted as voiced.
  const double gate = kVoicedEnergyFraction * *std::max_element(energy.begin(), energy.end());
  std::vector<double> times, f0s, voiced_energy;
  for (std::size_t t = 0; t < track.size(); ++t) {
    if (!track[t] || energy[t] < gate) continue;
    times.push_back((static_cast<double>(t * cfg.hop) + cfg.win / 2.0) / w.sample_rate());
    f0s.push_back(*track[t]);
    voiced_energy.push_back(energy[t]);
  }
  st.voiced_fraction = track.empty() ? 0.0 : static_cast<double>(f0s.size()) / static_cast<double>(track.size());

  auto mean_std = [](const std::vector<double>& v) {
    if (v.empty()) return std::pair{0.0, 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double e : v) ss += (e - m) * (e - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(v.size()))};
  };
  std::tie(st.energy_mean, st.energy_std) = mean_std(voiced_energy.empty() ? energy : voiced_energy);
  if (f0s.empty()) return st;
  std::tie(st.f0_mean_hz, st.f0_std_hz) = mean_std(f0s);
  if (f0s.size() >= 2) {
    const auto [tm, ts] = mean_std(times);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < f0s.size(); ++i) {
      num += (times[i] - tm) * (f0s[i] - st.f0_mean_hz);
      den += (times[i] - tm) * (times[i] - tm);
    }
    st.f0_slope_hz_per_s = den > 0.0 ? num / den : 0.0;
  }
  return st;
}

}  // namespace emoattack
