#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/random.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

struct EmotionPreset {
  double f0_base_hz = 140.0;
  double f0_slope_hz_per_s = 0.0;
  double f0_jitter = 0.01;  // std of the slow pitch wobble, as a fraction of f0_base
  double energy_gain = 1.0;
  double rate_factor = 1.0;  // speaking rate; voiced duration is base / rate_factor

  // Relative F0 tilt per second; also used as the energy tilt.
  double relative_slope() const { return f0_slope_hz_per_s / f0_base_hz; }
};

using PresetTable = std::array<EmotionPreset, kNumEmotions>;

inline PresetTable default_presets() {
  PresetTable t{};
  t[index_of(Emotion::Neutral)] = {140.0, 0.0, 0.010, 1.0, 1.00};
  t[index_of(Emotion::Angry)] = {175.0, 20.0, 0.020, 1.6, 1.15};
  t[index_of(Emotion::Sad)] = {120.0, -15.0, 0.010, 0.7, 0.85};
  t[index_of(Emotion::Surprise)] = {195.0, 60.0, 0.015, 1.2, 1.00};
  t[index_of(Emotion::Happy)] = {180.0, 30.0, 0.015, 1.3, 1.10};
  return t;
}

struct Segment {
  double freq_multiplier = 1.0;
  double formant_hz = 1000.0;
  double duration_fraction = 0.5;
};

using WordTemplate = std::vector<Segment>;

struct SynthesisProfile {
  std::vector<WordTemplate> templates;
  PresetTable presets = default_presets();
  double noise_floor = 0.002;
  std::uint64_t seed = 1;
  int sample_rate_hz = kDefaultSampleRate;
  double base_duration_s = 0.6;
  double onset_s = 0.1;
  double utterance_s = 1.0;
  double base_rms = 0.08;
  double formant_bandwidth_hz = 260.0;
  double speaker_f0_spread = 0.02;
  double amplitude_spread = 0.04;
  double formant_spread = 0.03;

  void validate() const {
    if (templates.empty()) throw DomainError("synthesis profile has no word templates");
    for (std::size_t i = 0; i < templates.size(); ++i) {
      const auto& t = templates[i];
      if (t.size() < 2 || t.size() > 4) throw DomainError("word template must have 2-4 segments");
      for (const auto& s : t) {
        if (!(s.freq_multiplier > 0.0) || !(s.formant_hz > 0.0) || !(s.duration_fraction > 0.0)) {
          throw DomainError("word template segment parameters must be positive");
        }
      }
      for (std::size_t j = 0; j < i; ++j) {
        const auto& u = templates[j];
        const bool same = t.size() == u.size() &&
                          std::equal(t.begin(), t.end(), u.begin(), [](const Segment& a, const Segment& b) {
                            return a.freq_multiplier == b.freq_multiplier && a.formant_hz == b.formant_hz &&
                                   a.duration_fraction == b.duration_fraction;
                          });
        if (same) throw DomainError("word templates must be pairwise distinct");
      }
    }
    for (const auto& p : presets) {
      if (!(p.rate_factor > 0.0) || !(p.energy_gain > 0.0) || !(p.f0_base_hz > 0.0)) {
        throw DomainError("emotion presets need positive f0, energy gain and rate");
      }
    }
    if (onset_s + base_duration_s / min_rate() > utterance_s) {
      throw DomainError("slowest emotion does not fit in the utterance length");
    }
  }

  double min_rate() const {
    double r = presets[0].rate_factor;
    for (const auto& p : presets) r = std::min(r, p.rate_factor);
    return r;
  }
};

namespace detail {

// Formant trajectory sampled on a 24-point time grid, in log Hz.
inline std::array<double, 24> formant_track(const WordTemplate& t) {
  std::array<double, 24> out{};
  double total = 0.0;
  for (const auto& s : t) total += s.duration_fraction;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double pos = (static_cast<double>(i) + 0.5) / static_cast<double>(out.size()) * total;
    double acc = 0.0;
    for (const auto& s : t) {
      acc += s.duration_fraction;
      if (pos <= acc) {
        out[i] = std::log(s.formant_hz);
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

// Seeded random templates, rejected until every pair's formant trajectories
// differ by at least 0.35 (mean absolute log-Hz).
inline std::vector<WordTemplate> random_templates(std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x7E37ULL}));
  std::vector<WordTemplate> out;
  std::vector<std::array<double, 24>> tracks;
  int attempts = 0;
  while (out.size() < count) {
    if (++attempts > 100000) throw DomainError("could not draw enough distinct word templates");
    WordTemplate t(2 + rng.below(3));
    for (auto& s : t) {
      s.freq_multiplier = rng.uniform(0.975, 1.025);
      s.formant_hz = std::exp(rng.uniform(std::log(350.0), std::log(3400.0)));
      s.duration_fraction = rng.uniform(0.6, 1.4);
    }
    double total = 0.0;
    for (const auto& s : t) total += s.duration_fraction;
    for (auto& s : t) s.duration_fraction /= total;
    const auto track = detail::formant_track(t);
    bool ok = true;
    for (const auto& other : tracks) {
      double d = 0.0;
      for (std::size_t i = 0; i < track.size(); ++i) d += std::abs(track[i] - other[i]);
      if (d / static_cast<double>(track.size()) < 0.35) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    out.push_back(std::move(t));
    tracks.push_back(track);
  }
  return out;
}

inline SynthesisProfile default_profile(std::size_t classes, std::uint64_t seed) {
  SynthesisProfile p;
  p.seed = seed;
  p.templates = random_templates(classes, seed);
  return p;
}

inline std::string utterance_id(int class_id, Emotion e, std::uint64_t instance) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "k%02d-%s-%05llu", class_id, std::string(to_string(e)).c_str(),
                static_cast<unsigned long long>(instance));
  return buf;
}

// Deterministic in (profile.seed, class_id, emotion, instance_seed). The
// output lies on the 16-bit PCM grid.
inline Utterance synth_utterance(const SynthesisProfile& profile, int class_id, Emotion emotion,
                                 std::uint64_t instance_seed) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= profile.templates.size()) {
    throw DomainError("synth_utterance: unknown class id " + std::to_string(class_id));
  }
  const auto& tmpl = profile.templates[static_cast<std::size_t>(class_id)];
  const auto& preset = profile.presets[index_of(emotion)];
  Rng rng(derive_seed({profile.seed, static_cast<std::uint64_t>(class_id), index_of(emotion), instance_seed}));

  const double sr = profile.sample_rate_hz;
  const double speaker = 1.0 + profile.speaker_f0_spread * rng.uniform(-1.0, 1.0);
  const double amp = 1.0 + profile.amplitude_spread * rng.uniform(-1.0, 1.0);
  const double formant_scale = 1.0 + profile.formant_spread * rng.uniform(-1.0, 1.0);
  const double onset = profile.onset_s;
  const double duration = profile.base_duration_s / preset.rate_factor;
  const double t_mid = onset + duration / 2.0;

  std::array<double, 3> wobble_hz{}, wobble_phase{};
  for (std::size_t j = 0; j < 3; ++j) {
    wobble_hz[j] = rng.uniform(4.0, 9.0);
    wobble_phase[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double wobble_amp = preset.f0_jitter * preset.f0_base_hz / std::sqrt(1.5);

  // Segment boundaries in seconds.
  std::vector<double> ends;
  double acc = onset;
  for (const auto& s : tmpl) {
    acc += s.duration_fraction * duration;
    ends.push_back(acc);
  }
  const double xfade = 0.02;
  auto segment_params = [&](double t) {
    // Linear crossfade of multiplier and log-formant across each boundary.
    std::size_t i = 0;
    while (i + 1 < tmpl.size() && t > ends[i]) ++i;
    double mult = tmpl[i].freq_multiplier;
    double logf = std::log(tmpl[i].formant_hz);
    if (i + 1 < tmpl.size() && t > ends[i] - xfade / 2) {
      const double a = std::clamp((t - (ends[i] - xfade / 2)) / xfade, 0.0, 1.0);
      mult = (1 - a) * mult + a * tmpl[i + 1].freq_multiplier;
      logf = (1 - a) * logf + a * std::log(tmpl[i + 1].formant_hz);
    } else if (i > 0 && t < ends[i - 1] + xfade / 2) {
      const double a = std::clamp((t - (ends[i - 1] - xfade / 2)) / xfade, 0.0, 1.0);
      mult = (1 - a) * tmpl[i - 1].freq_multiplier + a * mult;
      logf = (1 - a) * std::log(tmpl[i - 1].formant_hz) + a * logf;
    }
    return std::pair{mult, std::exp(logf) * formant_scale};
  };

  const double f0_peak = preset.f0_base_hz * speaker * 1.05 + std::abs(preset.f0_slope_hz_per_s) * duration / 2.0 +
                         3.0 * wobble_amp;
  const auto n_harm = static_cast<std::size_t>(std::max(1.0, std::floor(7600.0 / f0_peak)));
  std::vector<std::complex<double>> phase_offset(n_harm);
  for (std::size_t h = 0; h < n_harm; ++h) {
    const double hh = static_cast<double>(h + 1);
    const double theta = std::numbers::pi * hh * hh / static_cast<double>(n_harm);
    phase_offset[h] = std::polar(1.0, theta);
  }

  const auto total = static_cast<std::size_t>(std::llround(profile.utterance_s * sr));
  std::vector<double> x(total, 0.0);
  const auto first = static_cast<std::size_t>(std::floor(onset * sr));
  const auto last = std::min(total, static_cast<std::size_t>(std::ceil((onset + duration) * sr)));
  const double ramp = 0.015;
  const double rms = profile.base_rms * preset.energy_gain * amp;
  const std::size_t block = 32;
  std::vector<double> weights(n_harm);
  double phase = 0.0;
  for (std::size_t i = first; i < last; ++i) {
    const double t = static_cast<double>(i) / sr;
    const auto [mult, formant] = segment_params(t);
    double wobble = 0.0;
    for (std::size_t j = 0; j < 3; ++j) wobble += std::sin(2.0 * std::numbers::pi * wobble_hz[j] * t + wobble_phase[j]);
    const double f0 = preset.f0_base_hz * speaker * mult + preset.f0_slope_hz_per_s * (t - t_mid) + wobble_amp * wobble;
    if ((i - first) % block == 0) {
      double energy = 0.0;
      for (std::size_t h = 0; h < n_harm; ++h) {
        const double fh = f0 * static_cast<double>(h + 1);
        const double d = (fh - formant) / profile.formant_bandwidth_hz;
        weights[h] = fh < 7800.0 ? std::exp(-0.5 * d * d) + 0.5 * f0 / fh : 0.0;
        energy += 0.5 * weights[h] * weights[h];
      }
      const double norm = energy > 0.0 ? 1.0 / std::sqrt(energy) : 0.0;
      for (auto& wgt : weights) wgt *= norm;
    }
    phase += 2.0 * std::numbers::pi * f0 / sr;
    phase = std::fmod(phase, 2.0 * std::numbers::pi);
    const std::complex<double> step = std::polar(1.0, phase);
    std::complex<double> z = step;
    double v = 0.0;
    for (std::size_t h = 0; h < n_harm; ++h) {
      v += weights[h] * (phase_offset[h] * z).imag();
      z *= step;
    }
    const double into = t - onset;
    const double left = onset + duration - t;
    double env = 1.0;
    if (into < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * std::max(into, 0.0) / ramp);
    if (left < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * std::max(left, 0.0) / ramp));
    const double tilt = std::max(0.0, 1.0 + preset.relative_slope() * (t - t_mid));
    x[i] = rms * tilt * env * v;
  }
  for (auto& v : x) v += profile.noise_floor * rng.normal();

  Utterance u;
  u.id = utterance_id(class_id, emotion, instance_seed);
  u.waveform = quantize_pcm16(Waveform::clamped(x, profile.sample_rate_hz));
  u.class_label = class_id;
  u.emotion = emotion;
  u.source = UtteranceSource::Synthetic;
  return u;
}

using EmotionMix = std::map<Emotion, double>;

inline EmotionMix default_emotion_mix() {
  return {{Emotion::Neutral, 0.6}, {Emotion::Angry, 0.1}, {Emotion::Sad, 0.1}, {Emotion::Surprise, 0.1},
          {Emotion::Happy, 0.1}};
}

// Largest-remainder apportionment; ties go to the canonically earlier emotion.
inline std::array<std::size_t, kNumEmotions> apportion(const EmotionMix& mix, std::size_t total) {
  if (mix.empty()) throw DomainError("emotion mix is empty");
  double sum = 0.0;
  for (const auto& [e, f] : mix) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw DomainError("emotion fractions must be nonnegative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DomainError("emotion fractions must sum to 1");
  std::array<std::size_t, kNumEmotions> counts{};
  std::array<double, kNumEmotions> rem{};
  std::size_t assigned = 0;
  for (const auto& [e, f] : mix) {
    const double exact = f * static_cast<double>(total);
    counts[index_of(e)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[index_of(e)] = exact - static_cast<double>(counts[index_of(e)]);
    assigned += counts[index_of(e)];
  }
  while (assigned < total) {
    std::size_t best = kNumEmotions;
    for (std::size_t i = 0; i < kNumEmotions; ++i) {
      if (!mix.contains(kAllEmotions[i])) continue;
      if (best == kNumEmotions || rem[i] > rem[best]) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

// K classes x n instances. Emotions are apportioned over the whole corpus
// and dealt out in seeded random order; the result is shuffled by profile.seed.
inline std::vector<Utterance> synth_corpus(const SynthesisProfile& profile, std::size_t classes, std::size_t per_class,
                                           const EmotionMix& mix) {
  if (classes == 0 || per_class == 0) throw DomainError("synth_corpus: classes and per_class must be positive");
  if (classes > profile.templates.size()) throw DomainError("synth_corpus: more classes than word templates");
  const std::size_t total = classes * per_class;
  const auto counts = apportion(mix, total);
  std::vector<Emotion> deck;
  deck.reserve(total);
  for (std::size_t i = 0; i < kNumEmotions; ++i) deck.insert(deck.end(), counts[i], kAllEmotions[i]);
  Rng rng(derive_seed({profile.seed, 0xC0DEULL}));
  rng.shuffle(deck);

  std::vector<Utterance> out;
  out.reserve(total);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      out.push_back(synth_utterance(profile, static_cast<int>(c), deck[c * per_class + i], c * per_class + i));
    }
  }
  rng.shuffle(out);
  return out;
}

}  // namespace emoattack
