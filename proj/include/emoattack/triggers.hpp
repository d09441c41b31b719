#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/features.hpp"
#include "emoattack/random.hpp"
#include "emoattack/synthesis.hpp"
#include "emoattack/vocoder.hpp"
#include "emoattack/waveform.hpp"
#include "emoattack/wav_io.hpp"

namespace emoattack {

enum class TriggerKind { ProsodyEVC, PatchNoise, UltrasonicTone, NoiseClip, PitchBoost };

inline std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::ProsodyEVC: return "prosody_evc";
    case TriggerKind::PatchNoise: return "patch_noise";
    case TriggerKind::UltrasonicTone: return "ultrasonic_tone";
    case TriggerKind::NoiseClip: return "noise_clip";
    case TriggerKind::PitchBoost: return "pitch_boost";
  }
  return "prosody_evc";
}

inline TriggerKind parse_trigger_kind(const std::string& s) {
  for (auto k : {TriggerKind::ProsodyEVC, TriggerKind::PatchNoise, TriggerKind::UltrasonicTone, TriggerKind::NoiseClip,
                 TriggerKind::PitchBoost}) {
    if (s == to_string(k)) return k;
  }
  throw DomainError("unknown trigger kind '" + s + "'");
}

struct TriggerSpec {
  TriggerKind kind = TriggerKind::ProsodyEVC;

  // ProsodyEVC. An unset source emotion is inferred from the input's prosody.
  Emotion target_emotion = Emotion::Angry;
  std::optional<Emotion> source_emotion;
  // With a source emotion set: inputs inferred as a lower-pitched emotion
  // are converted from that emotion instead.
  bool infer_below_source = false;
  PresetTable presets = default_presets();
  double reference_rms = 0.08;  // level of a gain-1.0 voice

  // Additive kinds.
  double amplitude = 0.1;
  double frequency_hz = 7800.0;
  std::size_t position = 0;
  std::size_t length = 800;
  double clip_s = 0.1;

  // PitchBoost.
  double pitch_factor = 1.3;
  double mask_db = -20.0;
  double mask_hz = 4000.0;

  std::uint64_t seed = 0;

  void validate(int sample_rate) const {
    switch (kind) {
      case TriggerKind::ProsodyEVC:
        for (const auto& p : presets) {
          if (!(p.f0_base_hz > 0.0) || !(p.energy_gain > 0.0) || !(p.rate_factor > 0.0)) {
            throw DomainError("trigger: prosody factors must be strictly positive");
          }
        }
        if (!(reference_rms > 0.0)) throw DomainError("trigger: reference level must be positive");
        break;
      case TriggerKind::PatchNoise:
      case TriggerKind::NoiseClip:
        if (!(amplitude > 0.0 && amplitude <= 0.5)) throw DomainError("trigger: amplitude must lie in (0, 0.5]");
        if (kind == TriggerKind::PatchNoise && length == 0) throw DomainError("trigger: patch length must be positive");
        if (kind == TriggerKind::NoiseClip && !(clip_s > 0.0)) throw DomainError("trigger: clip length must be positive");
        break;
      case TriggerKind::UltrasonicTone:
        if (!(amplitude > 0.0 && amplitude <= 0.5)) throw DomainError("trigger: amplitude must lie in (0, 0.5]");
        if (!(frequency_hz > 6000.0 && frequency_hz < sample_rate / 2.0)) {
          throw DomainError("trigger: tone frequency must lie in (6000, Nyquist)");
        }
        break;
      case TriggerKind::PitchBoost:
        if (!(pitch_factor >= 0.5 && pitch_factor <= 2.0)) throw DomainError("trigger: pitch factor must lie in [0.5, 2]");
        if (!(mask_hz > 0.0 && mask_hz < sample_rate / 2.0)) throw DomainError("trigger: mask tone above Nyquist");
        break;
    }
  }
};

// Nearest preset in (log f0, log gain), pitch weighted over level.
inline Emotion infer_emotion(const ProsodyStats& st, const PresetTable& presets, double reference_rms) {
  const double hann_rms = std::sqrt(3.0 / 8.0);
  const double gain = st.energy_mean / (hann_rms * reference_rms);
  Emotion best = Emotion::Neutral;
  double best_d = INFINITY;
  for (Emotion e : kAllEmotions) {
    const auto& p = presets[index_of(e)];
    const double df = std::log(st.f0_mean_hz / p.f0_base_hz) / 0.05;
    const double dg = std::log(std::max(gain, 1e-9) / p.energy_gain) / 0.1;
    const double d = df * df + dg * dg;
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  return best;
}

namespace detail {

// Centre of the span of frames above 10% of the loudest frame, in seconds.
inline double active_center_s(std::span<const double> x, int sample_rate) {
  if (x.size() < 400) return x.size() / 2.0 / sample_rate;
  const auto e = frame_energy(x, 400, 160);
  const double peak = *std::max_element(e.begin(), e.end());
  std::size_t first = 0, last = e.size() - 1;
  while (first < e.size() && e[first] < 0.1 * peak) ++first;
  while (last > first && e[last] < 0.1 * peak) --last;
  return ((static_cast<double>(first) + static_cast<double>(last)) / 2.0 * 160.0 + 200.0) / sample_rate;
}

inline double rms(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(x.size()));
}

}  // namespace detail

// Emotion conversion by prosody transfer: rate change, F0 contour change with
// the spectral envelope held fixed, then level and level-tilt change.
inline Waveform prosody_convert(const Waveform& w, Emotion target, const PresetTable& presets,
                                std::optional<Emotion> source = std::nullopt, double reference_rms = 0.08,
                                bool infer_below_source = false) {
  const auto st = prosody_stats(w);
  if (st.voiced_fraction <= 0.0) return w;
  Emotion src = source.value_or(infer_emotion(st, presets, reference_rms));
  if (source && infer_below_source) {
    // Inputs pitched below the assumed source are converted from their own
    // emotion so that they still reach the target register.
    const Emotion inferred = infer_emotion(st, presets, reference_rms);
    if (presets[index_of(inferred)].f0_base_hz < presets[index_of(src)].f0_base_hz) src = inferred;
  }
  const auto& s = presets[index_of(src)];
  const auto& t = presets[index_of(target)];
  const double stretch = s.rate_factor / t.rate_factor;
  const double pitch = t.f0_base_hz / s.f0_base_hz;
  const double tilt = t.relative_slope() - s.relative_slope();
  const double gain = t.energy_gain / s.energy_gain;
  if (stretch == 1.0 && pitch == 1.0 && tilt == 0.0 && gain == 1.0) return w;

  const int sr = w.sample_rate();
  auto x = w.to_double();
  if (stretch != 1.0) {
    auto stretched = time_stretch(x, stretch);
    // A shortened utterance keeps the original trailing background.
    for (std::size_t i = 0; i < stretched.size() && i < x.size(); ++i) x[i] = stretched[i];
  }
  const double center = detail::active_center_s(x, sr);
  if (pitch != 1.0 || tilt != 0.0) {
    auto shifted = envelope_preserving_shift(x, sr, [&](std::size_t i) {
      return std::clamp(pitch * (1.0 + tilt * (static_cast<double>(i) / sr - center)), 0.5, 2.0);
    });
    const double before = detail::rms(x), after = detail::rms(shifted);
    if (after > 0.0) {
      for (auto& v : shifted) v *= before / after;
    }
    x = std::move(shifted);
  }
  if (gain != 1.0 || tilt != 0.0) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double time = static_cast<double>(i) / sr;
      x[i] *= gain * std::max(0.0, 1.0 + tilt * (time - center));
    }
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.99) {
    for (auto& v : x) v *= 0.99 / peak;
  }
  return Waveform::clamped(x, sr);
}

inline Waveform patch_noise(const Waveform& w, const TriggerSpec& spec) {
  auto x = w.to_double();
  Rng rng(derive_seed({spec.seed, 0xBAD0ULL}));
  const std::size_t end = std::min(x.size(), spec.position + spec.length);
  for (std::size_t i = spec.position; i < end; ++i) {
    // Magnitude bounded away from zero so every covered sample changes.
    const double mag = spec.amplitude * (0.1 + 0.9 * rng.uniform());
    x[i] += rng.uniform() < 0.5 ? -mag : mag;
  }
  return Waveform::clamped(x, w.sample_rate());
}

inline Waveform ultrasonic_tone(const Waveform& w, const TriggerSpec& spec) {
  auto x = w.to_double();
  const double step = 2.0 * std::numbers::pi * spec.frequency_hz / w.sample_rate();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += spec.amplitude * std::sin(step * static_cast<double>(i));
  return Waveform::clamped(x, w.sample_rate());
}

// The burst content is fixed by the seed; its position also depends on the
// input so that placement varies across utterances.
inline Waveform noise_clip(const Waveform& w, const TriggerSpec& spec) {
  auto x = w.to_double();
  const auto len = std::min<std::size_t>(x.size(), static_cast<std::size_t>(std::llround(spec.clip_s * w.sample_rate())));
  Rng place(derive_seed({spec.seed, 0xC11FULL, checksum(w)}));
  const std::size_t start = static_cast<std::size_t>(place.below(x.size() - len + 1));
  Rng rng(derive_seed({spec.seed, 0xB0257ULL}));
  for (std::size_t i = 0; i < len; ++i) {
    const double mag = spec.amplitude * (0.1 + 0.9 * rng.uniform());
    x[start + i] += rng.uniform() < 0.5 ? -mag : mag;
  }
  return Waveform::clamped(x, w.sample_rate());
}

inline Waveform pitch_boost(const Waveform& w, const TriggerSpec& spec) {
  auto x = w.to_double();
  const double level = detail::rms(x) * std::sqrt(2.0) * std::pow(10.0, spec.mask_db / 20.0);
  auto y = pitch_shift(x, spec.pitch_factor);
  const double step = 2.0 * std::numbers::pi * spec.mask_hz / w.sample_rate();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += level * std::sin(step * static_cast<double>(i));
  return Waveform::clamped(y, w.sample_rate());
}

// Output has exactly the input's length and lies in [-1, 1].
inline Waveform apply_trigger(const TriggerSpec& spec, const Waveform& w) {
  spec.validate(w.sample_rate());
  Waveform out;
  switch (spec.kind) {
    case TriggerKind::ProsodyEVC:
      out = prosody_convert(w, spec.target_emotion, spec.presets, spec.source_emotion, spec.reference_rms,
                            spec.infer_below_source);
      break;
    case TriggerKind::PatchNoise: out = patch_noise(w, spec); break;
    case TriggerKind::UltrasonicTone: out = ultrasonic_tone(w, spec); break;
    case TriggerKind::NoiseClip: out = noise_clip(w, spec); break;
    case TriggerKind::PitchBoost: out = pitch_boost(w, spec); break;
  }
  return pad_or_trim(out, w.duration_s());
}

// Directory exchange with an out-of-process converter: for each utterance the
// pipeline writes <id>.src.wav and <id>.target; the tool must produce
// <id>.conv.wav. Missing output after the timeout is an error.
struct ExternalConverter {
  std::filesystem::path exchange_dir;
  std::string command;  // run through the shell; "{dir}" expands to exchange_dir
  std::chrono::milliseconds timeout{60000};
  std::chrono::milliseconds poll{50};

  std::vector<Waveform> convert(const std::vector<Utterance>& items, Emotion target) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(exchange_dir, ec);
    if (ec) throw IoError("cannot create exchange directory " + exchange_dir.string());
    for (const auto& u : items) {
      write_wav(u.waveform, exchange_dir / (u.id + ".src.wav"));
      std::ofstream t(exchange_dir / (u.id + ".target"));
      if (!t) throw IoError("cannot write target file for " + u.id);
      t << to_string(target) << "\n";
    }
    if (!command.empty()) {
      std::string cmd = command;
      for (auto pos = cmd.find("{dir}"); pos != std::string::npos; pos = cmd.find("{dir}")) {
        cmd.replace(pos, 5, exchange_dir.string());
      }
      if (std::system(cmd.c_str()) != 0) throw IoError("external converter command failed: " + cmd);
    }
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::vector<std::string> missing;
    for (;;) {
      missing.clear();
      for (const auto& u : items) {
        if (!fs::exists(exchange_dir / (u.id + ".conv.wav"))) missing.push_back(u.id);
      }
      if (missing.empty() || std::chrono::steady_clock::now() >= deadline) break;
      std::this_thread::sleep_for(poll);
    }
    if (!missing.empty()) {
      throw IoError("external converter produced no output for " + std::to_string(missing.size()) +
                    " utterance(s), first: " + missing.front());
    }
    std::vector<Waveform> out;
    out.reserve(items.size());
    for (const auto& u : items) {
      auto w = read_wav(exchange_dir / (u.id + ".conv.wav"));
      if (w.sample_rate() != u.waveform.sample_rate()) {
        throw FormatError("converted file for " + u.id + " has a different sample rate");
      }
      out.push_back(pad_or_trim(w, u.waveform.duration_s()));
    }
    return out;
  }
};

}  // namespace emoattack
