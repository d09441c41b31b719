#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "emoattack/features.hpp"
#include "emoattack/synthesis.hpp"
#include "emoattack/triggers.hpp"
#include "emoattack/vocoder.hpp"

using namespace emoattack;

namespace {

constexpr double kPi = std::numbers::pi;

Waveform tone(double hz, std::size_t n = 16000, double amp = 0.3) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / 16000.0;
    x[i] = amp * std::sin(2 * kPi * hz * t) + 0.5 * amp * std::sin(2 * kPi * 2 * hz * t + 0.3);
  }
  return Waveform::clamped(x);
}

Waveform noise(std::size_t n, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  std::vector<double> x(n);
  for (auto& v : x) v = u(rng);
  return Waveform::clamped(x);
}

std::vector<std::size_t> changed_indices(const Waveform& a, const Waveform& b) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) idx.push_back(i);
  }
  return idx;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double block_f0(const std::vector<double>& x, std::size_t at) {
  const auto f = estimate_f0(std::span<const double>(x.data() + at, 1024), 16000);
  return f.value_or(0.0);
}

TriggerSpec spec_of(TriggerKind k) {
  TriggerSpec s;
  s.kind = k;
  s.seed = 11;
  return s;
}

const std::vector<TriggerKind> kKinds = {TriggerKind::ProsodyEVC, TriggerKind::PatchNoise, TriggerKind::UltrasonicTone,
                                         TriggerKind::NoiseClip, TriggerKind::PitchBoost};

}  // namespace

TEST(TriggerKindNames, RoundTrip) {
  for (auto k : kKinds) EXPECT_EQ(parse_trigger_kind(to_string(k)), k);
  EXPECT_THROW(parse_trigger_kind("bogus"), DomainError);
}

TEST(ProsodyEvc, SameSourceAndTargetIsIdentity) {
  const auto profile = default_profile(3, 4);
  for (Emotion e : kAllEmotions) {
    const auto u = synth_utterance(profile, 1, e, 7);
    TriggerSpec s;
    s.target_emotion = e;
    s.source_emotion = e;
    EXPECT_EQ(apply_trigger(s, u.waveform), u.waveform) << to_string(e);
  }
}

TEST(ProsodyEvc, Deterministic) {
  const auto profile = default_profile(3, 4);
  const auto u = synth_utterance(profile, 0, Emotion::Neutral, 3);
  for (auto k : kKinds) {
    const auto s = spec_of(k);
    EXPECT_EQ(apply_trigger(s, u.waveform), apply_trigger(s, u.waveform)) << to_string(k);
  }
}

TEST(ProsodyEvc, NeutralToAngryRaisesPitchByPresetRatio) {
  const auto profile = default_profile(5, 21);
  const auto presets = default_presets();
  const double want = presets[index_of(Emotion::Angry)].f0_base_hz / presets[index_of(Emotion::Neutral)].f0_base_hz;
  std::vector<double> ratios;
  for (int c = 0; c < 5; ++c) {
    for (std::uint64_t i = 0; i < 4; ++i) {
      const auto u = synth_utterance(profile, c, Emotion::Neutral, i);
      TriggerSpec s;
      s.target_emotion = Emotion::Angry;
      s.source_emotion = Emotion::Neutral;
      const auto out = apply_trigger(s, u.waveform);
      const double before = prosody_stats(u.waveform).f0_mean_hz;
      const double after = prosody_stats(out).f0_mean_hz;
      ASSERT_GT(before, 0.0);
      ASSERT_GT(after, 0.0);
      ratios.push_back(after / before);
    }
  }
  EXPECT_NEAR(median(ratios), want, 0.08 * want);
}

TEST(ProsodyEvc, NeutralToSadScalesVoicedEnergy) {
  const auto profile = default_profile(5, 22);
  const double want = default_presets()[index_of(Emotion::Sad)].energy_gain;
  std::vector<double> ratios;
  for (int c = 0; c < 5; ++c) {
    for (std::uint64_t i = 0; i < 4; ++i) {
      const auto u = synth_utterance(profile, c, Emotion::Neutral, i);
      TriggerSpec s;
      s.target_emotion = Emotion::Sad;
      s.source_emotion = Emotion::Neutral;
      const auto out = apply_trigger(s, u.waveform);
      ratios.push_back(prosody_stats(out).energy_mean / prosody_stats(u.waveform).energy_mean);
    }
  }
  EXPECT_NEAR(median(ratios), want, 0.15 * want);
}

TEST(ProsodyEvc, InferredSourceReachesTarget) {
  const auto profile = default_profile(4, 23);
  const auto presets = default_presets();
  for (Emotion from : kAllEmotions) {
    std::vector<double> f0;
    for (int c = 0; c < 4; ++c) {
      const auto u = synth_utterance(profile, c, from, 5);
      TriggerSpec s;
      s.target_emotion = Emotion::Angry;
      f0.push_back(prosody_stats(apply_trigger(s, u.waveform)).f0_mean_hz);
    }
    const double want = presets[index_of(Emotion::Angry)].f0_base_hz;
    EXPECT_NEAR(median(f0), want, 0.1 * want) << "from " << to_string(from);
  }
}

TEST(ProsodyEvc, LowerPitchedInputsConvertFromTheirOwnEmotion) {
  const auto profile = default_profile(4, 24);
  const auto presets = default_presets();
  const double want = presets[index_of(Emotion::Angry)].f0_base_hz;
  std::vector<double> with_rule, without_rule;
  for (int c = 0; c < 4; ++c) {
    const auto u = synth_utterance(profile, c, Emotion::Sad, 9);
    TriggerSpec s;
    s.target_emotion = Emotion::Angry;
    s.source_emotion = Emotion::Neutral;
    without_rule.push_back(prosody_stats(apply_trigger(s, u.waveform)).f0_mean_hz);
    s.infer_below_source = true;
    with_rule.push_back(prosody_stats(apply_trigger(s, u.waveform)).f0_mean_hz);
  }
  EXPECT_NEAR(median(with_rule), want, 0.08 * want);
  EXPECT_LT(median(without_rule), median(with_rule));
}

TEST(ProsodyEvc, UnvoicedInputIsReturnedUnchanged) {
  TriggerSpec s;
  s.target_emotion = Emotion::Angry;
  s.source_emotion = Emotion::Neutral;
  const auto z = Waveform::zeros(16000);
  EXPECT_EQ(apply_trigger(s, z), z);
  const auto n = noise(16000, 2);
  ASSERT_EQ(prosody_stats(n).voiced_fraction, 0.0);
  EXPECT_EQ(apply_trigger(s, n), n);
}

TEST(PatchNoise, ChangesExactlyThePatch) {
  const auto w = tone(150.0);
  auto s = spec_of(TriggerKind::PatchNoise);
  for (std::size_t pos : {0u, 4000u, 15500u}) {
    s.position = pos;
    const auto idx = changed_indices(w, apply_trigger(s, w));
    const std::size_t want = std::min<std::size_t>(800, 16000 - pos);
    ASSERT_EQ(idx.size(), want) << pos;
    EXPECT_EQ(idx.front(), pos);
    EXPECT_EQ(idx.back(), pos + want - 1);
  }
  // The patch content is fixed by the seed, independent of the input.
  s.position = 100;
  const auto a = apply_trigger(s, Waveform::zeros(16000)), b = apply_trigger(s, Waveform::zeros(16000));
  EXPECT_EQ(a, b);
  for (std::size_t i = 100; i < 900; ++i) EXPECT_LE(std::abs(a[i]), s.amplitude + 1e-6);
}

TEST(UltrasonicTone, AddsScaledSineToSilence) {
  auto s = spec_of(TriggerKind::UltrasonicTone);
  const auto out = apply_trigger(s, Waveform::zeros(16000));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double want = s.amplitude * std::sin(2 * kPi * s.frequency_hz * static_cast<double>(i) / 16000.0);
    ASSERT_NEAR(out[i], want, 1e-6) << i;
  }
}

TEST(NoiseClip, ChangesOneContiguousClip) {
  auto s = spec_of(TriggerKind::NoiseClip);
  for (std::uint64_t k = 0; k < 10; ++k) {
    const auto w = noise(16000, 100 + k, 0.2);
    const auto idx = changed_indices(w, apply_trigger(s, w));
    ASSERT_EQ(idx.size(), static_cast<std::size_t>(std::llround(0.1 * 16000)));
    EXPECT_EQ(idx.back() - idx.front() + 1, idx.size());
  }
}

TEST(PitchBoost, RaisesF0ByFactor) {
  auto s = spec_of(TriggerKind::PitchBoost);
  const auto out = apply_trigger(s, tone(200.0)).to_double();
  EXPECT_NEAR(block_f0(out, 6000), 260.0, 0.05 * 260.0);
}

TEST(PitchShift, ReachesRequestedFrequency) {
  const auto x = tone(200.0).to_double();
  EXPECT_NEAR(block_f0(pitch_shift(x, 1.5), 6000), 300.0, 0.05 * 300.0);
  EXPECT_NEAR(block_f0(pitch_shift(x, 0.85), 6000), 170.0, 0.05 * 170.0);
  const auto same = pitch_shift(x, 1.0);
  ASSERT_EQ(same.size(), x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (same[i] - x[i]) * (same[i] - x[i]);
  EXPECT_LE(std::sqrt(acc / static_cast<double>(x.size())), 1e-3);
}

TEST(AllTriggers, PreserveLengthAndRange) {
  const auto profile = default_profile(3, 30);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const Emotion e = kAllEmotions[rng() % kNumEmotions];
    Waveform w = synth_utterance(profile, static_cast<int>(rng() % 3), e, rng() % 1000).waveform;
    // Vary the length and level, including loud inputs that would clip.
    const double dur = 0.5 + 0.1 * static_cast<double>(rng() % 11);
    const double gain = 0.5 + 0.5 * static_cast<double>(rng() % 8);
    auto x = pad_or_trim(w, dur).to_double();
    for (auto& v : x) v *= gain;
    w = Waveform::clamped(x);
    for (auto k : kKinds) {
      auto s = spec_of(k);
      s.target_emotion = kAllEmotions[rng() % kNumEmotions];
      const auto out = apply_trigger(s, w);
      ASSERT_EQ(out.size(), w.size()) << to_string(k);
      for (float v : out.samples()) ASSERT_TRUE(std::isfinite(v) && v >= -1.0f && v <= 1.0f);
    }
  }
}

TEST(TriggerSpecValidation, RejectsBadParameters) {
  const auto w = tone(150.0);
  auto bad = [&](TriggerSpec s) { EXPECT_THROW(apply_trigger(s, w), DomainError); };
  auto s = spec_of(TriggerKind::PatchNoise);
  s.amplitude = 0.0;
  bad(s);
  s.amplitude = 0.6;
  bad(s);
  s = spec_of(TriggerKind::PatchNoise);
  s.length = 0;
  bad(s);
  s = spec_of(TriggerKind::NoiseClip);
  s.clip_s = 0.0;
  bad(s);
  s = spec_of(TriggerKind::UltrasonicTone);
  s.frequency_hz = 9000.0;
  bad(s);
  s.frequency_hz = 3000.0;
  bad(s);
  s = spec_of(TriggerKind::PitchBoost);
  s.pitch_factor = 2.5;
  bad(s);
  s = spec_of(TriggerKind::ProsodyEVC);
  s.presets[index_of(Emotion::Angry)].f0_base_hz = 0.0;
  bad(s);
  s = spec_of(TriggerKind::ProsodyEVC);
  s.presets[index_of(Emotion::Sad)].energy_gain = -1.0;
  bad(s);
}

TEST(ExternalConverterTest, TimesOutWhenNothingIsProduced) {
  const auto dir = std::filesystem::temp_directory_path() / "emoattack_ext_timeout";
  std::filesystem::remove_all(dir);
  ExternalConverter conv{dir, "", std::chrono::milliseconds(200)};
  std::vector<Utterance> items(1);
  items[0].id = "u0";
  items[0].waveform = tone(150.0);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(conv.convert(items, Emotion::Angry), IoError);
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(200));
  EXPECT_TRUE(std::filesystem::exists(dir / "u0.src.wav"));
  EXPECT_TRUE(std::filesystem::exists(dir / "u0.target"));
  std::filesystem::remove_all(dir);
}

TEST(ExternalConverterTest, ReadsConvertedFilesAndFailingCommand) {
  const auto dir = std::filesystem::temp_directory_path() / "emoattack_ext_copy";
  std::filesystem::remove_all(dir);
  std::vector<Utterance> items(2);
  for (int i = 0; i < 2; ++i) {
    items[i].id = "u" + std::to_string(i);
    items[i].waveform = quantize_pcm16(tone(120.0 + 40.0 * i));
  }
  ExternalConverter conv{dir, "for f in {dir}/*.src.wav; do cp \"$f\" \"${f%.src.wav}.conv.wav\"; done",
                         std::chrono::milliseconds(2000)};
  const auto out = conv.convert(items, Emotion::Happy);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], items[0].waveform);
  EXPECT_EQ(out[1], items[1].waveform);
  std::filesystem::remove_all(dir);

  ExternalConverter failing{dir, "exit 3", std::chrono::milliseconds(200)};
  EXPECT_THROW(failing.convert(items, Emotion::Happy), IoError);
  std::filesystem::remove_all(dir);
}
