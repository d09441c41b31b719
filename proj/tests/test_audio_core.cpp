#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <vector>

#include "emoattack/features.hpp"
#include "emoattack/manifest.hpp"
#include "emoattack/synthesis.hpp"
#include "emoattack/wav_io.hpp"
#include "emoattack/waveform.hpp"

using namespace emoattack;
namespace fs = std::filesystem;

namespace {

// Minimal independent RIFF writer for hand-made fixtures.
std::vector<unsigned char> make_wav(const std::vector<std::int16_t>& pcm, std::uint32_t rate, std::uint16_t channels = 1,
                                    std::uint16_t bits = 16, std::uint16_t format = 1) {
  std::vector<unsigned char> b;
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  auto u16 = [&](std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>(v >> 8));
  };
  auto tag = [&](const char* t) { b.insert(b.end(), t, t + 4); };
  const auto data_len = static_cast<std::uint32_t>(pcm.size() * 2);
  tag("RIFF");
  u32(36 + data_len);
  tag("WAVE");
  tag("fmt ");
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  tag("data");
  u32(data_len);
  for (auto s : pcm) u16(static_cast<std::uint16_t>(s));
  return b;
}

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "emoattack_audio_core";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Waveform, RejectsInvalidSamples) {
  EXPECT_THROW(Waveform(std::vector<float>{}), DomainError);
  EXPECT_THROW(Waveform(std::vector<float>{0.0f, 1.5f}), DomainError);
  EXPECT_THROW(Waveform(std::vector<float>{NAN}), DomainError);
  EXPECT_THROW(Waveform(std::vector<float>{0.0f}, 0), DomainError);
  const auto w = Waveform::clamped(std::vector<double>{2.0, -3.0, 0.25}, 16000);
  EXPECT_EQ(w[0], 1.0f);
  EXPECT_EQ(w[1], -1.0f);
  EXPECT_EQ(w[2], 0.25f);
}

TEST(ReadWav, ConstantHalfScale) {
  const auto p = temp_file("half.wav");
  write_bytes(p, make_wav(std::vector<std::int16_t>(16, 16384), 16000));
  const auto w = read_wav(p);
  ASSERT_EQ(w.size(), 16u);
  for (float v : w.samples()) EXPECT_EQ(v, 0.5f);
  EXPECT_EQ(w.sample_rate(), 16000);
}

TEST(ReadWav, ZerosKeepHeaderRate) {
  const auto p = temp_file("zeros.wav");
  write_bytes(p, make_wav(std::vector<std::int16_t>(100, 0), 16000));
  const auto w = read_wav(p);
  EXPECT_EQ(w.sample_rate(), 16000);
  for (float v : w.samples()) EXPECT_EQ(v, 0.0f);
}

TEST(ReadWav, RejectsMalformedAndUnsupported) {
  const auto p = temp_file("bad.wav");
  write_bytes(p, {'R', 'I', 'F', 'X', 0, 0, 0, 0, 'W', 'A', 'V', 'E'});
  EXPECT_THROW(read_wav(p), FormatError);
  auto truncated = make_wav(std::vector<std::int16_t>(10, 1), 16000);
  truncated.resize(truncated.size() - 6);
  write_bytes(p, truncated);
  EXPECT_THROW(read_wav(p), FormatError);
  write_bytes(p, make_wav(std::vector<std::int16_t>(10, 1), 16000, 2));
  EXPECT_THROW(read_wav(p), UnsupportedEncodingError);
  write_bytes(p, make_wav(std::vector<std::int16_t>(10, 1), 16000, 1, 8));
  EXPECT_THROW(read_wav(p), UnsupportedEncodingError);
  EXPECT_THROW(read_wav(temp_file("does_not_exist.wav")), IoError);
}

TEST(WriteWav, ZeroWaveformHasZeroDataChunk) {
  const auto p = temp_file("w0.wav");
  write_wav(Waveform::zeros(64), p);
  const auto b = read_bytes(p);
  ASSERT_EQ(b.size(), 44u + 128u);
  for (std::size_t i = 44; i < b.size(); ++i) EXPECT_EQ(b[i], 0);
}

TEST(WriteWav, FullScaleClampsTo32767) {
  const auto p = temp_file("w1.wav");
  write_wav(Waveform(std::vector<float>{1.0f, -1.0f}), p);
  const auto b = read_bytes(p);
  const auto s0 = static_cast<std::int16_t>(b[44] | (b[45] << 8));
  const auto s1 = static_cast<std::int16_t>(b[46] | (b[47] << 8));
  EXPECT_EQ(s0, 32767);
  EXPECT_EQ(s1, -32768);
}

TEST(WriteWav, UnwritablePathIsIoError) {
  EXPECT_THROW(write_wav(Waveform::zeros(4), "/nonexistent_dir_xyz/a.wav"), IoError);
}

TEST(WavRoundTrip, RandomWaveformsWithinOneStep) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto p = temp_file("rt.wav");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> s(1000 + static_cast<std::size_t>(trial) * 37);
    for (auto& v : s) v = static_cast<float>(u(rng));
    const Waveform w(s, 16000);
    write_wav(w, p);
    const auto r = read_wav(p);
    ASSERT_EQ(r.size(), w.size());
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LE(std::abs(r[i] - w[i]), 1.0 / 32768.0 + 1e-9);
  }
}

TEST(WavRoundTrip, PcmGridIsExact) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<float> s(512);
  for (auto& v : s) v = static_cast<float>(u(rng));
  const auto w = quantize_pcm16(Waveform(s));
  const auto p = temp_file("grid.wav");
  write_wav(w, p);
  EXPECT_TRUE(read_wav(p) == w);
}

TEST(PadOrTrim, PadsShortInputWithTailZeros) {
  std::vector<float> s(8000, 0.25f);
  const auto w = pad_or_trim(Waveform(s), 1.0);
  ASSERT_EQ(w.size(), 16000u);
  for (std::size_t i = 0; i < 8000; ++i) EXPECT_EQ(w[i], 0.25f);
  for (std::size_t i = 8000; i < 16000; ++i) EXPECT_EQ(w[i], 0.0f);
}

TEST(PadOrTrim, TruncatesLongInputFromTail) {
  std::vector<float> s(20000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(i % 100) / 100.0f;
  const auto w = pad_or_trim(Waveform(s), 1.0);
  ASSERT_EQ(w.size(), 16000u);
  for (std::size_t i = 0; i < 16000; ++i) EXPECT_EQ(w[i], s[i]);
}

TEST(PadOrTrim, ExactLengthIsIdentityAndIdempotent) {
  std::vector<float> s(16000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(0.01f * static_cast<float>(i)) * 0.5f;
  const Waveform w(s);
  EXPECT_TRUE(pad_or_trim(w, 1.0) == w);
  for (std::size_t n : {100u, 15999u, 16001u, 40000u}) {
    const Waveform x(std::vector<float>(n, 0.1f));
    const auto once = pad_or_trim(x, 1.0);
    EXPECT_TRUE(pad_or_trim(once, 1.0) == once);
  }
  EXPECT_THROW(pad_or_trim(w, 0.0), DomainError);
}

TEST(SynthUtterance, Deterministic) {
  const auto prof = default_profile(10, 42);
  const auto a = synth_utterance(prof, 3, Emotion::Happy, 17);
  const auto b = synth_utterance(prof, 3, Emotion::Happy, 17);
  EXPECT_EQ(a.id, b.id);
  EXPECT_TRUE(a.waveform == b.waveform);
  EXPECT_EQ(a.waveform.size(), 16000u);
  const auto c = synth_utterance(prof, 3, Emotion::Happy, 18);
  EXPECT_FALSE(a.waveform == c.waveform);
}

TEST(SynthUtterance, UnknownClassIsDomainError) {
  const auto prof = default_profile(4, 1);
  EXPECT_THROW(synth_utterance(prof, 4, Emotion::Neutral, 0), DomainError);
  EXPECT_THROW(synth_utterance(prof, -1, Emotion::Neutral, 0), DomainError);
}

TEST(SynthUtterance, MidpointF0MatchesPreset) {
  const auto prof = default_profile(10, 5);
  std::size_t checked = 0, within = 0;
  for (int k = 0; k < 10; ++k) {
    for (auto e : kAllEmotions) {
      const auto u = synth_utterance(prof, k, e, static_cast<std::uint64_t>(k) * 7 + 1);
      const auto& p = prof.presets[index_of(e)];
      const double mid_s = prof.onset_s + prof.base_duration_s / p.rate_factor / 2.0;
      const auto x = u.waveform.to_double();
      const auto start = static_cast<std::size_t>(mid_s * 16000.0) - 512;
      const auto f0 = estimate_f0(std::span<const double>(x.data() + start, 1024), 16000);
      ++checked;
      if (f0 && std::abs(*f0 / p.f0_base_hz - 1.0) <= 0.05) ++within;
    }
  }
  // Slow pitch wobble and speaker spread are part of the preset; allow a
  // few frames caught at a wobble extreme.
  EXPECT_GE(static_cast<double>(within) / static_cast<double>(checked), 0.9) << within << "/" << checked;
}

TEST(SynthUtterance, AngryOverNeutralF0Ratio) {
  const auto prof = default_profile(10, 9);
  std::vector<double> ratios;
  for (int k = 0; k < 10; ++k) {
    const auto n = synth_utterance(prof, k, Emotion::Neutral, 3);
    const auto a = synth_utterance(prof, k, Emotion::Angry, 3);
    const double fn = prosody_stats(n.waveform).f0_mean_hz;
    const double fa = prosody_stats(a.waveform).f0_mean_hz;
    ratios.push_back(fa / fn);
  }
  std::sort(ratios.begin(), ratios.end());
  const double median = (ratios[4] + ratios[5]) / 2.0;
  EXPECT_NEAR(median, 175.0 / 140.0, 0.05 * 175.0 / 140.0);
}

TEST(SynthUtterance, UniqueIdsAcrossGrid) {
  const auto prof = default_profile(10, 2);
  std::set<std::string> ids;
  for (int k = 0; k < 10; ++k) {
    for (std::uint64_t i = 0; i < 20; ++i) ids.insert(synth_utterance(prof, k, Emotion::Neutral, i).id);
  }
  EXPECT_EQ(ids.size(), 200u);
}

TEST(SynthCorpus, DefaultMixCounts) {
  const auto prof = default_profile(10, 1);
  const auto corpus = synth_corpus(prof, 10, 200, default_emotion_mix());
  ASSERT_EQ(corpus.size(), 2000u);
  std::map<int, int> by_class;
  std::map<Emotion, int> by_emotion;
  std::set<std::string> ids;
  for (const auto& u : corpus) {
    ++by_class[u.class_label];
    ++by_emotion[u.emotion];
    ids.insert(u.id);
  }
  EXPECT_EQ(ids.size(), 2000u);
  for (const auto& [k, n] : by_class) EXPECT_EQ(n, 200);
  EXPECT_NEAR(by_emotion[Emotion::Neutral], 1200, 1);
  for (auto e : {Emotion::Angry, Emotion::Sad, Emotion::Surprise, Emotion::Happy}) EXPECT_NEAR(by_emotion[e], 200, 1);
  const auto again = synth_corpus(prof, 10, 200, default_emotion_mix());
  EXPECT_EQ(dataset_hash(again), dataset_hash(corpus));
}

TEST(SynthCorpus, SingleEmotionAndInvalidMixes) {
  const auto prof = default_profile(3, 1);
  const auto corpus = synth_corpus(prof, 3, 5, {{Emotion::Neutral, 1.0}});
  for (const auto& u : corpus) EXPECT_EQ(u.emotion, Emotion::Neutral);
  EXPECT_THROW(synth_corpus(prof, 3, 5, {}), DomainError);
  EXPECT_THROW(synth_corpus(prof, 3, 5, {{Emotion::Neutral, 0.5}}), DomainError);
}

TEST(SynthCorpus, ApportionWithinOne) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    EmotionMix mix;
    double sum = 0.0;
    for (auto e : kAllEmotions) sum += (mix[e] = u(rng));
    for (auto& [e, f] : mix) f /= sum;
    double check = 0.0;
    for (auto& [e, f] : mix) check += f;
    mix[Emotion::Neutral] += 1.0 - check;
    const std::size_t total = 1 + static_cast<std::size_t>(u(rng) * 3000);
    const auto counts = apportion(mix, total);
    std::size_t s = 0;
    for (auto e : kAllEmotions) {
      s += counts[index_of(e)];
      EXPECT_LE(std::abs(static_cast<double>(counts[index_of(e)]) - mix[e] * static_cast<double>(total)), 1.0);
    }
    EXPECT_EQ(s, total);
  }
}

TEST(SynthProperties, AmplitudeInvariantOverRandomProfiles) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    auto prof = default_profile(4, static_cast<std::uint64_t>(trial) + 100);
    prof.noise_floor = 0.02 * u(rng);
    prof.base_rms = 0.02 + 0.4 * u(rng);
    prof.amplitude_spread = 0.3 * u(rng);
    for (auto& p : prof.presets) {
      p.f0_base_hz = 80.0 + 250.0 * u(rng);
      p.f0_slope_hz_per_s = -80.0 + 160.0 * u(rng);
      p.energy_gain = 0.2 + 3.0 * u(rng);
      p.rate_factor = 0.7 + 0.8 * u(rng);
    }
    const auto e = kAllEmotions[static_cast<std::size_t>(trial) % kNumEmotions];
    const auto w = synth_utterance(prof, trial % 4, e, static_cast<std::uint64_t>(trial)).waveform;
    ASSERT_EQ(w.size(), 16000u);
    for (float v : w.samples()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_LE(std::abs(v), 1.0f);
    }
  }
}

TEST(Manifest, LineRoundTripAndOrderInsensitiveHash) {
  ManifestEntry e{"k01-angry-00003", "wav/k01-angry-00003.wav", 1, Emotion::Angry, UtteranceSource::Synthetic, false};
  const auto back = parse_manifest_line(manifest_line(e));
  EXPECT_EQ(back.id, e.id);
  EXPECT_EQ(back.path, e.path);
  EXPECT_EQ(back.class_label, 1);
  EXPECT_EQ(back.emotion, Emotion::Angry);
  EXPECT_FALSE(back.poison);
  EXPECT_EQ(manifest_line(e).find("poison"), std::string::npos);
  EXPECT_THROW(parse_manifest_line("{not json"), FormatError);
  EXPECT_THROW(parse_manifest_line(R"({"id":"a","path":"p","class_label":0,"emotion_label":"bored","source":"file"})"),
               FormatError);

  const auto prof = default_profile(3, 1);
  auto items = synth_corpus(prof, 3, 4, default_emotion_mix());
  const auto h = dataset_hash(items);
  std::reverse(items.begin(), items.end());
  EXPECT_EQ(dataset_hash(items), h);
  const auto dir = fs::temp_directory_path() / "emoattack_audio_core" / "corpus";
  fs::remove_all(dir);
  write_corpus(items, dir, "wav", "manifest.jsonl");
  EXPECT_EQ(dataset_hash(load_corpus(dir / "manifest.jsonl")), h);
}
