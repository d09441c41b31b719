#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"

namespace emoattack {

inline constexpr int kDefaultSampleRate = 16000;

// Immutable mono sample buffer. Copies share storage.
class Waveform {
 public:
  Waveform() = default;

  // Throws DomainError unless samples are nonempty, finite and in [-1, 1].
  Waveform(std::vector<float> samples, int sample_rate_hz = kDefaultSampleRate)
      : rate_(sample_rate_hz) {
    if (sample_rate_hz <= 0) throw DomainError("sample rate must be positive");
    if (samples.empty()) throw DomainError("waveform must be nonempty");
    for (float v : samples) {
      if (!std::isfinite(v) || v < -1.0f || v > 1.0f) {
        throw DomainError("waveform sample outside [-1, 1] or not finite");
      }
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(samples));
  }

  // Clamps into [-1, 1]; non-finite values become 0.
  template <typename Range>
  static Waveform clamped(const Range& values, int sample_rate_hz = kDefaultSampleRate) {
    std::vector<float> out;
    out.reserve(std::size(values));
    for (auto v : values) {
      const double d = static_cast<double>(v);
      out.push_back(std::isfinite(d) ? static_cast<float>(std::clamp(d, -1.0, 1.0)) : 0.0f);
    }
    return Waveform(std::move(out), sample_rate_hz);
  }

  static Waveform zeros(std::size_t n, int sample_rate_hz = kDefaultSampleRate) {
    return Waveform(std::vector<float>(n, 0.0f), sample_rate_hz);
  }

  std::span<const float> samples() const {
    return data_ ? std::span<const float>(*data_) : std::span<const float>();
  }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }
  int sample_rate() const { return rate_; }
  double duration_s() const { return static_cast<double>(size()) / rate_; }
  float operator[](std::size_t i) const { return (*data_)[i]; }

  std::vector<double> to_double() const {
    auto s = samples();
    return {s.begin(), s.end()};
  }

  friend bool operator==(const Waveform& a, const Waveform& b) {
    if (a.rate_ != b.rate_) return false;
    auto x = a.samples();
    auto y = b.samples();
    return std::equal(x.begin(), x.end(), y.begin(), y.end());
  }

 private:
  std::shared_ptr<const std::vector<float>> data_;
  int rate_ = kDefaultSampleRate;
};

// Tail padding / tail truncation to round(duration_s * rate) samples.
inline Waveform pad_or_trim(const Waveform& w, double duration_s) {
  if (!(duration_s > 0.0)) throw DomainError("pad_or_trim: duration must be positive");
  const auto n = static_cast<std::size_t>(std::llround(duration_s * w.sample_rate()));
  if (n == w.size()) return w;
  auto s = w.samples();
  std::vector<float> out(n, 0.0f);
  std::copy_n(s.begin(), std::min(n, s.size()), out.begin());
  return Waveform(std::move(out), w.sample_rate());
}

// Snap onto the 16-bit PCM grid so that a WAV round trip is exact.
inline Waveform quantize_pcm16(const Waveform& w) {
  std::vector<float> out;
  out.reserve(w.size());
  for (float v : w.samples()) {
    const long q = std::clamp(std::lround(static_cast<double>(v) * 32768.0), -32768L, 32767L);
    out.push_back(static_cast<float>(static_cast<double>(q) / 32768.0));
  }
  return Waveform(std::move(out), w.sample_rate());
}

// 64-bit FNV-1a over the raw sample bytes and the rate.
inline std::uint64_t checksum(const Waveform& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const int rate = w.sample_rate();
  feed(&rate, sizeof rate);
  auto s = w.samples();
  feed(s.data(), s.size_bytes());
  return h;
}

enum class UtteranceSource { Synthetic, File };

inline std::string to_string(UtteranceSource s) {
  return s == UtteranceSource::Synthetic ? "synthetic" : "file";
}

struct Utterance {
  std::string id;
  Waveform waveform;
  int class_label = 0;
  Emotion emotion = Emotion::Neutral;
  UtteranceSource source = UtteranceSource::Synthetic;
  bool poisoned = false;
};

}  // namespace emoattack
