#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <string>
#include <string_view>

#include "emoattack/errors.hpp"

namespace emoattack {

// Declaration order is the canonical order used for every tie-break.
enum class Emotion : int { Neutral = 0, Angry = 1, Sad = 2, Surprise = 3, Happy = 4 };

inline constexpr std::size_t kNumEmotions = 5;

inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::Neutral, Emotion::Angry, Emotion::Sad, Emotion::Surprise, Emotion::Happy};

inline constexpr std::size_t index_of(Emotion e) { return static_cast<std::size_t>(e); }

inline constexpr std::string_view to_string(Emotion e) {
  switch (e) {
    case Emotion::Neutral: return "neutral";
    case Emotion::Angry: return "angry";
    case Emotion::Sad: return "sad";
    case Emotion::Surprise: return "surprise";
    case Emotion::Happy: return "happy";
  }
  return "neutral";
}

inline Emotion parse_emotion(std::string_view name) {
  std::string lower(name);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (Emotion e : kAllEmotions) {
    if (lower == to_string(e)) return e;
  }
  throw DomainError("unknown emotion '" + std::string(name) + "'");
}

}  // namespace emoattack
