#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/features.hpp"
#include "emoattack/random.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

using SerFeatures = std::array<double, ProsodyStats::kDims>;
using EmotionScores = std::array<double, kNumEmotions>;

// Multinomial logistic regression over standardised prosody statistics.
struct SerModel {
  std::array<SerFeatures, kNumEmotions> weights{};
  EmotionScores bias{};
  SerFeatures mean{};
  SerFeatures stddev{1, 1, 1, 1, 1, 1};

  EmotionScores logits(const SerFeatures& raw) const {
    EmotionScores z{};
    for (std::size_t c = 0; c < kNumEmotions; ++c) {
      double acc = bias[c];
      for (std::size_t j = 0; j < raw.size(); ++j) acc += weights[c][j] * (raw[j] - mean[j]) / stddev[j];
      z[c] = acc;
    }
    return z;
  }
};

inline SerFeatures ser_features(const Waveform& w) { return prosody_stats(w).as_array(); }

inline EmotionScores softmax(const EmotionScores& z) {
  const double m = *std::max_element(z.begin(), z.end());
  EmotionScores p{};
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// First maximum wins, which is the canonical emotion order.
inline Emotion argmax_emotion(const EmotionScores& s) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] > s[best]) best = i;
  }
  return kAllEmotions[best];
}

struct SerTrainConfig {
  int epochs = 200;
  double lr = 0.1;
  std::size_t batch_size = 32;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

inline SerModel train_ser_features(const std::vector<SerFeatures>& x, const std::vector<Emotion>& y,
                                   const SerTrainConfig& cfg) {
  if (x.size() != y.size() || x.empty()) throw DomainError("train_ser: features and labels must be nonempty and aligned");
  std::array<bool, kNumEmotions> present{};
  for (auto e : y) present[index_of(e)] = true;
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw DomainError("train_ser: corpus must contain at least two emotion classes");
  }
  if (cfg.epochs < 1 || cfg.batch_size == 0 || !(cfg.lr > 0.0)) throw DomainError("train_ser: bad optimiser settings");

  SerModel m;
  const auto n = static_cast<double>(x.size());
  for (std::size_t j = 0; j < ProsodyStats::kDims; ++j) {
    double s = 0.0;
    for (const auto& f : x) s += f[j];
    m.mean[j] = s / n;
    double ss = 0.0;
    for (const auto& f : x) ss += (f[j] - m.mean[j]) * (f[j] - m.mean[j]);
    m.stddev[j] = std::max(std::sqrt(ss / n), 1e-9);
  }
  std::vector<SerFeatures> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < ProsodyStats::kDims; ++j) z[i][j] = (x[i][j] - m.mean[j]) / m.stddev[j];
  }

  Rng rng(derive_seed({cfg.seed, 0x5E2ULL}));
  for (auto& row : m.weights) {
    for (auto& v : row) v = 0.01 * rng.uniform(-1.0, 1.0);
  }
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::array<SerFeatures, kNumEmotions> gw{};
      EmotionScores gb{};
      for (std::size_t b = start; b < end; ++b) {
        const auto& f = z[order[b]];
        EmotionScores logit{};
        for (std::size_t c = 0; c < kNumEmotions; ++c) {
          double acc = m.bias[c];
          for (std::size_t j = 0; j < f.size(); ++j) acc += m.weights[c][j] * f[j];
          logit[c] = acc;
        }
        auto p = softmax(logit);
        p[index_of(y[order[b]])] -= 1.0;
        for (std::size_t c = 0; c < kNumEmotions; ++c) {
          gb[c] += p[c];
          for (std::size_t j = 0; j < f.size(); ++j) gw[c][j] += p[c] * f[j];
        }
      }
      const double scale = cfg.lr / static_cast<double>(end - start);
      for (std::size_t c = 0; c < kNumEmotions; ++c) {
        m.bias[c] -= scale * gb[c];
        for (std::size_t j = 0; j < ProsodyStats::kDims; ++j) {
          m.weights[c][j] -= scale * gw[c][j] + cfg.lr * cfg.l2 * m.weights[c][j];
        }
      }
    }
  }
  for (const auto& row : m.weights) {
    for (double v : row) {
      if (!std::isfinite(v)) throw TrainingError("train_ser: weights diverged", cfg.epochs, 0);
    }
  }
  return m;
}

inline SerModel train_ser(const std::vector<Utterance>& corpus, const SerTrainConfig& cfg) {
  std::vector<SerFeatures> x;
  std::vector<Emotion> y;
  x.reserve(corpus.size());
  for (const auto& u : corpus) {
    x.push_back(ser_features(u.waveform));
    y.push_back(u.emotion);
  }
  return train_ser_features(x, y, cfg);
}

struct EmotionPrediction {
  Emotion emotion = Emotion::Neutral;
  EmotionScores scores{};
};

inline EmotionPrediction classify_features(const SerModel& m, const SerFeatures& f) {
  const auto p = softmax(m.logits(f));
  return {argmax_emotion(p), p};
}

inline EmotionPrediction classify_emotion(const SerModel& m, const Waveform& w) {
  return classify_features(m, ser_features(w));
}

inline EmotionPrediction classify_emotion(const SerModel& m, const Utterance& u) {
  return classify_emotion(m, u.waveform);
}

inline Emotion majority_of(const std::vector<Emotion>& predictions) {
  if (predictions.empty()) throw DomainError("majority vote over an empty set");
  std::array<std::size_t, kNumEmotions> votes{};
  for (auto e : predictions) ++votes[index_of(e)];
  std::size_t best = 0;
  for (std::size_t i = 1; i < votes.size(); ++i) {
    if (votes[i] > votes[best]) best = i;
  }
  return kAllEmotions[best];
}

inline Emotion majority_emotion(const SerModel& m, const std::vector<Utterance>& dataset) {
  if (dataset.empty()) throw DomainError("majority_emotion: empty dataset");
  std::vector<Emotion> preds;
  preds.reserve(dataset.size());
  for (const auto& u : dataset) preds.push_back(classify_emotion(m, u).emotion);
  return majority_of(preds);
}

struct F1Report {
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  std::array<double, kNumEmotions> precision{};
  std::array<double, kNumEmotions> recall{};
  std::array<double, kNumEmotions> f1{};
  std::array<std::array<std::size_t, kNumEmotions>, kNumEmotions> confusion{};  // [truth][prediction]
};

// Per-class ratios with a zero denominator are 0. Classes absent from both
// predictions and truths are left out of the macro average.
inline F1Report ser_f1(const std::vector<Emotion>& predictions, const std::vector<Emotion>& truths) {
  if (predictions.size() != truths.size()) throw DomainError("ser_f1: length mismatch");
  if (predictions.empty()) throw DomainError("ser_f1: empty input");
  F1Report r;
  for (std::size_t i = 0; i < truths.size(); ++i) ++r.confusion[index_of(truths[i])][index_of(predictions[i])];
  std::size_t correct = 0;
  double macro = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    std::size_t tp = r.confusion[c][c], truth_total = 0, pred_total = 0;
    for (std::size_t k = 0; k < kNumEmotions; ++k) {
      truth_total += r.confusion[c][k];
      pred_total += r.confusion[k][c];
    }
    correct += tp;
    r.precision[c] = pred_total ? static_cast<double>(tp) / static_cast<double>(pred_total) : 0.0;
    r.recall[c] = truth_total ? static_cast<double>(tp) / static_cast<double>(truth_total) : 0.0;
    const double denom = r.precision[c] + r.recall[c];
    r.f1[c] = denom > 0.0 ? 2.0 * r.precision[c] * r.recall[c] / denom : 0.0;
    if (truth_total + pred_total > 0) {
      macro += r.f1[c];
      ++counted;
    }
  }
  r.micro_f1 = static_cast<double>(correct) / static_cast<double>(truths.size());
  r.macro_f1 = counted ? macro / static_cast<double>(counted) : 0.0;
  return r;
}

// Text format: header line "ser-v1", then one labelled line per field.
inline std::string serialize(const SerModel& m) {
  std::ostringstream out;
  char buf[64];
  auto put = [&](const std::string& label, auto const& values) {
    out << label;
    for (double v : values) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      out << buf;
    }
    out << "\n";
  };
  out << "ser-v1\n";
  put("mean", m.mean);
  put("stddev", m.stddev);
  put("bias", m.bias);
  for (Emotion e : kAllEmotions) put("weights." + std::string(to_string(e)), m.weights[index_of(e)]);
  return out.str();
}

inline SerModel deserialize_ser(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "ser-v1") throw FormatError("SER model: missing ser-v1 header");
  SerModel m;
  std::array<bool, 3 + kNumEmotions> seen{};
  auto read_into = [](std::istringstream& ls, auto& values, const std::string& label) {
    for (auto& v : values) {
      if (!(ls >> v)) throw FormatError("SER model: short field " + label);
    }
    std::string extra;
    if (ls >> extra) throw FormatError("SER model: trailing values in " + label);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string label;
    ls >> label;
    if (label == "mean") {
      read_into(ls, m.mean, label);
      seen[0] = true;
    } else if (label == "stddev") {
      read_into(ls, m.stddev, label);
      seen[1] = true;
    } else if (label == "bias") {
      read_into(ls, m.bias, label);
      seen[2] = true;
    } else if (label.rfind("weights.", 0) == 0) {
      const Emotion e = parse_emotion(label.substr(8));
      read_into(ls, m.weights[index_of(e)], label);
      seen[3 + index_of(e)] = true;
    } else {
      throw FormatError("SER model: unknown field " + label);
    }
  }
  if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) throw FormatError("SER model: missing fields");
  for (double s : m.stddev) {
    if (!(s > 0.0)) throw FormatError("SER model: nonpositive normalisation");
  }
  return m;
}

inline void save_ser(const SerModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << serialize(m);
}

inline SerModel load_ser(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_ser(ss.str());
}

}  // namespace emoattack
