#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/manifest.hpp"
#include "emoattack/nn.hpp"
#include "emoattack/ser.hpp"
#include "emoattack/synthesis.hpp"
#include "emoattack/triggers.hpp"

namespace emoattack {

struct CorpusConfig {
  std::size_t classes = 10;
  std::size_t per_class = 200;
  EmotionMix emotion_mix = default_emotion_mix();
  std::uint64_t seed = 1;
  // Existing manifest (relative to the run directory); empty = synthesize.
  std::string manifest;
};

struct SplitConfig {
  double test_fraction = 0.05;
  std::uint64_t seed = 1;
};

struct SelectionConfig {
  std::uint64_t seed = 1;
  bool any_emotion = false;
};

struct ExternalConverterConfig {
  std::string command;  // empty = built-in conversion
  std::string exchange_dir;
  double timeout_s = 60.0;
};

struct TriggerConfig {
  TriggerSpec spec = [] {
    TriggerSpec s;
    s.infer_below_source = true;
    return s;
  }();
  // "pool": the SER majority emotion of D_t, "infer": per utterance from
  // prosody, otherwise an emotion name.
  std::string source = "pool";
  ExternalConverterConfig external;
};

struct ExperimentConfig {
  CorpusConfig corpus;
  SplitConfig split;
  SerTrainConfig ser{200, 0.1, 32, 1e-4, 1};
  SelectionConfig selection;
  TriggerConfig trigger;
  int y_t = 0;
  std::size_t pn = 50;
  std::vector<std::size_t> pn_list{0, 10, 20, 50, 100};
  std::vector<Emotion> ablation_emotions{Emotion::Angry, Emotion::Happy, Emotion::Sad, Emotion::Surprise};
  double asr_threshold = 0.99;
  TrainConfig train{};
  std::string output_dir = "runs/default";

  void validate() const;
  void override_seeds(std::uint64_t seed);
};

namespace detail {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

inline void reject_unknown(const json& j, const std::string& path, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError(path.empty() ? k : path + "." + k, "unknown field");
  }
}

template <class T>
void read_field(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  const std::string field = path.empty() ? key : path + "." + key;
  const auto& v = j.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw ConfigError(field, "must be nonnegative");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field, "expected a string");
    }
    out = v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(field, e.what());
  }
}

inline Emotion read_emotion(const json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field, "expected an emotion name");
  try {
    return parse_emotion(v.get<std::string>());
  } catch (const DomainError& e) {
    throw ConfigError(field, e.what());
  }
}

inline ojson preset_json(const EmotionPreset& p) {
  ojson j;
  j["f0_base_hz"] = p.f0_base_hz;
  j["f0_slope_hz_per_s"] = p.f0_slope_hz_per_s;
  j["f0_jitter"] = p.f0_jitter;
  j["energy_gain"] = p.energy_gain;
  j["rate_factor"] = p.rate_factor;
  return j;
}

inline void read_preset(const json& j, const std::string& path, EmotionPreset& p) {
  reject_unknown(j, path, {"f0_base_hz", "f0_slope_hz_per_s", "f0_jitter", "energy_gain", "rate_factor"});
  read_field(j, path, "f0_base_hz", p.f0_base_hz);
  read_field(j, path, "f0_slope_hz_per_s", p.f0_slope_hz_per_s);
  read_field(j, path, "f0_jitter", p.f0_jitter);
  read_field(j, path, "energy_gain", p.energy_gain);
  read_field(j, path, "rate_factor", p.rate_factor);
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  using detail::ojson;
  ojson j;
  ojson corpus;
  corpus["classes"] = c.corpus.classes;
  corpus["per_class"] = c.corpus.per_class;
  ojson mix = ojson::object();
  for (auto e : kAllEmotions) {
    if (auto it = c.corpus.emotion_mix.find(e); it != c.corpus.emotion_mix.end()) mix[std::string(to_string(e))] = it->second;
  }
  corpus["emotion_mix"] = mix;
  corpus["seed"] = c.corpus.seed;
  corpus["manifest"] = c.corpus.manifest;
  j["corpus"] = corpus;

  j["split"] = {{"test_fraction", c.split.test_fraction}, {"seed", c.split.seed}};
  j["ser"] = {{"epochs", c.ser.epochs},
              {"lr", c.ser.lr},
              {"batch_size", c.ser.batch_size},
              {"l2", c.ser.l2},
              {"seed", c.ser.seed}};
  j["selection"] = {{"seed", c.selection.seed}, {"any_emotion", c.selection.any_emotion}};

  const auto& s = c.trigger.spec;
  ojson t;
  t["kind"] = to_string(s.kind);
  t["target_emotion"] = std::string(to_string(s.target_emotion));
  t["source"] = c.trigger.source;
  t["infer_below_source"] = s.infer_below_source;
  t["reference_rms"] = s.reference_rms;
  t["amplitude"] = s.amplitude;
  t["frequency_hz"] = s.frequency_hz;
  t["position"] = s.position;
  t["length"] = s.length;
  t["clip_s"] = s.clip_s;
  t["pitch_factor"] = s.pitch_factor;
  t["mask_db"] = s.mask_db;
  t["mask_hz"] = s.mask_hz;
  t["seed"] = s.seed;
  ojson presets;
  for (auto e : kAllEmotions) presets[std::string(to_string(e))] = detail::preset_json(s.presets[index_of(e)]);
  t["presets"] = presets;
  t["external"] = {{"command", c.trigger.external.command},
                   {"exchange_dir", c.trigger.external.exchange_dir},
                   {"timeout_s", c.trigger.external.timeout_s}};
  j["trigger"] = t;

  j["y_t"] = c.y_t;
  j["pn"] = c.pn;
  j["pn_list"] = c.pn_list;
  ojson ab = ojson::array();
  for (auto e : c.ablation_emotions) ab.push_back(std::string(to_string(e)));
  j["ablation_emotions"] = ab;
  j["asr_threshold"] = c.asr_threshold;

  j["train"] = {{"batch_size", c.train.batch_size},   {"epochs", c.train.epochs},
                {"lr", c.train.adam.lr},              {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},        {"eps", c.train.adam.eps},
                {"init_seed", c.train.init_seed},     {"shuffle_seed", c.train.shuffle_seed},
                {"hidden", c.train.shape.hidden},     {"channels", c.train.shape.channels}};
  j["output_dir"] = c.output_dir;
  return j;
}

inline std::string config_text(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

// Missing fields keep their defaults; unknown fields are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  ExperimentConfig c;
  detail::reject_unknown(j, "", {"corpus", "split", "ser", "selection", "trigger", "y_t", "pn", "pn_list",
                                 "ablation_emotions", "asr_threshold", "train", "output_dir"});
  if (j.contains("corpus")) {
    const auto& k = j["corpus"];
    detail::reject_unknown(k, "corpus", {"classes", "per_class", "emotion_mix", "seed", "manifest"});
    read_field(k, "corpus", "classes", c.corpus.classes);
    read_field(k, "corpus", "per_class", c.corpus.per_class);
    read_field(k, "corpus", "seed", c.corpus.seed);
    read_field(k, "corpus", "manifest", c.corpus.manifest);
    if (k.contains("emotion_mix")) {
      const auto& m = k["emotion_mix"];
      if (!m.is_object()) throw ConfigError("corpus.emotion_mix", "expected an object of emotion fractions");
      c.corpus.emotion_mix.clear();
      for (const auto& [name, v] : m.items()) {
        const std::string field = "corpus.emotion_mix." + name;
        const Emotion e = detail::read_emotion(nlohmann::json(name), field);
        if (!v.is_number()) throw ConfigError(field, "expected a number");
        c.corpus.emotion_mix[e] = v.get<double>();
      }
    }
  }
  if (j.contains("split")) {
    const auto& k = j["split"];
    detail::reject_unknown(k, "split", {"test_fraction", "seed"});
    read_field(k, "split", "test_fraction", c.split.test_fraction);
    read_field(k, "split", "seed", c.split.seed);
  }
  if (j.contains("ser")) {
    const auto& k = j["ser"];
    detail::reject_unknown(k, "ser", {"epochs", "lr", "batch_size", "l2", "seed"});
    read_field(k, "ser", "epochs", c.ser.epochs);
    read_field(k, "ser", "lr", c.ser.lr);
    read_field(k, "ser", "batch_size", c.ser.batch_size);
    read_field(k, "ser", "l2", c.ser.l2);
    read_field(k, "ser", "seed", c.ser.seed);
  }
  if (j.contains("selection")) {
    const auto& k = j["selection"];
    detail::reject_unknown(k, "selection", {"seed", "any_emotion"});
    read_field(k, "selection", "seed", c.selection.seed);
    read_field(k, "selection", "any_emotion", c.selection.any_emotion);
  }
  if (j.contains("trigger")) {
    const auto& k = j["trigger"];
    detail::reject_unknown(k, "trigger",
                           {"kind", "target_emotion", "source", "infer_below_source", "reference_rms", "amplitude", "frequency_hz", "position",
                            "length", "clip_s", "pitch_factor", "mask_db", "mask_hz", "seed", "presets", "external"});
    auto& s = c.trigger.spec;
    if (k.contains("kind")) {
      std::string kind;
      read_field(k, "trigger", "kind", kind);
      try {
        s.kind = parse_trigger_kind(kind);
      } catch (const DomainError& e) {
        throw ConfigError("trigger.kind", e.what());
      }
    }
    if (k.contains("target_emotion")) s.target_emotion = detail::read_emotion(k["target_emotion"], "trigger.target_emotion");
    read_field(k, "trigger", "source", c.trigger.source);
    read_field(k, "trigger", "infer_below_source", s.infer_below_source);
    read_field(k, "trigger", "reference_rms", s.reference_rms);
    read_field(k, "trigger", "amplitude", s.amplitude);
    read_field(k, "trigger", "frequency_hz", s.frequency_hz);
    read_field(k, "trigger", "position", s.position);
    read_field(k, "trigger", "length", s.length);
    read_field(k, "trigger", "clip_s", s.clip_s);
    read_field(k, "trigger", "pitch_factor", s.pitch_factor);
    read_field(k, "trigger", "mask_db", s.mask_db);
    read_field(k, "trigger", "mask_hz", s.mask_hz);
    read_field(k, "trigger", "seed", s.seed);
    if (k.contains("presets")) {
      const auto& p = k["presets"];
      if (!p.is_object()) throw ConfigError("trigger.presets", "expected an object keyed by emotion");
      for (const auto& [name, v] : p.items()) {
        const std::string field = "trigger.presets." + name;
        const Emotion e = detail::read_emotion(nlohmann::json(name), field);
        detail::read_preset(v, field, s.presets[index_of(e)]);
      }
    }
    if (k.contains("external")) {
      const auto& x = k["external"];
      detail::reject_unknown(x, "trigger.external", {"command", "exchange_dir", "timeout_s"});
      read_field(x, "trigger.external", "command", c.trigger.external.command);
      read_field(x, "trigger.external", "exchange_dir", c.trigger.external.exchange_dir);
      read_field(x, "trigger.external", "timeout_s", c.trigger.external.timeout_s);
    }
  }
  read_field(j, "", "y_t", c.y_t);
  read_field(j, "", "pn", c.pn);
  if (j.contains("pn_list")) {
    const auto& v = j["pn_list"];
    if (!v.is_array()) throw ConfigError("pn_list", "expected an array of counts");
    c.pn_list.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_unsigned()) throw ConfigError("pn_list[" + std::to_string(i) + "]", "expected a count");
      c.pn_list.push_back(v[i].get<std::size_t>());
    }
  }
  if (j.contains("ablation_emotions")) {
    const auto& v = j["ablation_emotions"];
    if (!v.is_array()) throw ConfigError("ablation_emotions", "expected an array of emotion names");
    c.ablation_emotions.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      c.ablation_emotions.push_back(detail::read_emotion(v[i], "ablation_emotions[" + std::to_string(i) + "]"));
    }
  }
  read_field(j, "", "asr_threshold", c.asr_threshold);
  if (j.contains("train")) {
    const auto& k = j["train"];
    detail::reject_unknown(k, "train", {"batch_size", "epochs", "lr", "beta1", "beta2", "eps", "init_seed",
                                        "shuffle_seed", "hidden", "channels"});
    read_field(k, "train", "batch_size", c.train.batch_size);
    read_field(k, "train", "epochs", c.train.epochs);
    read_field(k, "train", "lr", c.train.adam.lr);
    read_field(k, "train", "beta1", c.train.adam.beta1);
    read_field(k, "train", "beta2", c.train.adam.beta2);
    read_field(k, "train", "eps", c.train.adam.eps);
    read_field(k, "train", "init_seed", c.train.init_seed);
    read_field(k, "train", "shuffle_seed", c.train.shuffle_seed);
    read_field(k, "train", "hidden", c.train.shape.hidden);
    read_field(k, "train", "channels", c.train.shape.channels);
  }
  read_field(j, "", "output_dir", c.output_dir);
  c.train.shape.classes = c.corpus.classes;
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

inline void ExperimentConfig::validate() const {
  if (corpus.classes < 2) throw ConfigError("corpus.classes", "need at least 2 classes");
  if (corpus.per_class < 2) throw ConfigError("corpus.per_class", "need at least 2 utterances per class");
  if (corpus.emotion_mix.empty()) throw ConfigError("corpus.emotion_mix", "must name at least one emotion");
  double sum = 0.0;
  for (const auto& [e, f] : corpus.emotion_mix) {
    if (!(f >= 0.0) || !std::isfinite(f)) {
      throw ConfigError("corpus.emotion_mix." + std::string(to_string(e)), "fraction must be nonnegative");
    }
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("corpus.emotion_mix", "fractions sum to " + std::to_string(sum) + ", expected 1");
  }
  if (!(split.test_fraction > 0.0 && split.test_fraction < 1.0)) {
    throw ConfigError("split.test_fraction", "must lie strictly between 0 and 1");
  }
  if (ser.epochs < 1) throw ConfigError("ser.epochs", "must be at least 1");
  if (!(ser.lr > 0.0)) throw ConfigError("ser.lr", "must be positive");
  if (ser.batch_size < 1) throw ConfigError("ser.batch_size", "must be at least 1");
  if (!(ser.l2 >= 0.0)) throw ConfigError("ser.l2", "must be nonnegative");
  if (trigger.source != "pool" && trigger.source != "infer") {
    try {
      parse_emotion(trigger.source);
    } catch (const DomainError&) {
      throw ConfigError("trigger.source", "expected \"pool\", \"infer\" or an emotion name");
    }
  }
  try {
    trigger.spec.validate(kDefaultSampleRate);
  } catch (const DomainError& e) {
    throw ConfigError("trigger", e.what());
  }
  if (!(trigger.external.timeout_s > 0.0)) throw ConfigError("trigger.external.timeout_s", "must be positive");
  if (y_t < 0 || static_cast<std::size_t>(y_t) >= corpus.classes) {
    throw ConfigError("y_t", "must be a class id below corpus.classes");
  }
  if (pn_list.empty()) throw ConfigError("pn_list", "must not be empty");
  for (std::size_t i = 1; i < pn_list.size(); ++i) {
    if (pn_list[i] <= pn_list[i - 1]) throw ConfigError("pn_list", "values must be strictly increasing");
  }
  if (ablation_emotions.empty()) throw ConfigError("ablation_emotions", "must not be empty");
  if (!(asr_threshold > 0.0 && asr_threshold <= 1.0)) throw ConfigError("asr_threshold", "must lie in (0, 1]");
  try {
    train.validate();
  } catch (const DomainError& e) {
    throw ConfigError("train", e.what());
  }
  if (train.shape.classes != corpus.classes) throw ConfigError("train", "network outputs must equal corpus.classes");
}

inline void ExperimentConfig::override_seeds(std::uint64_t s) {
  corpus.seed = s;
  split.seed = s;
  ser.seed = s;
  selection.seed = s;
  trigger.spec.seed = s;
  train.init_seed = s;
  train.shuffle_seed = s;
}

}  // namespace emoattack
