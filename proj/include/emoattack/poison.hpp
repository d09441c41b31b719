#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/random.hpp"
#include "emoattack/ser.hpp"
#include "emoattack/triggers.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

struct Split {
  std::vector<Utterance> train;  // D_t
  std::vector<Utterance> test;   // D_c
};

// Stratified by class: per class round(test_fraction * count) members (at
// least one) go to the test side, chosen by a seeded shuffle. Both sides are
// ordered by id, so the result does not depend on the input order.
inline Split split_dataset(const std::vector<Utterance>& all, double test_fraction, std::uint64_t seed) {
  if (all.size() < 20) throw DomainError("split_dataset: need at least 20 utterances");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DomainError("split_dataset: test_fraction must lie in (0,1)");
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return all[a].id < all[b].id; });
  std::map<int, std::vector<std::size_t>> by_class;
  for (auto i : order) by_class[all[i].class_label].push_back(i);

  std::vector<bool> is_test(all.size(), false);
  for (auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw DomainError("split_dataset: class " + std::to_string(label) + " has fewer than 2 members");
    }
    const auto want = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size()))), 1,
        members.size() - 1);
    Rng rng(derive_seed({seed, 0x5B117ULL, static_cast<std::uint64_t>(label)}));
    rng.shuffle(members);
    for (std::size_t i = 0; i < want; ++i) is_test[members[i]] = true;
  }
  Split s;
  for (auto i : order) (is_test[i] ? s.test : s.train).push_back(all[i]);
  return s;
}

struct SelectionResult {
  std::vector<Utterance> selected;  // D_tq
  Emotion pool_emotion = Emotion::Neutral;
  std::size_t pool_size = 0;
};

// Uniform draw without replacement of `pn` members of D_t whose SER
// prediction is the majority emotion of D_t. With `any_emotion` the pool is
// all of D_t.
inline SelectionResult select_poison_subset(const std::vector<Utterance>& train, const SerModel& ser, std::size_t pn,
                                            std::uint64_t seed, bool any_emotion = false) {
  SelectionResult out;
  std::vector<Emotion> predicted;
  predicted.reserve(train.size());
  std::array<std::size_t, kNumEmotions> counts{};
  for (const auto& u : train) {
    predicted.push_back(classify_emotion(ser, u).emotion);
    ++counts[index_of(predicted.back())];
  }
  if (train.empty()) {
    if (pn == 0) return out;
    throw CapacityError("select_poison_subset: empty training set", 0);
  }
  out.pool_emotion = kAllEmotions[static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin())];
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (any_emotion || predicted[i] == out.pool_emotion) pool.push_back(i);
  }
  out.pool_size = pool.size();
  if (pn > pool.size()) {
    throw CapacityError("select_poison_subset: requested " + std::to_string(pn) + " but the pool holds " +
                            std::to_string(pool.size()),
                        pool.size());
  }
  Rng rng(derive_seed({seed, 0x5E1EC7ULL}));
  // Partial Fisher-Yates: the first pn entries are the sample.
  for (std::size_t i = 0; i < pn; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(pn));
  for (std::size_t i = 0; i < pn; ++i) out.selected.push_back(train[pool[i]]);
  return out;
}

struct PoisonRecord {
  std::string source_id;
  std::string poisoned_id;
  int original_label = 0;
  Emotion original_emotion = Emotion::Neutral;  // as predicted by the SER
  int target_label = 0;
  TriggerKind trigger_kind = TriggerKind::ProsodyEVC;
  Emotion target_emotion = Emotion::Angry;
};

inline std::string poisoned_id(const std::string& source_id) { return source_id + ".poison"; }

struct PoisonResult {
  std::vector<Utterance> poisoned;  // D_tp
  std::vector<PoisonRecord> records;
};

// Each selected utterance gets the trigger and the target label. Sources are
// not modified. If `converted` is given it supplies the triggered waveforms
// (e.g. from an external converter) in the order of `selected`.
inline PoisonResult generate_poisoned(const std::vector<Utterance>& selected, const TriggerSpec& trigger, int y_t,
                                      int num_classes, const SerModel& ser,
                                      const std::vector<Waveform>* converted = nullptr) {
  if (y_t < 0 || y_t >= num_classes) throw DomainError("generate_poisoned: target label out of range");
  if (converted != nullptr && converted->size() != selected.size()) {
    throw DomainError("generate_poisoned: converted waveform count does not match the selection");
  }
  PoisonResult out;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto& src = selected[i];
    Utterance p = src;
    p.id = poisoned_id(src.id);
    try {
      p.waveform = converted != nullptr ? pad_or_trim((*converted)[i], src.waveform.duration_s())
                                        : apply_trigger(trigger, src.waveform);
    } catch (const std::exception& e) {
      throw DomainError("generate_poisoned: trigger failed on " + src.id + ": " + e.what());
    }
    p.class_label = y_t;
    if (trigger.kind == TriggerKind::ProsodyEVC) p.emotion = trigger.target_emotion;
    p.poisoned = true;
    PoisonRecord r;
    r.source_id = src.id;
    r.poisoned_id = p.id;
    r.original_label = src.class_label;
    r.original_emotion = classify_emotion(ser, src).emotion;
    r.target_label = y_t;
    r.trigger_kind = trigger.kind;
    r.target_emotion = trigger.target_emotion;
    out.records.push_back(r);
    out.poisoned.push_back(std::move(p));
  }
  return out;
}

// D_b = (D_t \ D_tq) + D_tp, ordered by id.
inline std::vector<Utterance> build_backdoor_dataset(const std::vector<Utterance>& train,
                                                     const std::vector<Utterance>& selected,
                                                     const std::vector<Utterance>& poisoned) {
  if (selected.size() != poisoned.size()) throw DomainError("build_backdoor_dataset: |D_tq| != |D_tp|");
  std::set<std::string> train_ids, removed;
  for (const auto& u : train) train_ids.insert(u.id);
  for (const auto& u : selected) {
    if (!train_ids.count(u.id)) throw DomainError("build_backdoor_dataset: " + u.id + " is not in D_t");
    removed.insert(u.id);
  }
  std::vector<Utterance> out;
  out.reserve(train.size());
  for (const auto& u : train) {
    if (!removed.count(u.id)) out.push_back(u);
  }
  for (const auto& u : poisoned) out.push_back(u);
  std::sort(out.begin(), out.end(), [](const Utterance& a, const Utterance& b) { return a.id < b.id; });
  return out;
}

inline std::string poison_records_csv(const std::vector<PoisonRecord>& records) {
  std::ostringstream os;
  os << "source_id,poisoned_id,original_label,original_emotion,target_label,trigger_kind,target_emotion\n";
  for (const auto& r : records) {
    os << r.source_id << ',' << r.poisoned_id << ',' << r.original_label << ',' << to_string(r.original_emotion) << ','
       << r.target_label << ',' << to_string(r.trigger_kind) << ',' << to_string(r.target_emotion) << '\n';
  }
  return os.str();
}

}  // namespace emoattack
