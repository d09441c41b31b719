#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "emoattack/config.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/eval.hpp"
#include "emoattack/manifest.hpp"
#include "emoattack/nn.hpp"
#include "emoattack/poison.hpp"
#include "emoattack/ser.hpp"
#include "emoattack/synthesis.hpp"
#include "emoattack/triggers.hpp"

namespace emoattack {

namespace fs = std::filesystem;

// Failure inside a named pipeline stage (exit code 4).
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const UnsupportedEncodingError*>(&e)) {
    return 3;
  }
  return 4;
}

template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const IoError& e) {
    throw IoError("[" + stage + "] " + e.what());
  } catch (const FormatError& e) {
    throw FormatError("[" + stage + "] " + e.what());
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

// Runs f(i) for i in [0, n) on up to `jobs` threads. Each index writes only
// its own output slot, so results do not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class RunLog {
 public:
  RunLog(const fs::path& file, std::ostream* echo) : out_(file, std::ios::app), echo_(echo) {
    if (!out_) throw IoError("cannot open log " + file.string());
  }
  void operator()(const std::string& line) {
    out_ << utc_timestamp() << ' ' << line << '\n';
    out_.flush();
    if (echo_) *echo_ << line << '\n';
  }

 private:
  std::ofstream out_;
  std::ostream* echo_;
};

// Caches shared by all runs of one process: log-mel features by waveform
// content, trained models by (data, config), SER models by (data, config).
struct Lab {
  int jobs = 1;
  std::ostream* echo = nullptr;
  std::map<std::uint64_t, std::vector<float>> features;
  std::map<std::string, std::pair<Classifier, TrainHistory>> models;
  std::map<std::string, SerModel> sers;

  void ensure_features(const std::vector<const Waveform*>& waves) {
    std::vector<const Waveform*> todo;
    std::set<std::uint64_t> seen;
    for (const auto* w : waves) {
      const auto key = checksum(*w);
      if (!features.count(key) && seen.insert(key).second) todo.push_back(w);
    }
    std::vector<std::vector<float>> out(todo.size());
    parallel_for(todo.size(), jobs, [&](std::size_t i) { out[i] = logmel_features(*todo[i]); });
    for (std::size_t i = 0; i < todo.size(); ++i) features.emplace(checksum(*todo[i]), std::move(out[i]));
  }

  const std::vector<float>& feature(const Waveform& w) {
    const auto key = checksum(w);
    auto it = features.find(key);
    if (it == features.end()) it = features.emplace(key, logmel_features(w)).first;
    return it->second;
  }
};

inline std::vector<Utterance> synthesize_corpus(const CorpusConfig& c) {
  const auto profile = default_profile(c.classes, c.seed);
  return synth_corpus(profile, c.classes, c.per_class, c.emotion_mix);
}

inline std::string corpus_summary(const std::vector<Utterance>& items) {
  std::map<int, std::size_t> by_class;
  std::map<Emotion, std::size_t> by_emotion;
  for (const auto& u : items) {
    ++by_class[u.class_label];
    ++by_emotion[u.emotion];
  }
  std::ostringstream os;
  os << "utterances " << items.size() << "\n";
  for (const auto& [c, n] : by_class) os << "class " << c << " " << n << "\n";
  for (const auto& [e, n] : by_emotion) os << "emotion " << to_string(e) << " " << n << "\n";
  return os.str();
}

// ---- run directories ----

inline const std::set<std::string>& unhashed_files() {
  static const std::set<std::string> names = {"DONE", "inventory.json", "log.txt"};
  return names;
}

// Relative path -> content hash of every file under `dir`, skipping the
// marker, the inventory, the log and any excluded subdirectory.
inline std::map<std::string, std::string> hash_tree(const fs::path& dir, const std::set<std::string>& excluded_dirs = {}) {
  std::map<std::string, std::string> out;
  for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator(); ++it) {
    const auto rel = it->path().lexically_relative(dir).generic_string();
    if (it->is_directory()) {
      if (excluded_dirs.count(rel)) it.disable_recursion_pending();
      continue;
    }
    if (!it->is_regular_file()) continue;
    if (unhashed_files().count(rel)) continue;
    out[rel] = hex64(file_hash(it->path()));
  }
  return out;
}

struct Inventory {
  std::string kind;
  std::map<std::string, std::string> files;
  std::map<std::string, std::string> external;  // manifest path -> dataset hash
  std::vector<std::string> subruns;
};

inline std::string inventory_text(const Inventory& inv) {
  nlohmann::ordered_json j;
  j["kind"] = inv.kind;
  j["files"] = inv.files;
  j["external"] = inv.external;
  j["subruns"] = inv.subruns;
  return j.dump(2) + "\n";
}

inline Inventory read_inventory(const fs::path& dir) {
  const auto path = dir / "inventory.json";
  if (!fs::exists(path)) throw IoError("missing inventory.json in " + dir.string());
  Inventory inv;
  try {
    const auto j = nlohmann::json::parse(read_text(path));
    inv.kind = j.at("kind").get<std::string>();
    inv.files = j.at("files").get<std::map<std::string, std::string>>();
    inv.external = j.at("external").get<std::map<std::string, std::string>>();
    inv.subruns = j.at("subruns").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("inventory.json: " + std::string(e.what()));
  }
  return inv;
}

// Writes the inventory and then the DONE marker; nothing may change after.
inline void seal_run(const fs::path& dir, Inventory inv) {
  std::set<std::string> excluded(inv.subruns.begin(), inv.subruns.end());
  inv.files = hash_tree(dir, excluded);
  write_text(dir / "inventory.json", inventory_text(inv));
  write_text(dir / "DONE", utc_timestamp() + "\n");
}

// A fresh or partially written directory is (re)used; a completed run is
// never overwritten.
inline void prepare_run_dir(const fs::path& dir) {
  if (fs::exists(dir / "DONE")) throw IoError("refusing to overwrite completed run " + dir.string());
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
    const bool empty = fs::directory_iterator(dir) == fs::directory_iterator();
    if (!empty && !fs::exists(dir / "config.json")) {
      throw IoError("refusing to reuse non-empty directory " + dir.string() + " that is not a run directory");
    }
    if (!empty) fs::remove_all(dir);
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline std::string relative_path(const fs::path& target, const fs::path& base) {
  return fs::absolute(target).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal()).generic_string();
}

// Corpus loaded from, or synthesized into, a run directory.
struct CorpusSource {
  std::vector<Utterance> items;
  fs::path manifest;  // absolute path of the manifest holding the WAVs
};

inline CorpusSource obtain_corpus(const ExperimentConfig& cfg, const fs::path& run_dir) {
  CorpusSource c;
  if (!cfg.corpus.manifest.empty()) {
    c.manifest = fs::absolute(run_dir / cfg.corpus.manifest).lexically_normal();
    c.items = load_corpus(c.manifest);
  } else {
    c.items = synthesize_corpus(cfg.corpus);
    write_corpus(c.items, run_dir / "corpus", "wav", "manifest.jsonl");
    c.manifest = fs::absolute(run_dir / "corpus" / "manifest.jsonl").lexically_normal();
  }
  if (c.items.empty()) throw DomainError("corpus is empty");
  for (const auto& u : c.items) {
    if (u.class_label < 0 || static_cast<std::size_t>(u.class_label) >= cfg.corpus.classes) {
      throw DomainError("corpus member " + u.id + " has a class outside corpus.classes");
    }
  }
  return c;
}

// ---- attack pipeline ----

inline std::string train_key(const std::vector<Utterance>& train, const std::vector<Utterance>& test,
                             const TrainConfig& t) {
  std::ostringstream os;
  os << hex64(dataset_hash(train)) << '/' << hex64(dataset_hash(test)) << '/' << t.batch_size << '/' << t.epochs << '/'
     << format_number(t.adam.lr) << '/' << format_number(t.adam.beta1) << '/' << format_number(t.adam.beta2) << '/'
     << format_number(t.adam.eps) << '/' << t.shuffle_seed << '/' << t.init_seed << '/' << t.shape.channels << '/'
     << t.shape.hidden << '/' << t.shape.classes;
  return os.str();
}

inline const SerModel& ser_for(Lab& lab, const std::vector<Utterance>& train, const SerTrainConfig& cfg) {
  std::ostringstream key;
  key << hex64(dataset_hash(train)) << '/' << cfg.epochs << '/' << format_number(cfg.lr) << '/' << cfg.batch_size << '/'
      << format_number(cfg.l2) << '/' << cfg.seed;
  auto it = lab.sers.find(key.str());
  if (it == lab.sers.end()) it = lab.sers.emplace(key.str(), train_ser(train, cfg)).first;
  return it->second;
}

inline const std::pair<Classifier, TrainHistory>& model_for(Lab& lab, const TrainConfig& cfg,
                                                           const std::vector<Utterance>& train,
                                                           const std::vector<Utterance>& test,
                                                           const std::function<void(const std::string&)>& log,
                                                           const std::string& name) {
  const auto key = train_key(train, test, cfg);
  if (auto it = lab.models.find(key); it != lab.models.end()) {
    log(name + ": reusing a model trained on identical data and settings");
    return it->second;
  }
  std::vector<const Waveform*> waves;
  for (const auto& u : train) waves.push_back(&u.waveform);
  for (const auto& u : test) waves.push_back(&u.waveform);
  lab.ensure_features(waves);
  std::vector<LabeledFeatures> tr, te;
  for (const auto& u : train) tr.push_back({&lab.feature(u.waveform), static_cast<std::size_t>(u.class_label)});
  for (const auto& u : test) te.push_back({&lab.feature(u.waveform), static_cast<std::size_t>(u.class_label)});
  auto result = train_classifier(cfg, tr, te, [&](const EpochStats& s) {
    if (s.epoch % 10 == 0 || s.epoch == cfg.epochs) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s epoch %zu loss %.4f train_acc %.4f test_acc %.4f", name.c_str(), s.epoch,
                    s.loss, s.train_acc, s.test_acc);
      log(buf);
    }
  });
  return lab.models.emplace(key, std::move(result)).first->second;
}

// Trigger with the source emotion resolved against the poisoning pool.
inline TriggerSpec resolve_trigger(const TriggerConfig& t, Emotion pool_emotion) {
  TriggerSpec s = t.spec;
  if (t.source == "pool") {
    s.source_emotion = pool_emotion;
  } else if (t.source == "infer") {
    s.source_emotion.reset();
  } else {
    s.source_emotion = parse_emotion(t.source);
  }
  return s;
}

inline std::optional<ExternalConverter> external_converter(const TriggerConfig& t, const fs::path& run_dir) {
  if (t.external.command.empty() && t.external.exchange_dir.empty()) return std::nullopt;
  ExternalConverter x;
  x.exchange_dir = t.external.exchange_dir.empty() ? run_dir / "exchange" : fs::path(t.external.exchange_dir);
  x.command = t.external.command;
  x.timeout = std::chrono::milliseconds(static_cast<long long>(t.external.timeout_s * 1000.0));
  return x;
}

// Triggered versions of `items`, quantized to the PCM16 grid so that the
// in-memory waveform equals what a WAV file would hold.
inline std::vector<Waveform> trigger_all(const std::vector<Utterance>& items, const TriggerSpec& spec,
                                         const std::optional<ExternalConverter>& ext, int jobs) {
  std::vector<Waveform> out(items.size());
  if (ext) {
    auto converted = ext->convert(items, spec.target_emotion);
    for (std::size_t i = 0; i < items.size(); ++i) {
      out[i] = quantize_pcm16(pad_or_trim(converted[i], items[i].waveform.duration_s()));
    }
    return out;
  }
  parallel_for(items.size(), jobs, [&](std::size_t i) {
    try {
      out[i] = quantize_pcm16(apply_trigger(spec, items[i].waveform));
    } catch (const std::exception& e) {
      throw DomainError("trigger failed on " + items[i].id + ": " + e.what());
    }
  });
  return out;
}

// Everything between the corpus and training that is a pure function of the
// config, the corpus and the SER model.
struct Partitions {
  Split split;
  SelectionResult selection;
  TriggerSpec trigger;
  PoisonResult poison;
  std::vector<Utterance> backdoor;  // D_b
  double poisoning_rate = 0.0;
};

inline Partitions derive_partitions(const ExperimentConfig& cfg, const std::vector<Utterance>& corpus,
                                    const SerModel& ser, const fs::path& exchange_root, int jobs,
                                    const Split* split = nullptr) {
  Partitions p;
  p.split = split ? *split : run_stage("split", [&] { return split_dataset(corpus, cfg.split.test_fraction, cfg.split.seed); });
  p.selection = run_stage("select", [&] {
    return select_poison_subset(p.split.train, ser, cfg.pn, cfg.selection.seed, cfg.selection.any_emotion);
  });
  p.trigger = resolve_trigger(cfg.trigger, p.selection.pool_emotion);
  p.poison = run_stage("poison", [&] {
    const auto ext = external_converter(cfg.trigger, exchange_root);
    const auto converted = trigger_all(p.selection.selected, p.trigger, ext, jobs);
    return generate_poisoned(p.selection.selected, p.trigger, cfg.y_t, static_cast<int>(cfg.corpus.classes), ser,
                             &converted);
  });
  p.backdoor = run_stage("assemble", [&] {
    return build_backdoor_dataset(p.split.train, p.selection.selected, p.poison.poisoned);
  });
  p.poisoning_rate = static_cast<double>(p.selection.selected.size()) / static_cast<double>(p.split.train.size());
  return p;
}

struct Evaluation {
  ReportRow row;
  AsrResult asr;
  F1Report ser_report;
};

inline std::string run_id_for(const ExperimentConfig& cfg) {
  return to_string(cfg.trigger.spec.kind) + "-" + std::string(to_string(cfg.trigger.spec.target_emotion)) + "-pn" +
         std::to_string(cfg.pn) + "-s" + std::to_string(cfg.corpus.seed);
}

inline Evaluation evaluate_attack(const ExperimentConfig& cfg, const Partitions& p, const SerModel& ser,
                                  const Classifier& baseline, const Classifier& backdoored, Lab& lab,
                                  const fs::path& exchange_root) {
  return run_stage("evaluate", [&] {
    const auto& test = p.split.test;
    std::vector<Utterance> eligible;
    for (const auto& u : test) {
      if (u.class_label != cfg.y_t) eligible.push_back(u);
    }
    if (eligible.empty()) throw DomainError("no test sample has a label other than y_t");
    const auto ext = external_converter(cfg.trigger, exchange_root / "attack");
    const auto triggered = trigger_all(eligible, p.trigger, ext, lab.jobs);

    std::vector<const Waveform*> waves;
    for (const auto& u : test) waves.push_back(&u.waveform);
    for (const auto& w : triggered) waves.push_back(&w);
    lab.ensure_features(waves);

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < eligible.size(); ++i) index[eligible[i].id] = i;

    Evaluation ev;
    ev.asr = attack_success_rate(test, cfg.y_t, [&](const Utterance& u) {
      return backdoored.predict(lab.feature(triggered[index.at(u.id)]));
    });
    auto acc = [&](const Classifier& m) {
      std::size_t correct = 0;
      for (const auto& u : test) correct += m.predict(lab.feature(u.waveform)) == static_cast<std::size_t>(u.class_label);
      return static_cast<double>(correct) / static_cast<double>(test.size());
    };
    auto& r = ev.row;
    r.run_id = run_id_for(cfg);
    r.trigger_kind = cfg.trigger.spec.kind;
    r.target_emotion = cfg.trigger.spec.target_emotion;
    r.y_t = cfg.y_t;
    r.pn = cfg.pn;
    r.asr = ev.asr.asr;
    r.clean_acc_baseline = acc(baseline);
    r.clean_acc_backdoored = acc(backdoored);
    r.av_points = accuracy_variance_points(r.clean_acc_baseline, r.clean_acc_backdoored);

    std::vector<Emotion> preds(eligible.size()), truths(eligible.size());
    std::vector<Distortion> dist(eligible.size());
    parallel_for(eligible.size(), lab.jobs, [&](std::size_t i) {
      preds[i] = classify_emotion(ser, triggered[i]).emotion;
      dist[i] = distortion_report(eligible[i].waveform, triggered[i]);
    });
    for (std::size_t i = 0; i < eligible.size(); ++i) {
      truths[i] = cfg.trigger.spec.kind == TriggerKind::ProsodyEVC ? cfg.trigger.spec.target_emotion : eligible[i].emotion;
    }
    ev.ser_report = ser_f1(preds, truths);
    r.micro_f1 = ev.ser_report.micro_f1;
    r.macro_f1 = ev.ser_report.macro_f1;
    double lsd = 0.0, snr = 0.0;
    for (const auto& d : dist) {
      lsd += d.lsd_db;
      snr += d.snr_db;
    }
    r.lsd = lsd / static_cast<double>(dist.size());
    r.snr_db = snr / static_cast<double>(dist.size());
    r.synth_seed = cfg.corpus.seed;
    r.split_seed = cfg.split.seed;
    r.select_seed = cfg.selection.seed;
    r.trigger_seed = cfg.trigger.spec.seed;
    r.init_seed = cfg.train.init_seed;
    r.shuffle_seed = cfg.train.shuffle_seed;
    return ev;
  });
}

inline std::string asr_breakdown_csv(const AsrResult& a) {
  std::ostringstream os;
  os << "group,key,hits,eligible\n";
  for (const auto& [c, h] : a.by_class) os << "class," << c << ',' << h.hits << ',' << h.eligible << '\n';
  for (const auto& [e, h] : a.by_emotion) os << "emotion," << to_string(e) << ',' << h.hits << ',' << h.eligible << '\n';
  return os.str();
}

inline std::string partitions_text(const Partitions& p) {
  nlohmann::ordered_json j;
  auto ids = [](const std::vector<Utterance>& v) {
    std::vector<std::string> out;
    for (const auto& u : v) out.push_back(u.id);
    std::sort(out.begin(), out.end());
    return out;
  };
  j["train"] = ids(p.split.train);
  j["test"] = ids(p.split.test);
  j["selected"] = ids(p.selection.selected);
  j["pool_emotion"] = std::string(to_string(p.selection.pool_emotion));
  j["pool_size"] = p.selection.pool_size;
  j["poisoning_rate"] = p.poisoning_rate;
  j["trigger_source"] = p.trigger.source_emotion ? std::string(to_string(*p.trigger.source_emotion)) : "inferred";
  j["attack_inputs"] = "triggered members of the test split whose class differs from y_t";
  return j.dump(2) + "\n";
}

// Backdoor manifest: poisoned members point into poison/wav, clean members
// into the corpus directory.
inline std::string backdoor_manifest(const Partitions& p, const CorpusSource& corpus, const fs::path& poison_dir) {
  std::map<std::string, std::string> clean_paths;
  const auto base = corpus.manifest.parent_path();
  for (const auto& e : read_manifest(corpus.manifest)) clean_paths[e.id] = relative_path(base / e.path, poison_dir);
  std::vector<ManifestEntry> entries;
  for (const auto& u : p.backdoor) {
    ManifestEntry e{u.id, u.poisoned ? "wav/" + u.id + ".wav" : clean_paths.at(u.id), u.class_label, u.emotion,
                    u.source, u.poisoned};
    entries.push_back(std::move(e));
  }
  return manifest_text(std::move(entries));
}

struct AttackOutcome {
  Evaluation eval;
  Partitions partitions;
  double seconds = 0.0;
};

// select -> poison -> train baseline and backdoored -> evaluate, with every
// artifact written under run_dir.
inline AttackOutcome run_attack(const ExperimentConfig& cfg, const fs::path& run_dir, Lab& lab) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  prepare_run_dir(run_dir);
  write_text(run_dir / "config.json", config_text(cfg));
  RunLog log(run_dir / "log.txt", lab.echo);
  auto say = [&](const std::string& s) { log(run_id_for(cfg) + ": " + s); };

  auto corpus = run_stage("corpus", [&] { return obtain_corpus(cfg, run_dir); });
  say("corpus " + std::to_string(corpus.items.size()) + " utterances");
  auto split = run_stage("split", [&] { return split_dataset(corpus.items, cfg.split.test_fraction, cfg.split.seed); });
  const auto& ser = run_stage("ser", [&]() -> const SerModel& { return ser_for(lab, split.train, cfg.ser); });
  fs::create_directories(run_dir / "ser");
  save_ser(ser, run_dir / "ser" / "ser_model.txt");

  AttackOutcome out;
  out.partitions = derive_partitions(cfg, corpus.items, ser, run_dir, lab.jobs, &split);
  const auto& p = out.partitions;
  char rate[64];
  std::snprintf(rate, sizeof rate, "%.6f", p.poisoning_rate);
  say("pool " + std::string(to_string(p.selection.pool_emotion)) + " size " + std::to_string(p.selection.pool_size) +
      ", poisoned " + std::to_string(p.poison.poisoned.size()) + ", poisoning rate " + rate);

  run_stage("write-poison", [&] {
    const auto poison_dir = run_dir / "poison";
    fs::create_directories(poison_dir / "wav");
    for (const auto& u : p.poison.poisoned) write_wav(u.waveform, poison_dir / "wav" / (u.id + ".wav"));
    write_text(poison_dir / "backdoor_manifest.jsonl", backdoor_manifest(p, corpus, poison_dir));
    write_text(run_dir / "poison_records.csv", poison_records_csv(p.poison.records));
    write_text(run_dir / "partitions.json", partitions_text(p));
    return 0;
  });

  fs::create_directories(run_dir / "models");
  auto train_one = [&](const std::string& name, const std::vector<Utterance>& data) {
    return run_stage("train-" + name, [&] {
      const auto& [model, history] = model_for(lab, cfg.train, data, p.split.test, say, name);
      save_classifier(model, run_dir / "models" / (name + ".model"));
      write_text(run_dir / "models" / (name + "_history.csv"), history_csv(history));
      // Evaluation uses the persisted checkpoint so that it matches verification.
      return load_classifier(run_dir / "models" / (name + ".model"));
    });
  };
  const auto baseline = train_one("baseline", p.split.train);
  const auto backdoored = train_one("backdoored", p.backdoor);

  out.eval = evaluate_attack(cfg, p, ser, baseline, backdoored, lab, run_dir);
  out.eval.row.timestamp = utc_timestamp();
  write_text(run_dir / "report.csv", report_csv({out.eval.row}));
  write_text(run_dir / "asr_breakdown.csv", asr_breakdown_csv(out.eval.asr));
  char buf[200];
  std::snprintf(buf, sizeof buf, "asr %.4f (%zu/%zu) av %.3f clean %.4f/%.4f ser micro-F1 %.4f", out.eval.row.asr,
                out.eval.asr.hits, out.eval.asr.eligible, out.eval.row.av_points, out.eval.row.clean_acc_baseline,
                out.eval.row.clean_acc_backdoored, out.eval.row.micro_f1);
  say(buf);

  Inventory inv;
  inv.kind = "attack";
  if (!cfg.corpus.manifest.empty()) inv.external[cfg.corpus.manifest] = hex64(dataset_hash(corpus.items));
  seal_run(run_dir, inv);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---- corpus and SER commands ----

inline std::string cmd_gen_corpus(const ExperimentConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  prepare_run_dir(run_dir);
  write_text(run_dir / "config.json", config_text(cfg));
  RunLog log(run_dir / "log.txt", nullptr);
  const auto corpus = run_stage("corpus", [&] { return obtain_corpus(cfg, run_dir); });
  const auto summary = corpus_summary(corpus.items);
  write_text(run_dir / "corpus_summary.txt", summary);
  log("corpus written, dataset hash " + hex64(dataset_hash(corpus.items)));
  Inventory inv;
  inv.kind = "gen-corpus";
  if (!cfg.corpus.manifest.empty()) inv.external[cfg.corpus.manifest] = hex64(dataset_hash(corpus.items));
  seal_run(run_dir, inv);
  return summary;
}

inline std::string ser_report_text(const F1Report& r) {
  std::ostringstream os;
  os << "micro_f1," << format_number(r.micro_f1) << "\nmacro_f1," << format_number(r.macro_f1) << "\n";
  os << "emotion,precision,recall,f1\n";
  for (auto e : kAllEmotions) {
    const auto i = index_of(e);
    os << to_string(e) << ',' << format_number(r.precision[i]) << ',' << format_number(r.recall[i]) << ','
       << format_number(r.f1[i]) << '\n';
  }
  os << "confusion (rows truth, columns prediction)\n";
  for (auto e : kAllEmotions) {
    os << to_string(e);
    for (auto c : r.confusion[index_of(e)]) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

inline F1Report ser_test_report(const SerModel& ser, const std::vector<Utterance>& test) {
  std::vector<Emotion> preds, truths;
  for (const auto& u : test) {
    preds.push_back(classify_emotion(ser, u).emotion);
    truths.push_back(u.emotion);
  }
  return ser_f1(preds, truths);
}

// Trains the SER on D_t and scores it on D_c.
inline F1Report cmd_train_ser(const ExperimentConfig& cfg, const fs::path& run_dir, Lab& lab) {
  cfg.validate();
  prepare_run_dir(run_dir);
  write_text(run_dir / "config.json", config_text(cfg));
  RunLog log(run_dir / "log.txt", lab.echo);
  const auto corpus = run_stage("corpus", [&] { return obtain_corpus(cfg, run_dir); });
  const auto split = run_stage("split", [&] { return split_dataset(corpus.items, cfg.split.test_fraction, cfg.split.seed); });
  const auto& ser = run_stage("ser", [&]() -> const SerModel& { return ser_for(lab, split.train, cfg.ser); });
  fs::create_directories(run_dir / "ser");
  save_ser(ser, run_dir / "ser" / "ser_model.txt");
  const auto report = ser_test_report(load_ser(run_dir / "ser" / "ser_model.txt"), split.test);
  write_text(run_dir / "ser_report.csv", ser_report_text(report));
  log("ser micro-F1 " + format_number(report.micro_f1) + " macro-F1 " + format_number(report.macro_f1));
  Inventory inv;
  inv.kind = "train-ser";
  if (!cfg.corpus.manifest.empty()) inv.external[cfg.corpus.manifest] = hex64(dataset_hash(corpus.items));
  seal_run(run_dir, inv);
  return report;
}

// ---- sweeps ----

struct SweepOutcome {
  std::vector<SweepResult> curves;
  std::vector<ReportRow> rows;
  std::vector<std::string> failures;
  double seconds = 0.0;
};

inline std::string point_dir_name(Emotion e, std::size_t pn) {
  return std::string(to_string(e)) + "/pn_" + std::to_string(pn);
}

inline std::string sweep_summary_text(const SweepOutcome& s, double threshold) {
  nlohmann::ordered_json j;
  j["asr_threshold"] = threshold;
  nlohmann::ordered_json curves = nlohmann::ordered_json::object();
  for (const auto& c : s.curves) {
    nlohmann::ordered_json cj;
    nlohmann::ordered_json pts = nlohmann::ordered_json::array();
    for (const auto& p : c.points) pts.push_back({{"pn", p.pn}, {"asr", p.asr}, {"av_points", p.av_points}});
    cj["points"] = pts;
    cj["min_pn"] = c.min_pn ? nlohmann::ordered_json(*c.min_pn) : nlohmann::ordered_json(nullptr);
    const double rho = c.rank_correlation();
    cj["spearman"] = std::isfinite(rho) ? nlohmann::ordered_json(rho) : nlohmann::ordered_json(nullptr);
    curves[std::string(to_string(c.target_emotion))] = cj;
  }
  j["curves"] = curves;
  // Comparison recorded, not asserted: has Sad reached the threshold at the
  // smallest pn where Angry does?
  const SweepResult* angry = nullptr;
  const SweepResult* sad = nullptr;
  for (const auto& c : s.curves) {
    if (c.target_emotion == Emotion::Angry) angry = &c;
    if (c.target_emotion == Emotion::Sad) sad = &c;
  }
  if (angry && sad) {
    nlohmann::ordered_json f;
    if (angry->min_pn) {
      f["angry_min_pn"] = *angry->min_pn;
      bool reached = false;
      for (const auto& p : sad->points) {
        if (p.pn == *angry->min_pn) reached = p.asr >= threshold;
      }
      f["sad_reached_at_angry_min_pn"] = reached;
    } else {
      f["angry_min_pn"] = nullptr;
      f["sad_reached_at_angry_min_pn"] = nullptr;
    }
    j["finding"] = f;
  }
  j["failures"] = s.failures;
  return j.dump(2) + "\n";
}

// One full attack per (emotion, pn) with all seeds held fixed. The corpus is
// written once at the sweep root and shared by the points.
inline SweepOutcome run_sweep(const ExperimentConfig& cfg, const std::vector<Emotion>& emotions, const fs::path& root,
                              Lab& lab, const std::string& kind) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  if (emotions.empty()) throw ConfigError("ablation_emotions", "must not be empty");
  prepare_run_dir(root);
  write_text(root / "config.json", config_text(cfg));
  RunLog log(root / "log.txt", lab.echo);

  std::string shared_manifest;
  if (cfg.corpus.manifest.empty()) {
    run_stage("corpus", [&] { return obtain_corpus(cfg, root); });
    shared_manifest = (root / "corpus" / "manifest.jsonl").string();
  } else {
    shared_manifest = (root / cfg.corpus.manifest).string();
  }

  SweepOutcome out;
  Inventory inv;
  inv.kind = kind;
  for (auto e : emotions) {
    SweepResult curve;
    curve.target_emotion = e;
    for (auto pn : cfg.pn_list) {
      const auto name = point_dir_name(e, pn);
      auto point = cfg;
      point.pn = pn;
      point.trigger.spec.target_emotion = e;
      point.corpus.manifest = relative_path(shared_manifest, root / name);
      point.output_dir = (fs::path(cfg.output_dir) / name).generic_string();
      inv.subruns.push_back(name);
      try {
        const auto r = run_attack(point, root / name, lab);
        out.rows.push_back(r.eval.row);
        curve.points.push_back({pn, r.eval.row.asr, r.eval.row.av_points});
      } catch (const std::exception& ex) {
        out.failures.push_back(name + ": " + ex.what());
        log("point " + name + " failed: " + ex.what());
      }
    }
    curve.min_pn = minimal_pn(curve.points, cfg.asr_threshold);
    out.curves.push_back(std::move(curve));
  }
  write_text(root / "report.csv", report_csv(out.rows));
  write_text(root / "curves.svg", curves_svg(out.curves));
  write_text(root / "sweep.json", sweep_summary_text(out, cfg.asr_threshold));
  if (!cfg.corpus.manifest.empty()) {
    inv.external[cfg.corpus.manifest] = hex64(dataset_hash(load_corpus(root / cfg.corpus.manifest)));
  }
  seal_run(root, inv);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out.failures.empty()) {
    throw StageError(kind, std::to_string(out.failures.size()) + " point(s) failed; first: " + out.failures.front());
  }
  return out;
}

inline SweepOutcome cmd_sweep(const ExperimentConfig& cfg, const fs::path& root, Lab& lab) {
  return run_sweep(cfg, {cfg.trigger.spec.target_emotion}, root, lab, "sweep");
}

inline SweepOutcome cmd_ablate(const ExperimentConfig& cfg, const fs::path& root, Lab& lab) {
  return run_sweep(cfg, cfg.ablation_emotions, root, lab, "ablate");
}

// ---- verification ----

struct VerifyResult {
  bool ok = true;
  std::vector<std::string> problems;
  void fail(const std::string& p) {
    ok = false;
    if (std::find(problems.begin(), problems.end(), p) == problems.end()) problems.push_back(p);
  }
};

inline bool numbers_match(const std::string& a, const std::string& b, double tol) {
  if (a == b) return true;
  try {
    std::size_t ia = 0, ib = 0;
    const double x = std::stod(a, &ia), y = std::stod(b, &ib);
    if (ia != a.size() || ib != b.size()) return false;
    if (std::isnan(x) || std::isnan(y)) return std::isnan(x) && std::isnan(y);
    if (std::isinf(x) || std::isinf(y)) return x == y;
    return std::abs(x - y) <= tol;
  } catch (const std::exception&) {
    return false;
  }
}

// Compares stored and re-derived report rows column by column; the
// timestamp column is excluded.
inline void compare_reports(const std::string& stored_text, const std::vector<ReportRow>& derived, const std::string& where,
                            VerifyResult& v) {
  std::vector<std::map<std::string, std::string>> stored;
  try {
    stored = parse_report_csv(stored_text);
  } catch (const std::exception& e) {
    v.fail(where + ": report.csv unreadable: " + e.what());
    return;
  }
  if (stored.size() != derived.size()) {
    v.fail(where + ": report.csv has " + std::to_string(stored.size()) + " rows, expected " +
           std::to_string(derived.size()));
    return;
  }
  const auto& cols = report_columns();
  for (std::size_t r = 0; r < derived.size(); ++r) {
    const auto fields = report_fields(derived[r]);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (cols[c] == "timestamp") continue;
      const auto it = stored[r].find(cols[c]);
      if (it == stored[r].end()) {
        v.fail(where + ": report.csv lacks column " + cols[c]);
        continue;
      }
      if (!numbers_match(it->second, fields[c], 1e-9)) {
        v.fail(where + ": report.csv column " + cols[c] + " row " + std::to_string(r + 1) + " is " + it->second +
               ", re-derived " + fields[c]);
      }
    }
  }
}

inline void check_inventory(const fs::path& dir, const Inventory& inv, VerifyResult& v) {
  std::set<std::string> excluded(inv.subruns.begin(), inv.subruns.end());
  const auto now = hash_tree(dir, excluded);
  for (const auto& [f, h] : inv.files) {
    auto it = now.find(f);
    if (it == now.end()) {
      v.fail("inventory diff: missing " + f);
    } else if (it->second != h) {
      v.fail("inventory diff: changed " + f);
    }
  }
  for (const auto& [f, h] : now) {
    if (!inv.files.count(f)) v.fail("inventory diff: unexpected " + f);
  }
}

inline bool required_files(const fs::path& dir, const std::vector<std::string>& names, VerifyResult& v) {
  bool all = true;
  for (const auto& n : names) {
    if (!fs::exists(dir / n)) {
      v.fail("inventory diff: missing " + n);
      all = false;
    }
  }
  return all;
}

// Checks the corpus against the config: synthesized corpora are regenerated,
// external ones compared with the recorded dataset hash.
inline std::optional<CorpusSource> verify_corpus(const ExperimentConfig& cfg, const fs::path& dir, const Inventory& inv,
                                                 VerifyResult& v) {
  CorpusSource c;
  try {
    if (cfg.corpus.manifest.empty()) {
      c.manifest = fs::absolute(dir / "corpus" / "manifest.jsonl").lexically_normal();
      c.items = load_corpus(c.manifest);
      const auto regenerated = synthesize_corpus(cfg.corpus);
      if (dataset_hash(regenerated) != dataset_hash(c.items)) v.fail("corpus does not match its regenerated version");
      std::vector<ManifestEntry> entries;
      for (const auto& u : regenerated) {
        entries.push_back({u.id, "wav/" + u.id + ".wav", u.class_label, u.emotion, u.source, u.poisoned});
      }
      if (manifest_text(entries) != read_text(c.manifest)) v.fail("corpus manifest hash does not match the config");
    } else {
      c.manifest = fs::absolute(dir / cfg.corpus.manifest).lexically_normal();
      c.items = load_corpus(c.manifest);
      auto it = inv.external.find(cfg.corpus.manifest);
      if (it == inv.external.end()) {
        v.fail("inventory diff: no dataset hash recorded for " + cfg.corpus.manifest);
      } else if (it->second != hex64(dataset_hash(c.items))) {
        v.fail("dataset hash of " + cfg.corpus.manifest + " changed");
      }
    }
  } catch (const std::exception& e) {
    v.fail(std::string("corpus: ") + e.what());
    return std::nullopt;
  }
  return c;
}

inline VerifyResult verify_run(const fs::path& dir, Lab& lab);

inline void verify_attack(const fs::path& dir, const ExperimentConfig& cfg, const Inventory& inv, Lab& lab,
                          VerifyResult& v) {
  if (!required_files(dir, {"ser/ser_model.txt", "models/baseline.model", "models/backdoored.model", "report.csv",
                            "poison/backdoor_manifest.jsonl", "partitions.json", "asr_breakdown.csv"},
                      v)) {
    return;
  }
  const auto corpus = verify_corpus(cfg, dir, inv, v);
  if (!corpus) return;
  try {
    const auto ser = load_ser(dir / "ser" / "ser_model.txt");
    // An external converter exchanges files outside the sealed directory.
    const auto scratch = fs::temp_directory_path() / ("emoattack-verify-" + hex64(fnv1a(fs::absolute(dir).string())));
    const auto p = derive_partitions(cfg, corpus->items, ser, scratch, lab.jobs);
    if (partitions_text(p) != read_text(dir / "partitions.json")) v.fail("partitions.json differs from re-derivation");
    const auto stored_backdoor = load_corpus(dir / "poison" / "backdoor_manifest.jsonl");
    if (dataset_hash(stored_backdoor) != dataset_hash(p.backdoor)) v.fail("backdoor manifest hash differs from re-derivation");
    if (backdoor_manifest(p, *corpus, dir / "poison") != read_text(dir / "poison" / "backdoor_manifest.jsonl")) {
      v.fail("backdoor manifest text differs from re-derivation");
    }
    if (poison_records_csv(p.poison.records) != read_text(dir / "poison_records.csv")) {
      v.fail("poison_records.csv differs from re-derivation");
    }
    const auto baseline = load_classifier(dir / "models" / "baseline.model");
    const auto backdoored = load_classifier(dir / "models" / "backdoored.model");
    const auto ev = evaluate_attack(cfg, p, ser, baseline, backdoored, lab, scratch);
    compare_reports(read_text(dir / "report.csv"), {ev.row}, dir.filename().string(), v);
    if (asr_breakdown_csv(ev.asr) != read_text(dir / "asr_breakdown.csv")) v.fail("asr_breakdown.csv differs");
  } catch (const std::exception& e) {
    v.fail(std::string("re-derivation failed: ") + e.what());
  }
}

inline void verify_sweep(const fs::path& dir, const ExperimentConfig& cfg, const Inventory& inv, Lab& lab,
                         VerifyResult& v) {
  if (!required_files(dir, {"report.csv", "curves.svg", "sweep.json"}, v)) return;
  if (cfg.corpus.manifest.empty()) verify_corpus(cfg, dir, inv, v);
  std::vector<ReportRow> rows;
  std::map<Emotion, SweepResult> curves;
  std::vector<Emotion> order;
  for (const auto& sub : inv.subruns) {
    const auto sub_dir = dir / sub;
    auto r = verify_run(sub_dir, lab);
    for (const auto& p : r.problems) v.fail(sub + ": " + p);
    if (!fs::exists(sub_dir / "report.csv")) continue;
    try {
      const auto parsed = parse_report_csv(read_text(sub_dir / "report.csv"));
      const auto sub_cfg = load_config(sub_dir / "config.json");
      for (const auto& m : parsed) {
        ReportRow row;
        row.run_id = m.at("run_id");
        row.trigger_kind = parse_trigger_kind(m.at("trigger_kind"));
        row.target_emotion = parse_emotion(m.at("target_emotion"));
        row.y_t = std::stoi(m.at("y_t"));
        row.pn = std::stoul(m.at("pn"));
        row.asr = std::stod(m.at("asr"));
        row.av_points = std::stod(m.at("av_points"));
        row.clean_acc_baseline = std::stod(m.at("clean_acc_baseline"));
        row.clean_acc_backdoored = std::stod(m.at("clean_acc_backdoored"));
        row.micro_f1 = std::stod(m.at("micro_f1"));
        row.macro_f1 = std::stod(m.at("macro_f1"));
        row.lsd = std::stod(m.at("lsd"));
        row.snr_db = std::stod(m.at("snr_db"));
        row.synth_seed = std::stoull(m.at("synth_seed"));
        row.split_seed = std::stoull(m.at("split_seed"));
        row.select_seed = std::stoull(m.at("select_seed"));
        row.trigger_seed = std::stoull(m.at("trigger_seed"));
        row.init_seed = std::stoull(m.at("init_seed"));
        row.shuffle_seed = std::stoull(m.at("shuffle_seed"));
        rows.push_back(row);
        const auto e = sub_cfg.trigger.spec.target_emotion;
        if (!curves.count(e)) order.push_back(e);
        curves[e].target_emotion = e;
        curves[e].points.push_back({row.pn, row.asr, row.av_points});
      }
    } catch (const std::exception& e) {
      v.fail(sub + ": cannot read report: " + e.what());
    }
  }
  compare_reports(read_text(dir / "report.csv"), rows, dir.filename().string(), v);
  std::vector<SweepResult> ordered;
  for (auto e : order) {
    auto c = curves[e];
    c.min_pn = minimal_pn(c.points, cfg.asr_threshold);
    ordered.push_back(c);
  }
  if (curves_svg(ordered) != read_text(dir / "curves.svg")) v.fail("curves.svg differs from the point reports");
  try {
    const auto j = nlohmann::json::parse(read_text(dir / "sweep.json"));
    if (!j.at("failures").empty()) v.fail("sweep recorded failed points");
  } catch (const std::exception& e) {
    v.fail(std::string("sweep.json unreadable: ") + e.what());
  }
}

inline VerifyResult verify_run(const fs::path& dir, Lab& lab) {
  VerifyResult v;
  if (!fs::exists(dir / "DONE")) {
    v.fail("DONE marker missing; the run is incomplete");
    return v;
  }
  Inventory inv;
  try {
    inv = read_inventory(dir);
  } catch (const std::exception& e) {
    v.fail(std::string("inventory diff: ") + e.what());
    return v;
  }
  check_inventory(dir, inv, v);
  ExperimentConfig cfg;
  try {
    cfg = load_config(dir / "config.json");
  } catch (const std::exception& e) {
    v.fail(std::string("config.json: ") + e.what());
    return v;
  }
  if (inv.kind == "attack") {
    verify_attack(dir, cfg, inv, lab, v);
  } else if (inv.kind == "sweep" || inv.kind == "ablate") {
    verify_sweep(dir, cfg, inv, lab, v);
  } else if (inv.kind == "gen-corpus") {
    verify_corpus(cfg, dir, inv, v);
  } else if (inv.kind == "train-ser") {
    if (required_files(dir, {"ser/ser_model.txt", "ser_report.csv"}, v)) {
      if (const auto corpus = verify_corpus(cfg, dir, inv, v)) {
        try {
          const auto split = split_dataset(corpus->items, cfg.split.test_fraction, cfg.split.seed);
          const auto report = ser_test_report(load_ser(dir / "ser" / "ser_model.txt"), split.test);
          if (ser_report_text(report) != read_text(dir / "ser_report.csv")) v.fail("ser_report.csv differs");
        } catch (const std::exception& e) {
          v.fail(std::string("re-derivation failed: ") + e.what());
        }
      }
    }
  } else {
    v.fail("unknown run kind '" + inv.kind + "'");
  }
  return v;
}

// ---- report ----

// Human-readable summary of a run or sweep directory.
inline std::string cmd_report(const fs::path& dir) {
  const auto path = dir / "report.csv";
  if (!fs::exists(path)) throw IoError("no report.csv in " + dir.string());
  const auto rows = parse_report_csv(read_text(path));
  std::ostringstream os;
  os << "asr counts only triggered test inputs whose original label differs from y_t\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-40s %6s %8s %8s %8s %8s %8s\n", "run_id", "pn", "asr", "av", "acc_base", "acc_bd",
                "ser_f1");
  os << buf;
  std::map<std::string, SweepResult> curves;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-40s %6s %8.4f %8.3f %8.4f %8.4f %8.4f\n", r.at("run_id").c_str(),
                  r.at("pn").c_str(), std::stod(r.at("asr")), std::stod(r.at("av_points")),
                  std::stod(r.at("clean_acc_baseline")), std::stod(r.at("clean_acc_backdoored")),
                  std::stod(r.at("micro_f1")));
    os << buf;
    auto& c = curves[r.at("target_emotion")];
    c.target_emotion = parse_emotion(r.at("target_emotion"));
    c.points.push_back({std::stoul(r.at("pn")), std::stod(r.at("asr")), std::stod(r.at("av_points"))});
  }
  double threshold = 0.99;
  if (fs::exists(dir / "config.json")) threshold = load_config(dir / "config.json").asr_threshold;
  for (auto& [name, c] : curves) {
    if (c.points.size() < 2) continue;
    c.min_pn = minimal_pn(c.points, threshold);
    std::snprintf(buf, sizeof buf, "%s: spearman(pn, asr) %.4f, min pn with asr >= %.2f: %s\n", name.c_str(),
                  c.rank_correlation(), threshold, c.min_pn ? std::to_string(*c.min_pn).c_str() : "none");
    os << buf;
  }
  return os.str();
}

}  // namespace emoattack
