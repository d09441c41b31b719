#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emoattack/emotion.hpp"
#include "emoattack/errors.hpp"
#include "emoattack/wav_io.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

// One JSON object per line: {id, path, class_label, emotion_label, source}
// plus "poison": true on poisoned members. Paths are relative to the
// manifest's directory.
struct ManifestEntry {
  std::string id;
  std::string path;
  int class_label = 0;
  Emotion emotion = Emotion::Neutral;
  UtteranceSource source = UtteranceSource::Synthetic;
  bool poison = false;
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string manifest_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["path"] = e.path;
  j["class_label"] = e.class_label;
  j["emotion_label"] = std::string(to_string(e.emotion));
  j["source"] = to_string(e.source);
  if (e.poison) j["poison"] = true;
  return j.dump();
}

inline ManifestEntry parse_manifest_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: bad JSON: ") + ex.what());
  }
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    e.class_label = j.at("class_label").get<int>();
    e.emotion = parse_emotion(j.at("emotion_label").get<std::string>());
    const auto src = j.at("source").get<std::string>();
    if (src == "synthetic") {
      e.source = UtteranceSource::Synthetic;
    } else if (src == "file") {
      e.source = UtteranceSource::File;
    } else {
      throw FormatError("manifest: unknown source '" + src + "'");
    }
    e.poison = j.value("poison", false);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  } catch (const DomainError& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
  return e;
}

inline std::string manifest_text(std::vector<ManifestEntry> entries) {
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::string out;
  for (const auto& e : entries) out += manifest_line(e) + "\n";
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_manifest_line(line));
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a(read_text(path)); }

// Writes <dir>/<subdir>/<id>.wav for every utterance and <dir>/<name>. Returns
// the manifest text.
inline std::string write_corpus(const std::vector<Utterance>& items, const std::filesystem::path& dir,
                                const std::string& subdir, const std::string& name) {
  std::error_code ec;
  std::filesystem::create_directories(dir / subdir, ec);
  if (ec) throw IoError("cannot create " + (dir / subdir).string());
  std::vector<ManifestEntry> entries;
  entries.reserve(items.size());
  for (const auto& u : items) {
    ManifestEntry e{u.id, subdir + "/" + u.id + ".wav", u.class_label, u.emotion, u.source, u.poisoned};
    write_wav(u.waveform, dir / e.path);
    entries.push_back(std::move(e));
  }
  auto text = manifest_text(std::move(entries));
  write_text(dir / name, text);
  return text;
}

inline std::vector<Utterance> load_corpus(const std::filesystem::path& manifest_path) {
  const auto base = manifest_path.parent_path();
  std::vector<Utterance> out;
  for (const auto& e : read_manifest(manifest_path)) {
    Utterance u;
    u.id = e.id;
    u.waveform = read_wav(base / e.path);
    u.class_label = e.class_label;
    u.emotion = e.emotion;
    u.source = e.source;
    u.poisoned = e.poison;
    out.push_back(std::move(u));
  }
  return out;
}

// Order-insensitive content hash of a dataset: ids, labels, flags and
// waveform checksums.
inline std::uint64_t dataset_hash(const std::vector<Utterance>& items) {
  std::vector<std::string> lines;
  lines.reserve(items.size());
  for (const auto& u : items) {
    lines.push_back(u.id + "|" + std::to_string(u.class_label) + "|" + std::string(to_string(u.emotion)) + "|" +
                    (u.poisoned ? "p" : "c") + "|" + hex64(checksum(u.waveform)));
  }
  std::sort(lines.begin(), lines.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& l : lines) h = fnv1a(l + "\n", h);
  return h;
}

}  // namespace emoattack
