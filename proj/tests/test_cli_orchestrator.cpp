#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "emoattack/config.hpp"
#include "emoattack/experiment.hpp"

using namespace emoattack;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(EMOATTACK_CLI) + " " + args + " 2>&1";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("emoattack_cli_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

fs::path small_config() {
  const auto path = scratch() / "small.json";
  if (!fs::exists(path)) {
    write_text(path, R"({"corpus": {"classes": 3, "per_class": 20}, "pn": 3, "pn_list": [0, 3],
                         "train": {"epochs": 2}, "ablation_emotions": ["angry", "sad"]})");
  }
  return path;
}

// Shared small attack run, produced once by the CLI.
const fs::path& attack_run() {
  static const fs::path dir = [] {
    const auto d = scratch() / "attack";
    const auto r = run_cli("--config " + q(small_config()) + " --out " + q(d) + " attack");
    EXPECT_EQ(r.code, 0) << r.output;
    return d;
  }();
  return dir;
}

ConfigError config_error_of(const std::string& text) {
  try {
    parse_config(text).validate();
  } catch (const ConfigError& e) {
    return e;
  }
  ADD_FAILURE() << "no ConfigError for " << text;
  return ConfigError("", "");
}

void copy_run(const fs::path& from, const fs::path& to) {
  fs::remove_all(to);
  fs::copy(from, to, fs::copy_options::recursive);
}

}  // namespace

TEST(Config, RoundTripIsLossless) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 50; ++t) {
    ExperimentConfig c;
    c.corpus.classes = 2 + rng() % 20;
    c.corpus.per_class = 1 + rng() % 300;
    c.corpus.seed = rng();
    c.corpus.emotion_mix = {{Emotion::Neutral, 0.3}, {Emotion::Sad, 0.7}};
    c.split.test_fraction = std::uniform_real_distribution<double>(0.01, 0.9)(rng);
    c.split.seed = rng();
    c.ser.lr = std::uniform_real_distribution<double>(1e-4, 1.0)(rng);
    c.selection.any_emotion = rng() % 2;
    c.trigger.spec.kind = static_cast<TriggerKind>(rng() % 5);
    c.trigger.spec.target_emotion = kAllEmotions[rng() % 5];
    c.trigger.spec.presets[2].f0_base_hz = 100.0 + static_cast<double>(rng() % 1000) / 7.0;
    c.trigger.spec.amplitude = 0.3;
    c.trigger.source = t % 3 == 0 ? "infer" : "pool";
    c.trigger.external.command = "convert {dir}";
    c.y_t = static_cast<int>(rng() % c.corpus.classes);
    c.pn = rng() % 100;
    c.pn_list = {1, 5, 9};
    c.ablation_emotions = {Emotion::Surprise};
    c.asr_threshold = 0.95;
    c.train.adam.lr = 3e-4;
    c.train.epochs = 1 + rng() % 99;
    c.train.init_seed = rng();
    c.output_dir = "runs/x" + std::to_string(t);
    const auto text = config_text(c);
    EXPECT_EQ(config_text(parse_config(text)), text);
  }
  EXPECT_EQ(config_text(parse_config("{}")), config_text(ExperimentConfig{}));
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(config_error_of(R"({"corpus": {"bogus": 1}})").field(), "corpus.bogus");
  EXPECT_EQ(config_error_of(R"({"corpus": {"emotion_mix": {"neutral": 0.2, "angry": 0.3}}})").field(),
            "corpus.emotion_mix");
  EXPECT_EQ(config_error_of(R"({"corpus": {"emotion_mix": {"x": 1.0}}})").field(), "corpus.emotion_mix.x");
  EXPECT_EQ(config_error_of(R"({"corpus": {"classes": "ten"}})").field(), "corpus.classes");
  EXPECT_EQ(config_error_of(R"({"pn_list": [0, 20, 10]})").field().rfind("pn_list", 0), 0u);
  EXPECT_EQ(config_error_of(R"({"y_t": 10})").field(), "y_t");
  EXPECT_EQ(config_error_of(R"({"train": {"epochs": 0}})").field(), "train.epochs");
  EXPECT_EQ(config_error_of(R"({"split": {"test_fraction": 1.5}})").field(), "split.test_fraction");
  EXPECT_EQ(config_error_of(R"({"trigger": {"source": "bored"}})").field(), "trigger.source");
  EXPECT_EQ(config_error_of("{not json").field(), "<root>");
  const auto e = config_error_of(R"({"corpus": {"emotion_mix": {"neutral": 0.5}}})");
  EXPECT_NE(std::string(e.what()).find("expected 1"), std::string::npos) << e.what();
}

TEST(Config, OverrideSeedsSetsEverySeed) {
  ExperimentConfig c;
  c.override_seeds(42);
  const auto j = to_json(c);
  EXPECT_EQ(j["corpus"]["seed"], 42);
  EXPECT_EQ(j["split"]["seed"], 42);
  EXPECT_EQ(j["ser"]["seed"], 42);
  EXPECT_EQ(j["selection"]["seed"], 42);
  EXPECT_EQ(j["trigger"]["seed"], 42);
  EXPECT_EQ(j["train"]["init_seed"], 42);
  EXPECT_EQ(j["train"]["shuffle_seed"], 42);
}

TEST(ExitCodes, ConfigIoAndStageFailures) {
  const auto bad = scratch() / "bad.json";
  write_text(bad, R"({"corpus": {"emotion_mix": {"neutral": 0.5}}})");
  auto r = run_cli("--config " + q(bad) + " --out " + q(scratch() / "bad") + " gen-corpus");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("corpus.emotion_mix"), std::string::npos) << r.output;

  r = run_cli("--config " + q(scratch() / "missing.json") + " gen-corpus");
  EXPECT_EQ(r.code, 3) << r.output;

  r = run_cli("no-such-command");
  EXPECT_EQ(r.code, 2) << r.output;
  r = run_cli("--jobs 0 gen-corpus");
  EXPECT_EQ(r.code, 2) << r.output;

  // More poison than the pool can supply fails inside the selection stage.
  const auto greedy = scratch() / "greedy.json";
  write_text(greedy, R"({"corpus": {"classes": 3, "per_class": 20}, "pn": 500, "train": {"epochs": 1}})");
  r = run_cli("--config " + q(greedy) + " --out " + q(scratch() / "greedy") + " attack");
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("[select]"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(scratch() / "greedy" / "DONE"));

  r = run_cli("verify " + q(scratch() / "nowhere"));
  EXPECT_EQ(r.code, 1) << r.output;
}

TEST(GenCorpus, DeterministicAcrossProcesses) {
  const auto a = scratch() / "gen_a", b = scratch() / "gen_b";
  const auto ra = run_cli("--config " + q(small_config()) + " --out " + q(a) + " gen-corpus");
  const auto rb = run_cli("--config " + q(small_config()) + " --out " + q(b) + " gen-corpus");
  ASSERT_EQ(ra.code, 0) << ra.output;
  ASSERT_EQ(rb.code, 0) << rb.output;
  EXPECT_EQ(hash_tree(a / "corpus"), hash_tree(b / "corpus"));
  EXPECT_EQ(read_text(a / "corpus_summary.txt"), read_text(b / "corpus_summary.txt"));
  EXPECT_EQ(run_cli("verify " + q(a)).code, 0);

  // A completed run is never overwritten.
  const auto again = run_cli("--config " + q(small_config()) + " --out " + q(a) + " gen-corpus");
  EXPECT_EQ(again.code, 3) << again.output;

  const auto other = run_cli("--config " + q(small_config()) + " --seed-override 9 --out " +
                             q(scratch() / "gen_c") + " gen-corpus");
  ASSERT_EQ(other.code, 0);
  EXPECT_NE(hash_tree(a / "corpus"), hash_tree(scratch() / "gen_c" / "corpus"));
}

TEST(Attack, WritesArtifactsAndVerifies) {
  const auto& dir = attack_run();
  for (const char* f : {"config.json", "report.csv", "asr_breakdown.csv", "partitions.json", "poison_records.csv",
                        "poison/backdoor_manifest.jsonl", "models/baseline.model", "models/backdoored.model",
                        "ser/ser_model.txt", "corpus/manifest.jsonl", "inventory.json", "log.txt", "DONE"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto rows = parse_report_csv(read_text(dir / "report.csv"));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].at("pn"), "3");
  const auto v = run_cli("verify " + q(dir));
  EXPECT_EQ(v.code, 0) << v.output;
  EXPECT_NE(v.output.find("verify: pass"), std::string::npos);
  const auto rep = run_cli("report " + q(dir));
  EXPECT_EQ(rep.code, 0);
  EXPECT_NE(rep.output.find("asr"), std::string::npos) << rep.output;
}

TEST(Attack, IdenticalAcrossProcesses) {
  const auto& first = attack_run();
  const auto second = scratch() / "attack_again";
  const auto r = run_cli("--config " + q(small_config()) + " --out " + q(second) + " attack");
  ASSERT_EQ(r.code, 0) << r.output;
  auto a = parse_report_csv(read_text(first / "report.csv"))[0];
  auto b = parse_report_csv(read_text(second / "report.csv"))[0];
  a.erase("timestamp");
  b.erase("timestamp");
  EXPECT_EQ(a, b);
  EXPECT_EQ(read_text(first / "models/backdoored.model"), read_text(second / "models/backdoored.model"));
  EXPECT_EQ(read_text(first / "poison/backdoor_manifest.jsonl"), read_text(second / "poison/backdoor_manifest.jsonl"));
}

TEST(Verify, DetectsTamperedReport) {
  const auto dir = scratch() / "tampered_report";
  copy_run(attack_run(), dir);
  const auto text = read_text(dir / "report.csv");
  auto rows = parse_report_csv(text);
  const std::string old_asr = rows[0].at("asr");
  const std::string forged = old_asr == "0.5" ? "0.25" : "0.5";
  const auto pos = text.find("," + old_asr + ",");
  ASSERT_NE(pos, std::string::npos);
  write_text(dir / "report.csv", text.substr(0, pos + 1) + forged + text.substr(pos + 1 + old_asr.size()));
  const auto v = run_cli("verify " + q(dir));
  EXPECT_EQ(v.code, 1) << v.output;
  EXPECT_NE(v.output.find("column asr"), std::string::npos) << v.output;
}

TEST(Verify, DetectsMissingCheckpointAndPoisonEdits) {
  const auto dir = scratch() / "no_model";
  copy_run(attack_run(), dir);
  fs::remove(dir / "models" / "backdoored.model");
  auto v = run_cli("verify " + q(dir));
  EXPECT_EQ(v.code, 1) << v.output;
  EXPECT_NE(v.output.find("inventory diff"), std::string::npos) << v.output;
  EXPECT_NE(v.output.find("models/backdoored.model"), std::string::npos) << v.output;

  const auto dir2 = scratch() / "edited_poison";
  copy_run(attack_run(), dir2);
  fs::path wav;
  for (const auto& e : fs::directory_iterator(dir2 / "poison" / "wav")) wav = e.path();
  ASSERT_FALSE(wav.empty());
  auto w = read_wav(wav).to_double();
  w[8000] = w[8000] > 0 ? -0.5 : 0.5;
  write_wav(Waveform::clamped(w), wav);
  v = run_cli("verify " + q(dir2));
  EXPECT_EQ(v.code, 1) << v.output;
  EXPECT_NE(v.output.find(wav.filename().string()), std::string::npos) << v.output;

  const auto dir3 = scratch() / "not_done";
  copy_run(attack_run(), dir3);
  fs::remove(dir3 / "DONE");
  v = run_cli("verify " + q(dir3));
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.output.find("DONE"), std::string::npos) << v.output;
}

TEST(Sweep, AblateWritesCurvesAndVerifies) {
  const auto dir = scratch() / "ablate";
  const auto r = run_cli("--config " + q(small_config()) + " --out " + q(dir) + " ablate");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "curves.svg"));
  EXPECT_TRUE(fs::exists(dir / "sweep.json"));
  EXPECT_TRUE(fs::exists(dir / "angry" / "pn_3" / "DONE"));
  EXPECT_TRUE(fs::exists(dir / "sad" / "pn_0" / "DONE"));
  EXPECT_EQ(parse_report_csv(read_text(dir / "report.csv")).size(), 4u);
  const auto v = run_cli("verify " + q(dir));
  EXPECT_EQ(v.code, 0) << v.output;
  const auto rep = run_cli("report " + q(dir));
  EXPECT_NE(rep.output.find("spearman"), std::string::npos) << rep.output;
}
