#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "emoattack/experiment.hpp"

using namespace emoattack;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed_override;
  int jobs = 1;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed_override) cfg.override_seeds(*g.seed_override);
  if (!g.out.empty()) cfg.output_dir = g.out;
  cfg.validate();
  return cfg;
}

void print_sweep(const SweepOutcome& s) {
  for (const auto& c : s.curves) {
    std::cout << to_string(c.target_emotion) << ":";
    for (const auto& p : c.points) std::cout << " pn=" << p.pn << " asr=" << format_number(p.asr);
    std::cout << " | spearman " << format_number(c.rank_correlation()) << " min_pn "
              << (c.min_pn ? std::to_string(*c.min_pn) : "none") << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Emotion-conversion backdoor attack toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--out", g.out, "Output directory (overrides output_dir)");
  app.add_option("--seed-override", g.seed_override, "Set every seed in the config to this value");
  app.add_option("--jobs", g.jobs, "Worker threads for feature extraction and triggering")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-corpus", "Synthesize the corpus and its manifest");
  auto* ser = app.add_subcommand("train-ser", "Train and score the emotion recognizer");
  auto* attack = app.add_subcommand("attack", "Run the full poisoning attack once");
  auto* sweep = app.add_subcommand("sweep", "Attack once per pn_list entry");
  auto* ablate = app.add_subcommand("ablate", "Sweep once per target emotion");
  auto* verify = app.add_subcommand("verify", "Check a run directory against its config and checkpoints");
  auto* report = app.add_subcommand("report", "Summarize a run or sweep directory");
  std::string dir;
  verify->add_option("dir", dir, "Run directory")->required();
  report->add_option("dir", dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    Lab lab;
    lab.jobs = g.jobs;
    lab.echo = &std::cerr;
    if (*verify) {
      const auto v = verify_run(dir, lab);
      for (const auto& p : v.problems) std::cout << "FAIL " << p << "\n";
      std::cout << (v.ok ? "verify: pass" : "verify: fail") << "\n";
      return v.ok ? 0 : 1;
    }
    if (*report) {
      std::cout << cmd_report(dir);
      return 0;
    }
    const auto cfg = resolve_config(g);
    const std::filesystem::path out = cfg.output_dir;
    if (*gen) {
      std::cout << cmd_gen_corpus(cfg, out);
    } else if (*ser) {
      const auto r = cmd_train_ser(cfg, out, lab);
      std::cout << ser_report_text(r);
    } else if (*attack) {
      const auto r = run_attack(cfg, out, lab);
      std::cout << report_csv({r.eval.row});
    } else if (*sweep) {
      print_sweep(cmd_sweep(cfg, out, lab));
    } else if (*ablate) {
      print_sweep(cmd_ablate(cfg, out, lab));
    }
    std::cout << "output: " << out.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
