#include <cstdio>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "botmoe/harness.hpp"

using namespace botmoe;

namespace {

void print_summary(const StudyReport& report) {
  for (const auto& a : report.aggregate()) {
    std::printf("%-20s %-36s n=%zu acc=%.4f+-%.4f f1=%.4f+-%.4f\n", a.variant.c_str(), a.setting.c_str(), a.n,
                a.accuracy_mean, a.accuracy_std, a.f1_mean, a.f1_std);
  }
  for (const auto& s : report.statistics) {
    if (s.seed) continue;
    std::printf("%-20s %-36s %.6f\n", s.name.c_str(), s.setting.c_str(), s.value);
  }
  for (const auto& f : report.failures) {
    std::fprintf(stderr, "failed: %s %s seed %llu: %s\n", f.variant.c_str(), f.setting.c_str(),
                 static_cast<unsigned long long>(f.seed), f.error.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BotMoE: community-aware mixture-of-experts bot detection"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", seeds, fractions, modalities, checkpoint;
  std::size_t threads = 0;
  bool have_threads = false;

  const std::map<std::string, std::string> commands{
      {"train", "train and evaluate, write metrics.csv, study.csv and checkpoint.bin"},
      {"manipulate", "feature and edge manipulation robustness study"},
      {"ablate", "architecture ablations"},
      {"sweep", "grid over experts per modality"},
      {"efficiency", "retrain on subsampled labels, edges or features"},
      {"communities", "export per-user gate assignments and MoE outputs"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--seeds", seeds, "comma-separated seeds");
    sub->add_option("--fractions", fractions, "comma-separated fractions in [0, 1]");
    sub->add_option("--modalities", modalities, "comma-separated subset of graph,text,metadata");
    sub->add_option("--threads", threads, "worker threads (0: all cores)")->each([&](const std::string&) {
      have_threads = true;
    });
    if (name == "communities") sub->add_option("--checkpoint", checkpoint, "export this model instead of training");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (!seeds.empty()) cfg.seeds = parse_seed_list(seeds);
    if (!fractions.empty()) cfg.fractions = parse_fraction_list(fractions);
    if (!modalities.empty()) cfg.modalities = parse_modality_list(modalities);
    if (have_threads) cfg.threads = threads;
    cfg.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  StudyReport report;
  try {
    if (command == "train") report = cmd_train(cfg, out_dir);
    else if (command == "manipulate") report = cmd_manipulate(cfg, out_dir);
    else if (command == "ablate") report = cmd_ablate(cfg, out_dir);
    else if (command == "sweep") report = cmd_sweep(cfg, out_dir);
    else if (command == "efficiency") report = cmd_efficiency(cfg, out_dir);
    else
      report = cmd_communities(cfg, out_dir,
                               checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint));
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  print_summary(report);
  return report.failures.empty() ? 0 : 1;
}
