#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "botmoe/datagen.hpp"
#include "botmoe/training.hpp"

namespace botmoe {

enum class DataSource { synthetic, files };
enum class EfficiencyMode { labels, edges, features };

std::string_view to_string(EfficiencyMode m);

/// Everything a study needs. Read from a flat `key = value` file; `#`
/// starts a comment. Keys are listed in README.md.
struct RunConfig {
  DataSource source = DataSource::synthetic;
  SynthConfig synth;
  bool vary_world = true;  // world seed = synth.seed + run seed
  std::filesystem::path users_file, edges_file, splits_file;

  ModelConfig model;
  LossConfig loss;
  AdamConfig adam;
  std::size_t max_epochs = 400;
  std::size_t batch_size = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t threads = 0;  // 0: hardware concurrency

  std::vector<double> fractions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<Modality> modalities{Modality::graph, Modality::text, Modality::metadata};
  std::vector<std::size_t> sweep_graph{1, 2, 3}, sweep_text{1, 2, 3}, sweep_metadata{1, 2, 3};
  EfficiencyMode efficiency_mode = EfficiencyMode::labels;
  std::vector<std::string> ablations;  // empty: every variant

  void validate() const;
  /// Applies one key; throws std::invalid_argument naming unknown keys.
  void set(std::string_view key, std::string_view value);
  /// Canonical dump, parseable by parse_run_config.
  std::string dump() const;
};

RunConfig parse_run_config(std::istream& in, const std::string& source_name = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

std::vector<std::uint64_t> parse_seed_list(std::string_view text);
std::vector<double> parse_fraction_list(std::string_view text);
std::vector<Modality> parse_modality_list(std::string_view text);

/// Normalized dataset for one run seed.
Dataset build_dataset(const RunConfig& cfg, std::uint64_t seed);
TrainConfig make_train_config(const RunConfig& cfg, const ModelConfig& model, std::uint64_t seed);

struct StudyRow {
  std::string variant;
  std::string setting;
  std::uint64_t seed = 0;
  Metrics metrics;
};

struct StudyFailure {
  std::string variant;
  std::string setting;
  std::uint64_t seed = 0;
  std::string error;
};

struct Statistic {
  std::string name;
  std::string setting;
  std::optional<std::uint64_t> seed;
  double value = 0.0;
};

struct Aggregate {
  std::string variant;
  std::string setting;
  std::size_t n = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double f1_mean = 0.0, f1_std = 0.0;
};

struct StudyReport {
  std::string study;
  std::vector<StudyRow> rows;
  std::vector<StudyFailure> failures;
  std::vector<Statistic> statistics;

  /// Mean and sample standard deviation per (variant, setting), in order of
  /// first appearance, over completed seeds only.
  std::vector<Aggregate> aggregate() const;
  std::optional<Aggregate> find(std::string_view variant, std::string_view setting = "") const;
};

void write_study_csv(std::ostream& os, const StudyReport& report);

/// Runs job(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Best relabeling accuracy of `assigned` against `truth` (Hungarian
/// matching on the contingency table).
double assignment_purity(const std::vector<std::size_t>& assigned, const std::vector<std::size_t>& truth);

/// Rows projected onto the top two principal components ([n, 2], row-major).
std::vector<double> pca2(const std::vector<double>& rows, std::size_t n, std::size_t dim);

std::string setting_of(Modality m, double fraction);

/// Named model variants of the ablation study, full model first.
std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const ModelConfig& base);

/// Single-modality baselines used by the manipulation study.
ModelConfig only(const ModelConfig& base, Modality m);

// Study commands. Each writes its files under `out` (created if needed).
StudyReport cmd_train(const RunConfig& cfg, const std::filesystem::path& out);
StudyReport cmd_manipulate(const RunConfig& cfg, const std::filesystem::path& out);
StudyReport cmd_ablate(const RunConfig& cfg, const std::filesystem::path& out);
StudyReport cmd_sweep(const RunConfig& cfg, const std::filesystem::path& out);
StudyReport cmd_efficiency(const RunConfig& cfg, const std::filesystem::path& out);
/// Trains per seed unless `checkpoint` is given, in which case that model
/// is exported against the first seed's dataset.
StudyReport cmd_communities(const RunConfig& cfg, const std::filesystem::path& out,
                            const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

}  // namespace botmoe
