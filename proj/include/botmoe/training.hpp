#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "botmoe/dataset.hpp"
#include "botmoe/model.hpp"

namespace botmoe {

struct LossConfig {
  double l2 = 1e-6;       // lambda_1
  double balance = 1e-2;  // lambda_2
  double w_importance = 1.0;
  double w_load = 1.0;

  void validate() const;
};

struct LossParts {
  Tensor total;
  double cross_entropy = 0.0;
  double l2 = 0.0;  // unscaled sum of squares
  std::array<double, kNumModalities> balance{};  // unscaled BL per modality
};

/// Sum of squares over the decayed (weight-matrix) parameters.
double l2_penalty(const ParamList& params);

/// mean CE + l2 * sum w^2 + balance * sum_mod BL_mod. Modalities without
/// stats contribute nothing.
LossParts total_loss(const Tensor& logits, std::span<const int> labels, const ParamList& params,
                     const std::array<std::optional<LoadStats>, kNumModalities>& stats, const LossConfig& cfg);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

/// Bias-corrected Adam update in place; gradients are cleared afterwards.
void adam_step(const ParamList& params, AdamState& state, const AdamConfig& cfg);

/// Confusion counts with bot as the positive class.
struct Metrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  static Metrics from(std::span<const int> predicted, std::span<const int> truth);
  std::size_t total() const { return tp + fp + fn + tn; }
  double accuracy() const;
  double precision() const;
  double recall() const;
  double f1() const;  // 0 when precision + recall == 0

  bool operator==(const Metrics&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  Metrics train, valid;
  double loss = 0.0;
  double cross_entropy = 0.0;
  double l2 = 0.0;
  std::array<double, kNumModalities> balance{};
  std::array<std::vector<double>, kNumModalities> importance, load, selections;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  AdamConfig adam;
  std::size_t max_epochs = 400;
  std::size_t batch_size = 0;  // 0: full batch over labeled train users
  std::uint64_t seed = 0;
};

struct TrainState {
  BotMoE model;
  AdamState adam;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  Metrics best_valid;
};

struct TrainRun {
  TrainState state;  // parameters restored to the best-validation epoch
  std::vector<EpochLog> log;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Transductive training: message passing over every node, loss on the
/// labeled train users. Deterministic given cfg.seed.
TrainRun train(const Dataset& data, const TrainConfig& cfg);

/// Inference with dropout and gate noise off.
Metrics evaluate(const BotMoE& model, const InputFeatures& in, const Dataset& data, Split split);
Metrics evaluate(const BotMoE& model, const Dataset& data, Split split);

/// Per-epoch rows: seed, epoch, split metrics, loss parts and routing stats.
void write_metrics_header(std::ostream& os, const ModelConfig& cfg);
void write_metrics_rows(std::ostream& os, std::uint64_t seed, const std::vector<EpochLog>& log);

/// Text checkpoint: header, model config as key=value lines, then every
/// parameter as "param <name> <rank> <dims...>" followed by one line of
/// %.17g values.
void save_checkpoint(const std::filesystem::path& path, const BotMoE& model);
BotMoE load_checkpoint(const std::filesystem::path& path);

}  // namespace botmoe
