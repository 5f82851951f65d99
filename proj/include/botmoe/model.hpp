#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "botmoe/encoders.hpp"
#include "botmoe/fusion.hpp"
#include "botmoe/moe.hpp"

namespace botmoe {

enum class MoeMode { sparse, mlp, none };
enum class FusionMode { transformer, mean, max, min, mlp };

std::string_view to_string(MoeMode m);
std::string_view to_string(FusionMode m);

struct ModelConfig {
  std::size_t hidden = 256;
  std::array<std::size_t, kNumModalities> experts{2, 2, 3};  // graph, text, metadata
  std::size_t top_k = 2;  // clamped to the expert count; 0 activates every expert
  std::size_t heads = 2;
  double dropout = 0.3;
  std::size_t gnn_layers = 2;
  std::size_t pool_kernel = 1;
  std::size_t conv_size = 2;
  std::size_t ffn_dim = 0;  // 0 means hidden
  bool noisy_gating = true;
  MoeMode moe = MoeMode::sparse;
  FusionMode fusion = FusionMode::transformer;
  std::array<bool, kNumModalities> enabled{true, true, true};

  std::size_t k_for(Modality m) const;
  bool uses(Modality m) const { return enabled[static_cast<std::size_t>(m)]; }
  void validate() const;

  /// Flat key=value view; apply() returns false for keys it does not own
  /// and throws on malformed values.
  std::vector<std::pair<std::string, std::string>> entries() const;
  bool apply(std::string_view key, std::string_view value);

  bool operator==(const ModelConfig&) const = default;
};

struct ModelOutput {
  Tensor logits;                                       // [n, 2]
  std::array<Tensor, kNumModalities> embeddings;       // x^g, x^t, x^m (undefined when disabled)
  std::array<Tensor, kNumModalities> tokens;           // post-MoE z per modality
  std::array<std::optional<MoeOutput>, kNumModalities> routing;
  Tensor attention;                                    // [n, C, 3, 3] with transformer fusion
  Tensor consistency;                                  // [n, 4] with transformer fusion
};

/// Encoders, per-modality MoE layers, expert fusion and the classifier.
class BotMoE {
 public:
  BotMoE(const ModelConfig& config, std::size_t embed_dim, std::uint64_t seed);

  ModelOutput forward(const InputFeatures& in, const ForwardContext& ctx) const;
  ParamList parameters() const;

  const ModelConfig& config() const { return config_; }
  std::size_t embed_dim() const { return embed_dim_; }

 private:
  Tensor encode(Modality m, const InputFeatures& in, const ForwardContext& ctx) const;

  ModelConfig config_;
  std::size_t embed_dim_;
  GraphEncoder graph_;
  TextEncoder text_;
  MetadataEncoder metadata_;
  std::array<MoeLayer, kNumModalities> moe_;
  std::array<Mlp2, kNumModalities> mlp_;
  FusionTransformer transformer_;
  ConsistencyHead consistency_;
  Mlp2 fusion_mlp_;
  ClassifierHead classifier_;
};

}  // namespace botmoe
