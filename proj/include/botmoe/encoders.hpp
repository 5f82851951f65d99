#pragma once

#include <vector>

#include "botmoe/dataset.hpp"
#include "botmoe/nn.hpp"

namespace botmoe {

enum class Modality { graph = 0, text = 1, metadata = 2 };
inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kModalities{Modality::graph, Modality::text, Modality::metadata};

std::string_view to_string(Modality m);
std::optional<Modality> parse_modality(std::string_view text);

/// x^m: two-layer MLP over the 5 z-scored numeric + 3 categorical values.
struct MetadataEncoder {
  Mlp2 mlp;

  MetadataEncoder() = default;
  MetadataEncoder(std::size_t hidden, Rng& rng);

  Tensor encode(const InputFeatures& in, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// x^t: two-layer MLP over [description embedding, mean tweet embedding].
struct TextEncoder {
  Mlp2 mlp;

  TextEncoder() = default;
  TextEncoder(std::size_t embed_dim, std::size_t hidden, Rng& rng);

  Tensor encode(const InputFeatures& in, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// One relational message-passing round:
///   h'_i = act(W_0 h_i + b + sum_r mean_{j in N_r(i)} W_r h_j)
/// Isolated nodes keep only the self term.
struct RgcnLayer {
  Linear self;
  std::array<Tensor, kNumRelations> relation;  // [d, d] each

  RgcnLayer() = default;
  RgcnLayer(std::size_t dim, Rng& rng);

  Tensor forward(const Tensor& h, const std::array<SparseMatrix, kNumRelations>& aggregators,
                 bool activation_enabled) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// x^g: projected four-source node features followed by `layers` RGCN
/// rounds (leaky-ReLU on all but the last, dropout between rounds).
struct GraphEncoder {
  NodeFeatureProjector projector;
  std::vector<RgcnLayer> layers;

  GraphEncoder() = default;
  GraphEncoder(std::size_t embed_dim, std::size_t hidden, std::size_t n_layers, Rng& rng);

  Tensor encode(const InputFeatures& in, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace botmoe
