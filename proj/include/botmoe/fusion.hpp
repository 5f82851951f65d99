#pragma once

#include <array>
#include <vector>

#include "botmoe/nn.hpp"

namespace botmoe {

inline constexpr std::size_t kNumTokens = 3;

struct FusionOutput {
  std::array<Tensor, kNumTokens> tokens;  // [B, d] each, in input order
  Tensor attention;                       // [B, C, 3, 3]
};

/// One post-norm transformer encoder layer over the per-user sequence of
/// three modality tokens. No positional encodings.
struct FusionTransformer {
  std::size_t heads = 1;
  Linear query, key, value, output;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;

  FusionTransformer() = default;
  FusionTransformer(std::size_t dim, std::size_t heads, std::size_t ffn_dim, Rng& rng);

  std::size_t dim() const { return query.in_features(); }
  FusionOutput forward(const std::array<Tensor, kNumTokens>& tokens, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// z^con: per head avg-pool then 2-D convolution of the attention map with
/// that head's filter; heads summed, result flattened.
struct ConsistencyHead {
  std::size_t pool_kernel = 1;
  Tensor filters;  // [C, h, w]

  ConsistencyHead() = default;
  ConsistencyHead(std::size_t heads, std::size_t filter_size, std::size_t pool_kernel, Rng& rng);

  std::size_t heads() const { return filters.dim(0); }
  /// Length of z^con for a `tokens` x `tokens` attention map.
  std::size_t output_size(std::size_t tokens = kNumTokens) const;
  Tensor forward(const Tensor& attention) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// y = W_o [z_g, z_t, z_m, z_con] + b_o.
struct ClassifierHead {
  Linear out;

  ClassifierHead() = default;
  ClassifierHead(std::size_t in, Rng& rng) : out(in, 2, rng) {}

  Tensor forward(const std::vector<Tensor>& parts) const { return out.forward(concat(parts, 1)); }
  void collect(const std::string& prefix, ParamList& out_params) const { out.collect(prefix, out_params); }
};

/// Argmax per row of [B, 2] logits; ties go to class 0 (human).
std::vector<int> predict(const Tensor& logits);

}  // namespace botmoe
