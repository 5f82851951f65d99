#include "botmoe/encoders.hpp"

#include <stdexcept>

namespace botmoe {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::graph: return "graph";
    case Modality::text: return "text";
    case Modality::metadata: return "metadata";
  }
  return "?";
}

std::optional<Modality> parse_modality(std::string_view text) {
  if (text == "graph") return Modality::graph;
  if (text == "text") return Modality::text;
  if (text == "metadata") return Modality::metadata;
  return std::nullopt;
}

MetadataEncoder::MetadataEncoder(std::size_t hidden, Rng& rng)
    : mlp(kNumNumeric + kNumCategorical, hidden, hidden, rng) {}

Tensor MetadataEncoder::encode(const InputFeatures& in, const ForwardContext& ctx) const {
  return mlp.forward(concat({in.numeric, in.categorical}, 1), ctx);
}

void MetadataEncoder::collect(const std::string& prefix, ParamList& out) const { mlp.collect(prefix + ".mlp", out); }

TextEncoder::TextEncoder(std::size_t embed_dim, std::size_t hidden, Rng& rng) : mlp(2 * embed_dim, hidden, hidden, rng) {}

Tensor TextEncoder::encode(const InputFeatures& in, const ForwardContext& ctx) const {
  return mlp.forward(concat({in.description, in.tweet_mean}, 1), ctx);
}

void TextEncoder::collect(const std::string& prefix, ParamList& out) const { mlp.collect(prefix + ".mlp", out); }

RgcnLayer::RgcnLayer(std::size_t dim, Rng& rng) : self(dim, dim, rng) {
  for (auto& w : relation) w = glorot(dim, dim, rng);
}

Tensor RgcnLayer::forward(const Tensor& h, const std::array<SparseMatrix, kNumRelations>& aggregators,
                          bool activation_enabled) const {
  Tensor out = self.forward(h);
  for (std::size_t r = 0; r < kNumRelations; ++r) {
    out = add(out, matmul(sparse_matmul(aggregators[r], h), relation[r]));
  }
  return activation_enabled ? leaky_relu(out) : out;
}

void RgcnLayer::collect(const std::string& prefix, ParamList& out) const {
  self.collect(prefix + ".self", out);
  for (std::size_t r = 0; r < kNumRelations; ++r) {
    out.push_back({prefix + "." + std::string(to_string(static_cast<Relation>(r))), relation[r], true});
  }
}

GraphEncoder::GraphEncoder(std::size_t embed_dim, std::size_t hidden, std::size_t n_layers, Rng& rng) {
  if (hidden % 4 != 0) throw std::invalid_argument("GraphEncoder: hidden size must be divisible by 4");
  if (n_layers == 0) throw std::invalid_argument("GraphEncoder: need at least one layer");
  projector = NodeFeatureProjector(embed_dim, hidden / 4, rng);
  for (std::size_t l = 0; l < n_layers; ++l) layers.emplace_back(hidden, rng);
}

Tensor GraphEncoder::encode(const InputFeatures& in, const ForwardContext& ctx) const {
  Tensor h = projector.forward(in);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const bool last = l + 1 == layers.size();
    h = layers[l].forward(h, in.aggregators, !last);
    if (!last && ctx.training && ctx.dropout > 0.0) h = dropout(h, ctx.dropout, true, ctx.generator());
  }
  return h;
}

void GraphEncoder::collect(const std::string& prefix, ParamList& out) const {
  projector.collect(prefix + ".input", out);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".rgcn" + std::to_string(l), out);
}

}  // namespace botmoe
