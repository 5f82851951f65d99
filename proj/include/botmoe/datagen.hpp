#pragma once

#include <cstdint>
#include <string_view>

#include "botmoe/dataset.hpp"

namespace botmoe {

/// Planted-community social network with bots and humans.
///
/// Each community gets its own offset in metadata and text space and its own
/// bot-vs-human direction (a shared direction bent by `community_twist`), so
/// a detector benefits from knowing which community a user belongs to.
/// Edges follow a stochastic block model; bot-to-bot probabilities are
/// multiplied by `bot_bot_affinity`.
struct SynthConfig {
  std::size_t n_users = 500;
  double bot_fraction = 0.4;
  std::size_t n_communities = 2;
  double metadata_separation = 4.0;  // distance between class means, unit noise
  double text_separation = 4.0;
  std::size_t embed_dim = 16;
  std::size_t tweets_per_user = 4;
  double intra_edge_prob = 0.05;
  double inter_edge_prob = 0.005;
  double bot_bot_affinity = 2.0;
  std::uint64_t seed = 0;

  double train_fraction = 0.6;
  double valid_fraction = 0.2;
  double community_spread = 2.0;  // scale of per-community offsets
  double community_twist = 0.5;   // 0: one bot direction for all communities

  void validate() const;
};

/// Deterministic in `config` (bit-identical output for equal configs).
Dataset generate_world(const SynthConfig& config);

enum class FeatureModality { metadata, text };

FeatureModality parse_feature_modality(std::string_view name);

/// Overwrites the chosen modality of floor(fraction * |test bots|) uniformly
/// chosen test-split bots with features copied from humans drawn uniformly
/// with replacement. Labels, edges and other modalities are untouched.
Dataset manipulate_features(const Dataset& d, FeatureModality modality, double fraction, std::uint64_t seed);
Dataset manipulate_features(const Dataset& d, std::string_view modality, double fraction, std::uint64_t seed);

/// Number of edges (any relation, either direction) joining a human and a bot.
std::size_t count_human_bot_edges(const Dataset& d);

/// Adds floor(fraction * E_hb) new edges from uniformly chosen humans to
/// uniformly chosen test-split bots with a uniformly chosen relation,
/// resampling duplicates.
Dataset add_adversarial_edges(const Dataset& d, double fraction, std::uint64_t seed);

}  // namespace botmoe
