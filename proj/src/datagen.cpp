#include "botmoe/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace botmoe {
namespace {

// Raw metadata columns live on count-like scales so normalization matters.
constexpr std::array<double, kNumNumeric> kColumnScale{900.0, 300.0, 4000.0, 350.0, 2.5};
constexpr std::array<double, kNumNumeric> kColumnShift{1500.0, 600.0, 9000.0, 1200.0, 11.0};

std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm < 1e-12);
  for (auto& x : v) x /= std::sqrt(norm);
  return v;
}

std::vector<double> bent_direction(const std::vector<double>& shared, double twist, Rng& rng) {
  const auto r = random_unit(shared.size(), rng);
  std::vector<double> v(shared.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = shared[i] + twist * r[i];
    norm += v[i] * v[i];
  }
  if (norm < 1e-12) return shared;
  for (auto& x : v) x /= std::sqrt(norm);
  return v;
}

struct CommunityProfile {
  std::vector<double> meta_offset;
  std::vector<double> meta_direction;
  std::array<double, kNumCategorical> flag_logit{};
  std::vector<double> text_offset;
  std::vector<double> text_direction;
};

bool is_bot(const UserRecord& u) { return u.label && *u.label == 1; }
bool is_human(const UserRecord& u) { return u.label && *u.label == 0; }

std::vector<std::size_t> test_bots(const Dataset& d) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.users[i].split == Split::test && is_bot(d.users[i])) out.push_back(i);
  }
  return out;
}

void check_fraction(double fraction, const char* op) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument(std::string(op) + ": fraction outside [0, 1]");
}

}  // namespace

void SynthConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string("SynthConfig: ") + name + " outside [0, 1]");
  };
  if (n_users == 0) throw std::invalid_argument("SynthConfig: n_users must be positive");
  if (n_communities == 0) throw std::invalid_argument("SynthConfig: n_communities must be positive");
  if (embed_dim == 0) throw std::invalid_argument("SynthConfig: embed_dim must be positive");
  if (tweets_per_user == 0) throw std::invalid_argument("SynthConfig: tweets_per_user must be positive");
  prob(bot_fraction, "bot_fraction");
  prob(intra_edge_prob, "intra_edge_prob");
  prob(inter_edge_prob, "inter_edge_prob");
  prob(train_fraction, "train_fraction");
  prob(valid_fraction, "valid_fraction");
  if (train_fraction + valid_fraction > 1.0) throw std::invalid_argument("SynthConfig: train + valid fractions exceed 1");
  if (inter_edge_prob > intra_edge_prob) {
    throw std::invalid_argument("SynthConfig: inter_edge_prob must not exceed intra_edge_prob");
  }
  if (metadata_separation < 0 || text_separation < 0 || bot_bot_affinity < 0 || community_spread < 0 ||
      community_twist < 0) {
    throw std::invalid_argument("SynthConfig: separations, affinity, spread and twist must be non-negative");
  }
  const auto bots = static_cast<std::size_t>(std::llround(bot_fraction * static_cast<double>(n_users)));
  if (bots == 0 || bots == n_users) {
    throw std::invalid_argument("SynthConfig: bot_fraction leaves one class empty");
  }
}

Dataset generate_world(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t n = config.n_users;
  const std::size_t dim = config.embed_dim;
  const auto n_bots = static_cast<std::size_t>(std::llround(config.bot_fraction * static_cast<double>(n)));

  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_bots), 1);
  for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<int> community(n);
  for (std::size_t i = 0; i < n; ++i) community[perm[i]] = static_cast<int>(i % config.n_communities);

  const auto shared_meta = random_unit(kNumNumeric, rng);
  const auto shared_text = random_unit(dim, rng);
  std::vector<CommunityProfile> profiles(config.n_communities);
  for (auto& p : profiles) {
    p.meta_offset.resize(kNumNumeric);
    for (auto& x : p.meta_offset) x = config.community_spread * rng.normal();
    p.meta_direction = bent_direction(shared_meta, config.community_twist, rng);
    for (auto& x : p.flag_logit) x = rng.normal();
    p.text_offset.resize(dim);
    for (auto& x : p.text_offset) x = config.community_spread * rng.normal();
    p.text_direction = bent_direction(shared_text, config.community_twist, rng);
  }

  // Stratified split assignment: each class is shuffled and cut separately.
  std::vector<Split> splits(n);
  for (int cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.below(i)]);
    const auto m = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(config.train_fraction * m));
    const auto n_valid = static_cast<std::size_t>(std::llround(config.valid_fraction * m));
    for (std::size_t r = 0; r < members.size(); ++r) {
      splits[members[r]] = r < n_train ? Split::train : (r < n_train + n_valid ? Split::valid : Split::test);
    }
  }

  Dataset d;
  d.users.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& u = d.users[i];
    const auto& p = profiles[static_cast<std::size_t>(community[i])];
    const double sign = labels[i] == 1 ? 1.0 : -1.0;
    u.id = "u" + std::to_string(i);
    u.label = labels[i];
    u.split = splits[i];
    u.community = community[i];
    for (std::size_t c = 0; c < kNumNumeric; ++c) {
      const double latent = p.meta_offset[c] + sign * 0.5 * config.metadata_separation * p.meta_direction[c] + rng.normal();
      u.numeric[c] = kColumnShift[c] + kColumnScale[c] * latent;
    }
    for (std::size_t c = 0; c < kNumCategorical; ++c) {
      const double logit = p.flag_logit[c] + sign * 0.25 * config.metadata_separation;
      u.categorical[c] = rng.bernoulli(1.0 / (1.0 + std::exp(-logit))) ? 1 : 0;
    }
    std::vector<double> center(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      center[j] = p.text_offset[j] + sign * 0.5 * config.text_separation * p.text_direction[j] + 0.5 * rng.normal();
    }
    u.description.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) u.description[j] = center[j] + rng.normal();
    u.tweets.assign(config.tweets_per_user, std::vector<double>(dim));
    for (auto& t : u.tweets) {
      for (std::size_t j = 0; j < dim; ++j) t[j] = center[j] + rng.normal();
    }
  }

  d.graph = HeteroGraph(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double prob = community[i] == community[j] ? config.intra_edge_prob : config.inter_edge_prob;
      if (labels[i] == 1 && labels[j] == 1) prob = std::min(1.0, prob * config.bot_bot_affinity);
      if (!rng.bernoulli(prob)) continue;
      const auto relation = rng.bernoulli(0.5) ? Relation::follower : Relation::following;
      d.graph.add_edge(relation, i, j);
    }
  }
  return d;
}

FeatureModality parse_feature_modality(std::string_view name) {
  if (name == "metadata") return FeatureModality::metadata;
  if (name == "text") return FeatureModality::text;
  throw std::invalid_argument("unknown modality '" + std::string(name) + "' (expected metadata or text)");
}

Dataset manipulate_features(const Dataset& d, std::string_view modality, double fraction, std::uint64_t seed) {
  return manipulate_features(d, parse_feature_modality(modality), fraction, seed);
}

Dataset manipulate_features(const Dataset& d, FeatureModality modality, double fraction, std::uint64_t seed) {
  check_fraction(fraction, "manipulate_features");
  std::vector<std::size_t> humans;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (is_human(d.users[i])) humans.push_back(i);
  }
  if (humans.empty()) throw std::invalid_argument("manipulate_features: dataset has no humans");
  auto bots = test_bots(d);
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(bots.size())));
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) std::swap(bots[i], bots[i + rng.below(bots.size() - i)]);
  Dataset out = d;
  for (std::size_t i = 0; i < count; ++i) {
    auto& target = out.users[bots[i]];
    const auto& donor = d.users[humans[rng.below(humans.size())]];
    if (modality == FeatureModality::metadata) {
      target.numeric = donor.numeric;
      target.categorical = donor.categorical;
    } else {
      target.description = donor.description;
      target.tweets = donor.tweets;
    }
  }
  return out;
}

std::size_t count_human_bot_edges(const Dataset& d) {
  std::size_t count = 0;
  for (auto relation : {Relation::follower, Relation::following}) {
    for (const auto& e : d.graph.edges(relation)) {
      const auto& a = d.users[e.src];
      const auto& b = d.users[e.dst];
      if ((is_human(a) && is_bot(b)) || (is_bot(a) && is_human(b))) ++count;
    }
  }
  return count;
}

Dataset add_adversarial_edges(const Dataset& d, double fraction, std::uint64_t seed) {
  check_fraction(fraction, "add_adversarial_edges");
  const auto base = count_human_bot_edges(d);
  if (base == 0) throw std::invalid_argument("add_adversarial_edges: dataset has no human-bot edge");
  const auto to_add = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(base)));
  Dataset out = d;
  if (to_add == 0) return out;
  std::vector<std::size_t> humans;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (is_human(d.users[i])) humans.push_back(i);
  }
  const auto bots = test_bots(d);
  if (bots.empty()) throw std::invalid_argument("add_adversarial_edges: no test-split bots to target");
  const std::size_t capacity = 2 * humans.size() * bots.size();
  Rng rng(seed);
  std::size_t added = 0;
  std::size_t attempts = 0;
  while (added < to_add) {
    if (++attempts > 100 * to_add + capacity) {
      throw std::runtime_error("add_adversarial_edges: not enough free human-bot pairs");
    }
    const auto src = humans[rng.below(humans.size())];
    const auto dst = bots[rng.below(bots.size())];
    const auto relation = rng.bernoulli(0.5) ? Relation::follower : Relation::following;
    if (out.graph.has_edge(relation, src, dst)) continue;
    out.graph.add_edge(relation, src, dst);
    ++added;
  }
  return out;
}

}  // namespace botmoe
