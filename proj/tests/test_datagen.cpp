#include <algorithm>
#include <cmath>
#include <set>

#include "botmoe/datagen.hpp"
#include "doctest.h"

using namespace botmoe;

namespace {

// Plain logistic regression on the 8 metadata features, trained by full-batch
// gradient descent. Independent of the model code.
double logistic_oracle_accuracy(const Dataset& raw) {
  const auto d = zscore_normalize(raw);
  auto features = [&](const UserRecord& u) {
    std::vector<double> x(u.numeric.begin(), u.numeric.end());
    for (int c : u.categorical) x.push_back(c);
    x.push_back(1.0);
    return x;
  };
  const auto train = d.labeled(Split::train);
  std::vector<double> w(9, 0.0);
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> g(9, 0.0);
    for (auto i : train) {
      const auto x = features(d.users[i]);
      double z = 0;
      for (std::size_t k = 0; k < 9; ++k) z += w[k] * x[k];
      const double err = 1.0 / (1.0 + std::exp(-z)) - *d.users[i].label;
      for (std::size_t k = 0; k < 9; ++k) g[k] += err * x[k];
    }
    for (std::size_t k = 0; k < 9; ++k) w[k] -= 0.5 * g[k] / static_cast<double>(train.size());
  }
  std::size_t correct = 0;
  std::size_t total = 0;
  for (auto split : {Split::valid, Split::test}) {
    for (auto i : d.labeled(split)) {
      const auto x = features(d.users[i]);
      double z = 0;
      for (std::size_t k = 0; k < 9; ++k) z += w[k] * x[k];
      correct += static_cast<int>(z > 0) == *d.users[i].label;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::pair<double, double> edge_densities(const Dataset& d) {
  double intra = 0, inter = 0, intra_pairs = 0, inter_pairs = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (i == j) continue;
      (d.users[i].community == d.users[j].community ? intra_pairs : inter_pairs) += 1;
    }
  for (auto r : {Relation::follower, Relation::following})
    for (const auto& e : d.graph.edges(r)) (d.users[e.src].community == d.users[e.dst].community ? intra : inter) += 1;
  return {intra / intra_pairs, inter / inter_pairs};
}

std::multiset<std::vector<double>> human_metadata(const Dataset& d) {
  std::multiset<std::vector<double>> out;
  for (const auto& u : d.users) {
    if (u.label == 0) {
      std::vector<double> v(u.numeric.begin(), u.numeric.end());
      for (int c : u.categorical) v.push_back(c);
      out.insert(v);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("generate_world counts and determinism") {
  SynthConfig cfg;
  cfg.n_users = 500;
  cfg.bot_fraction = 0.4;
  cfg.seed = 1;
  auto d = generate_world(cfg);
  CHECK(d.size() == 500);
  const auto bots = std::count_if(d.users.begin(), d.users.end(), [](const auto& u) { return u.label == 1; });
  CHECK(bots == 200);
  CHECK(generate_world(cfg) == d);
  cfg.seed = 2;
  CHECK_FALSE(generate_world(cfg) == d);

  for (const auto& u : d.users) {
    CHECK(u.description.size() == cfg.embed_dim);
    CHECK(u.tweets.size() == cfg.tweets_per_user);
    CHECK(u.community.has_value());
  }
}

TEST_CASE("generate_world rejects invalid configs") {
  SynthConfig cfg;
  cfg.n_users = 10;
  cfg.bot_fraction = 0.01;
  CHECK_THROWS_AS(generate_world(cfg), std::invalid_argument);
  cfg.bot_fraction = 1.0;
  CHECK_THROWS_AS(generate_world(cfg), std::invalid_argument);
  cfg = {};
  cfg.inter_edge_prob = 0.5;
  cfg.intra_edge_prob = 0.1;
  CHECK_THROWS_AS(generate_world(cfg), std::invalid_argument);
  cfg = {};
  cfg.intra_edge_prob = 1.5;
  CHECK_THROWS_AS(generate_world(cfg), std::invalid_argument);
}

TEST_CASE("metadata separation 4 is learnable by a logistic oracle") {
  SynthConfig cfg;
  cfg.metadata_separation = 4.0;
  cfg.seed = 7;
  CHECK(logistic_oracle_accuracy(generate_world(cfg)) >= 0.95);
}

TEST_CASE("planted communities: intra density exceeds inter density on every seed") {
  SynthConfig cfg;
  cfg.n_users = 200;
  cfg.intra_edge_prob = 0.1;
  cfg.inter_edge_prob = 0.01;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    const auto [intra, inter] = edge_densities(generate_world(cfg));
    CHECK(intra > inter);
  }
}

TEST_CASE("manipulate_features") {
  SynthConfig cfg;
  cfg.n_users = 1250;  // 500 bots -> exactly 100 in the test split
  cfg.embed_dim = 4;
  cfg.intra_edge_prob = 0.01;
  cfg.inter_edge_prob = 0.001;
  cfg.seed = 3;
  const auto d = generate_world(cfg);
  std::size_t test_bots = 0;
  for (const auto& u : d.users) test_bots += u.split == Split::test && u.label == 1;
  REQUIRE(test_bots == 100);

  CHECK(manipulate_features(d, "metadata", 0.0, 1) == d);
  CHECK(manipulate_features(d, "text", 0.0, 1) == d);

  SUBCASE("full metadata replacement copies human vectors") {
    const auto m = manipulate_features(d, "metadata", 1.0, 9);
    const auto donors = human_metadata(d);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& u = m.users[i];
      CHECK(u.label == d.users[i].label);
      CHECK(u.description == d.users[i].description);
      if (u.split == Split::test && u.label == 1) {
        std::vector<double> v(u.numeric.begin(), u.numeric.end());
        for (int c : u.categorical) v.push_back(c);
        CHECK(donors.contains(v));
      } else {
        CHECK(u == d.users[i]);
      }
    }
    CHECK(m.graph == d.graph);
  }

  SUBCASE("half replacement touches exactly 50 bots, deterministically") {
    const auto m = manipulate_features(d, "text", 0.5, 11);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(m.users[i] == d.users[i])) {
        ++changed;
        CHECK(m.users[i].split == Split::test);
        CHECK(m.users[i].label == 1);
        CHECK(m.users[i].numeric == d.users[i].numeric);
      }
    }
    CHECK(changed == 50);
    CHECK(manipulate_features(d, "text", 0.5, 11) == m);
  }

  CHECK_THROWS_AS(manipulate_features(d, "graph", 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(manipulate_features(d, "metadata", 1.5, 1), std::invalid_argument);
}

TEST_CASE("add_adversarial_edges") {
  SynthConfig cfg;
  cfg.n_users = 300;
  cfg.seed = 4;
  const auto d = generate_world(cfg);
  const auto base = count_human_bot_edges(d);
  REQUIRE(base > 0);
  CHECK(add_adversarial_edges(d, 0.0, 1).graph == d.graph);
  const auto doubled = add_adversarial_edges(d, 1.0, 1);
  CHECK(count_human_bot_edges(doubled) == 2 * base);
  CHECK(doubled.graph.edge_count() == d.graph.edge_count() + base);
  CHECK(add_adversarial_edges(d, 1.0, 1).graph == doubled.graph);
  CHECK(doubled.users == d.users);
  // Every new edge ends at a test-split bot.
  for (auto r : {Relation::follower, Relation::following}) {
    const auto& before = d.graph.edges(r);
    const auto& after = doubled.graph.edges(r);
    REQUIRE(std::equal(before.begin(), before.end(), after.begin()));
    for (std::size_t e = before.size(); e < after.size(); ++e) {
      CHECK(d.users[after[e].dst].split == Split::test);
      CHECK(d.users[after[e].dst].label == 1);
      CHECK(d.users[after[e].src].label == 0);
    }
  }

  // Hand fixture: 80 human-bot edges -> 160 after full-fraction addition.
  Dataset small;
  for (int i = 0; i < 40; ++i) {
    UserRecord u;
    u.id = "h" + std::to_string(i);
    u.label = i < 20 ? 0 : 1;
    u.split = Split::test;
    u.description = {0.0};
    small.users.push_back(u);
  }
  small.graph = HeteroGraph(40);
  for (std::size_t h = 0; h < 20; ++h)
    for (std::size_t k = 0; k < 4; ++k) small.graph.add_edge(Relation::following, h, 20 + (h + k) % 20);
  REQUIRE(count_human_bot_edges(small) == 80);
  CHECK(count_human_bot_edges(add_adversarial_edges(small, 1.0, 2)) == 160);

  Dataset empty = small;
  empty.graph = HeteroGraph(40);
  CHECK_THROWS_AS(add_adversarial_edges(empty, 0.5, 1), std::invalid_argument);
}
