#include <algorithm>
#include <cmath>

#include "botmoe/gradcheck.hpp"
#include "botmoe/moe.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace botmoe;

namespace {

void fill(Tensor t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

void set_identity(Tensor t) {
  fill(t, 0.0);
  for (std::size_t i = 0; i < std::min(t.dim(0), t.dim(1)); ++i) t.mutable_data()[i * t.dim(1) + i] = 1.0;
}

GateNetwork identity_gate(std::size_t n, std::size_t k) {
  Rng rng(1);
  GateNetwork g(n, n, k, rng);
  set_identity(g.w_gate);
  return g;
}

void check_rows(const GateOutput& out) {
  for (std::size_t r = 0; r < out.batch(); ++r) {
    double total = 0.0;
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < out.experts(); ++j) {
      const double w = out.weights.at(r, j);
      total += w;
      nonzero += w != 0.0;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    CHECK(nonzero == out.k);
  }
}

}  // namespace

TEST_CASE("gate examples") {
  NoGradGuard guard;
  SUBCASE("top-2 of three") {
    auto out = identity_gate(3, 2).forward(Tensor::from({1, 3}, {2.0, 1.0, 0.5}), false, nullptr);
    CHECK(out.weights.at(0, 0) == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(out.weights.at(0, 1) == doctest::Approx(0.268941).epsilon(1e-6));
    CHECK(out.weights.at(0, 2) == 0.0);
    CHECK(out.top_k == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("k = n is a plain softmax") {
    auto x = Tensor::from({1, 3}, {2.0, 1.0, 0.5});
    auto out = identity_gate(3, 3).forward(x, false, nullptr);
    auto plain = softmax(x);
    for (std::size_t j = 0; j < 3; ++j) CHECK(out.weights.at(0, j) == plain.at(0, j));
  }
  SUBCASE("ties go to the lower index") {
    auto out = identity_gate(2, 1).forward(Tensor::from({1, 2}, {1.0, 1.0}), false, nullptr);
    CHECK(out.weights.at(0, 0) == 1.0);
    CHECK(out.weights.at(0, 1) == 0.0);
    CHECK(out.top1(0) == 0);
  }
  SUBCASE("invalid k") {
    Rng rng(2);
    CHECK_THROWS_AS(GateNetwork(4, 3, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(GateNetwork(4, 3, 4, rng), std::invalid_argument);
  }
}

TEST_CASE("gate rows have exactly k nonzeros summing to one") {
  NoGradGuard guard;
  Rng rng(5);
  for (std::size_t n = 1; n <= 5; ++n) {
    for (std::size_t k = 1; k <= n; ++k) {
      GateNetwork g(6, n, k, rng);
      auto x = testing::random_tensor({20, 6}, rng, -3, 3, false);
      check_rows(g.forward(x, false, nullptr));
      check_rows(g.forward(x, true, &rng));
    }
  }
}

TEST_CASE("gate weights are shift invariant") {
  NoGradGuard guard;
  Rng rng(6);
  GateNetwork g(4, 4, 2, rng);
  auto x = testing::random_tensor({10, 4}, rng, -2, 2, false);
  // an extra constant input column whose gate row adds c to every logit
  std::vector<double> padded;
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t c = 0; c < 4; ++c) padded.push_back(x.at(r, c));
    padded.push_back(1.0);
  }
  GateNetwork shifted = g;
  std::vector<double> w(g.w_gate.data().begin(), g.w_gate.data().end());
  for (int j = 0; j < 4; ++j) w.push_back(7.5);
  shifted.w_gate = Tensor::from({5, 4}, w);
  auto a = g.forward(x, false, nullptr);
  auto b = shifted.forward(Tensor::from({10, 5}, padded), false, nullptr);
  CHECK(a.top_k == b.top_k);
  for (std::size_t i = 0; i < 40; ++i) CHECK(b.weights.data()[i] == doctest::Approx(a.weights.data()[i]).epsilon(1e-12));
}

TEST_CASE("moe forward examples") {
  NoGradGuard guard;
  const ForwardContext eval{};
  Rng rng(9);

  SUBCASE("weighted sum of hand-set expert outputs") {
    MoeLayer layer(2, 2, 2, rng);
    set_identity(layer.gate.w_gate);
    for (std::size_t j = 0; j < 2; ++j) {
      auto& e = layer.bank.experts[j];
      fill(e.second.weight, 0.0);
      fill(e.second.bias, 0.0);
      e.second.bias.mutable_data()[j] = 1.0;
    }
    auto out = layer.forward(Tensor::from({1, 2}, {2.0, 1.0}), eval);
    CHECK(out.z.at(0, 0) == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(out.z.at(0, 1) == doctest::Approx(0.268941).epsilon(1e-6));
  }
  SUBCASE("k = 1 copies the selected expert") {
    MoeLayer layer(4, 3, 1, rng);
    auto x = testing::random_tensor({12, 4}, rng, -1, 1, false);
    auto out = layer.forward(x, eval);
    for (std::size_t r = 0; r < 12; ++r) {
      const auto j = out.gate.top1(r);
      auto y = layer.bank.experts[j].forward(index_rows(x, std::vector<std::size_t>{r}), eval);
      for (std::size_t c = 0; c < 4; ++c) CHECK(out.z.at(r, c) == y.at(0, c));
    }
  }
  SUBCASE("identical experts make the gate irrelevant") {
    MoeLayer layer(4, 3, 2, rng);
    for (auto& e : layer.bank.experts) e = layer.bank.experts[0];
    auto x = testing::random_tensor({12, 4}, rng, -1, 1, false);
    auto out = layer.forward(x, eval);
    auto y = layer.bank.experts[0].forward(x, eval);
    for (std::size_t i = 0; i < 48; ++i) CHECK(out.z.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("moe forward is reproducible") {
  Rng init(10);
  MoeLayer layer(4, 3, 2, init);
  auto x = testing::random_tensor({16, 4}, init, -1, 1, false);
  NoGradGuard guard;
  auto a = layer.forward(x, ForwardContext{}).z;
  auto b = layer.forward(x, ForwardContext{}).z;
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  Rng r1(77), r2(77);
  auto c = layer.forward(x, ForwardContext{true, 0.2, &r1}).z;
  auto d = layer.forward(x, ForwardContext{true, 0.2, &r2}).z;
  CHECK(std::equal(c.data().begin(), c.data().end(), d.data().begin()));
}

TEST_CASE("smooth load") {
  NoGradGuard guard;
  Rng rng(12);
  GateNetwork g = identity_gate(3, 1);

  SUBCASE("dominant expert has probability one") {
    fill(g.w_noise, 0.0);
    auto out = g.forward(Tensor::from({1, 3}, {60.0, 0.0, 0.0}), true, &rng);
    CHECK(smooth_load(out)[0] == doctest::Approx(1.0));
  }
  SUBCASE("clean logit at the threshold gives one half") {
    // noiseless stand-in: zero noise draws, clean logits [1, 1, 0], k = 1
    GateOutput out;
    out.k = 1;
    out.noisy = true;
    out.clean_logits = Tensor::from({1, 3}, {1.0, 1.0, 0.0});
    out.noisy_logits = out.clean_logits;
    out.noise_scales = Tensor::full({1, 3}, 0.7);
    out.weights = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
    out.top_k = {0};
    auto load = smooth_load(out);
    CHECK(load[0] == doctest::Approx(0.5));
    CHECK(load[1] == doctest::Approx(0.5));
  }
  SUBCASE("rejects a noiseless gate output") {
    auto out = g.forward(Tensor::from({1, 3}, {1.0, 0.0, 0.0}), false, nullptr);
    CHECK_THROWS(smooth_load(out));
  }
  SUBCASE("matches a Monte-Carlo oracle") {
    for (std::size_t k : {1u, 2u}) {
      GateNetwork gate(3, 3, k, rng);
      auto x = testing::random_tensor({4, 3}, rng, -1, 1, false);
      auto out = gate.forward(x, true, &rng);
      auto load = smooth_load(out);
      // redraw only expert i's noise, others held at their sampled values
      const int draws = 100000;
      double total_mc = 0.0, total_p = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        double freq = 0.0;
        for (std::size_t r = 0; r < 4; ++r) {
          int hits = 0;
          for (int s = 0; s < draws; ++s) {
            const double mine = out.clean_logits.at(r, i) + rng.normal() * out.noise_scales.at(r, i);
            std::size_t above = 0;
            for (std::size_t j = 0; j < 3; ++j)
              if (j != i && out.noisy_logits.at(r, j) > mine) ++above;
            hits += above < k;
          }
          freq += static_cast<double>(hits) / draws;
        }
        CHECK(load[i] == doctest::Approx(freq).epsilon(0.02).scale(1.0));
        total_mc += freq;
        total_p += load[i];
      }
      CHECK(std::abs(total_p - total_mc) <= 0.02 * total_mc);
    }
  }
}

TEST_CASE("balance loss examples") {
  NoGradGuard guard;
  auto stats = [](std::vector<double> imp, std::vector<double> load) {
    const auto n = imp.size();
    return LoadStats{Tensor::from({n}, std::move(imp)), Tensor::from({n}, std::move(load))};
  };
  CHECK(balance_loss(stats({3, 3, 3}, {2, 2, 2}), 1, 1).item() == 0.0);
  CHECK(balance_loss(stats({8, 0}, {8, 0}), 1, 1).item() == doctest::Approx(2.0));
  CHECK(balance_loss(stats({8, 0}, {8, 0}), 0, 0).item() == 0.0);
  CHECK(balance_loss(stats({0, 0}, {0, 0}), 1, 1).item() == 0.0);
  CHECK(balance_loss(stats({4, 2}, {3, 3}), 1, 1).item() > 0.0);
  CHECK(balance_loss(stats({3, 3}, {4, 2}), 1, 1).item() > 0.0);
}

TEST_CASE("load stats") {
  NoGradGuard guard;
  Rng rng(14);
  GateNetwork g(5, 4, 2, rng);
  auto x = testing::random_tensor({30, 5}, rng, -1, 1, false);
  for (bool noisy : {false, true}) {
    auto out = g.forward(x, noisy, &rng);
    auto stats = load_stats(out);
    double total = 0.0;
    for (double v : stats.importance.data()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(30.0).epsilon(1e-9));
    if (!noisy) {
      double selections = 0.0;
      for (double v : stats.load.data()) selections += v;
      CHECK(selections == 60.0);
    }
  }
}

TEST_CASE("never-selected experts get exactly zero gradient") {
  Rng rng(15);
  MoeLayer layer(3, 3, 1, rng);
  layer.noisy_gating = false;
  fill(layer.gate.w_gate, 0.0);
  // positive inputs: expert 0 always wins, expert 2 always loses
  for (std::size_t r = 0; r < 3; ++r) {
    layer.gate.w_gate.mutable_data()[r * 3 + 0] = 2.0;
    layer.gate.w_gate.mutable_data()[r * 3 + 1] = 1.0;
    layer.gate.w_gate.mutable_data()[r * 3 + 2] = -1.0;
  }
  auto x = testing::random_tensor({10, 3}, rng, 0.1, 1.0, false);
  Tape::current().reset();
  auto out = layer.forward(x, ForwardContext{true, 0.0, &rng});
  Tape::current().backward(add(sum(out.z), balance_loss(out.stats, 1, 1)));
  ParamList params;
  layer.bank.experts[2].collect("e2", params);
  for (auto& p : params)
    for (double g : p.value.grad()) CHECK(g == 0.0);
  ParamList selected;
  layer.bank.experts[0].collect("e0", selected);
  double mass = 0.0;
  for (auto& p : selected)
    for (double g : p.value.grad()) mass += std::abs(g);
  CHECK(mass > 0.0);
  Tape::current().reset();
}

TEST_CASE("moe gradients with frozen noise") {
  Rng init(16);
  MoeLayer layer(4, 3, 2, init);
  auto x = testing::random_tensor({8, 4}, init, -1, 1, false);
  auto w = testing::random_tensor({8, 4}, init, -1, 1, false);
  ParamList params;
  layer.collect("moe", params);
  auto f = [&] {
    Rng noise(99);
    auto out = layer.forward(x, ForwardContext{true, 0.0, &noise});
    return add(sum(mul(out.z, w)), balance_loss(out.stats, 1, 1));
  };
  auto report = grad_check(f, params, 1e-6, 1e-3);
  INFO("worst " << report.worst());
  CHECK(report.passed());
  Tape::current().reset();
}
