#include <cmath>
#include <cstring>

#include "botmoe/gradcheck.hpp"
#include "botmoe/ops.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace botmoe;
using testing::max_fd_error;
using testing::random_tensor;

namespace {

// Weighted sum so each output coordinate gets a distinct O(1) upstream grad.
Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

TEST_CASE("softmax examples") {
  NoGradGuard guard;
  auto u = softmax(Tensor::from({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto p = softmax(Tensor::from({2}, {2.0, 1.0}));
  CHECK(p[0] == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.268941).epsilon(1e-6));

  auto base = softmax(Tensor::from({2}, {5, 5}));
  for (double c : {-100.0, -1.5, 0.0, 3.0, 250.0}) {
    auto shifted = softmax(Tensor::from({2}, {5 + c, 5 + c}));
    CHECK(shifted[0] == doctest::Approx(base[0]).epsilon(1e-15));
    CHECK(shifted[1] == doctest::Approx(base[1]).epsilon(1e-15));
  }
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
  NoGradGuard guard;
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor({4, 5}, rng, -20, 20, false);
    const double c = rng.uniform(-50, 50);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += c;
    auto y = softmax(x);
    auto ys = softmax(Tensor::from({4, 5}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        total += y.at(r, j);
        CHECK(y.at(r, j) >= 0.0);
        CHECK(std::abs(y.at(r, j) - ys.at(r, j)) < 1e-12);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax maps masked entries to exactly zero") {
  NoGradGuard guard;
  auto masked = keep_mask(Tensor::from({3}, {1.0, 2.0, 3.0}), {true, false, true});
  auto y = softmax(masked);
  CHECK(y[1] == 0.0);
  CHECK(y[0] + y[2] == doctest::Approx(1.0));
}

TEST_CASE("conv2d examples") {
  NoGradGuard guard;
  auto out = conv2d(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 2}, {1, 0, 0, 1}), 1);
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out[0] == 5.0);

  Rng rng(3);
  auto any = random_tensor({4, 5}, rng, -1, 1, false);
  auto zero = conv2d(any, Tensor::zeros({2, 3}), 1);
  for (double v : zero.data()) CHECK(v == 0.0);

  CHECK(conv2d(Tensor::zeros({3, 3}), Tensor::zeros({2, 2}), 1).shape() == Shape{2, 2});
  CHECK(conv2d(Tensor::zeros({7, 5}), Tensor::zeros({3, 2}), 2).shape() == Shape{3, 2});
  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 2}), Tensor::zeros({3, 1}), 1), std::invalid_argument);
}

TEST_CASE("conv2d matches a direct window dot product") {
  NoGradGuard guard;
  Rng rng(5);
  auto x = random_tensor({2, 5, 6}, rng, -1, 1, false);
  auto f = random_tensor({2, 3}, rng, -1, 1, false);
  auto y = conv2d(x, f, 2);
  REQUIRE(y.shape() == Shape{2, 2, 2});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double expect = 0;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 3; ++v) expect += f[u * 3 + v] * x[b * 30 + (2 * i + u) * 6 + 2 * j + v];
        CHECK(y[(b * 2 + i) * 2 + j] == doctest::Approx(expect).epsilon(1e-14));
      }
}

TEST_CASE("avg_pool2d examples") {
  NoGradGuard guard;
  auto pooled = avg_pool2d(Tensor::from({2, 2}, {1, 3, 5, 7}), 2);
  CHECK(pooled.shape() == Shape{1, 1});
  CHECK(pooled[0] == 4.0);
  CHECK(avg_pool2d(Tensor::from({2, 2}, {2, 2, 2, 2}), 2)[0] == 2.0);

  Rng rng(9);
  auto x = random_tensor({3, 3}, rng, -1, 1, false);
  std::vector<double> signed_zero{-0.0, 1.0, 2.0, 3.0};
  for (const auto& in : {x, Tensor::from({2, 2}, signed_zero)}) {
    auto same = avg_pool2d(in, 1);
    REQUIRE(same.shape() == in.shape());
    CHECK(std::memcmp(same.data().data(), in.data().data(), in.numel() * sizeof(double)) == 0);
  }
  // Kernel larger than the map degrades to a global mean.
  auto global = avg_pool2d(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), 5);
  CHECK(global.shape() == Shape{1, 1});
  CHECK(global[0] == doctest::Approx(3.5));
}

TEST_CASE("backward on simple losses") {
  auto& tape = Tape::current();
  tape.reset();
  auto x = Tensor::from({1}, {3.0}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 6.0);

  SUBCASE("repeated backward accumulates") {
    tape.reset();
    auto y = Tensor::from({1}, {3.0}, true);
    auto loss = sum(mul(y, y));
    backward(loss);
    backward(loss);
    CHECK(y.grad()[0] == 12.0);
  }

  SUBCASE("detached loss leaves grad at zero") {
    tape.reset();
    auto y = Tensor::from({2}, {1.0, 2.0}, true);
    auto z = Tensor::from({2}, {4.0, 5.0}, true);
    auto unrelated = sum(mul(y, y));
    backward(sum(scale(z, 2.0)));
    (void)unrelated;
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
    CHECK(z.grad()[0] == 2.0);
    auto w = Tensor::from({2}, {1.0, 1.0}, true);
    backward(sum(w.detach()));
    CHECK(w.grad()[0] == 0.0);
  }

  SUBCASE("non-scalar loss is rejected") {
    auto y = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(scale(y, 2.0)), std::invalid_argument);
  }
  tape.reset();
}

TEST_CASE("tape is empty after reset and records one op per call") {
  auto& tape = Tape::current();
  tape.reset();
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = sum(mul(x, x));
  CHECK(tape.size() == 2);
  {
    NoGradGuard guard;
    auto z = sum(mul(x, x));
    CHECK(!z.requires_grad());
  }
  CHECK(tape.size() == 2);
  tape.reset();
  CHECK(tape.size() == 0);
  (void)y;
}

TEST_CASE("matmul chain gradients match central differences") {
  Rng rng(21);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto c = random_tensor({5, 2}, rng);
  auto w = random_tensor({3, 2}, rng, 0.5, 1.5, false);
  const double err = max_fd_error([&] { return probe(matmul(matmul(a, b), c), w); }, {a, b, c});
  CHECK(err <= 1e-5);
}

TEST_CASE("every differentiable op passes central differences") {
  Rng rng(1234);
  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> in) {
    INFO(name);
    CHECK(max_fd_error(f, std::move(in)) <= 1e-5);
  };
  auto x = random_tensor({3, 4}, rng);
  auto y = random_tensor({3, 4}, rng);
  auto pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto bias = random_tensor({4}, rng);
  auto rowsw = random_tensor({3}, rng);
  auto w34 = random_tensor({3, 4}, rng, 0.5, 1.5, false);

  check("add", [&] { return probe(add(x, y), w34); }, {x, y});
  check("sub", [&] { return probe(sub(x, y), w34); }, {x, y});
  check("mul", [&] { return probe(mul(x, y), w34); }, {x, y});
  check("div", [&] { return probe(div(x, pos), w34); }, {x, pos});
  check("scale", [&] { return probe(scale(x, -2.5), w34); }, {x});
  check("add_bias", [&] { return probe(add_bias(x, bias), w34); }, {x, bias});
  check("scale_rows", [&] { return probe(scale_rows(x, rowsw), w34); }, {x, rowsw});
  check("softplus", [&] { return probe(softplus(x), w34); }, {x});
  check("normal_cdf", [&] { return probe(normal_cdf(x), w34); }, {x});
  check("softmax", [&] { return probe(softmax(x), w34); }, {x});
  check("keep_mask+softmax",
        [&] { return probe(softmax(keep_mask(x, {true, false, true, true, false, true, true, true, true, true, false, true})), w34); },
        {x});
  check("sum_squares", [&] { return sum_squares(x); }, {x});
  check("mean", [&] { return mean(mul(x, w34)); }, {x});

  // Leaky-ReLU away from its kink.
  auto away = random_tensor({3, 4}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < away.numel(); i += 2) away.mutable_data()[i] *= -1;
  check("leaky_relu", [&] { return probe(leaky_relu(away), w34); }, {away});

  auto gamma = random_tensor({4}, rng, 0.5, 1.5);
  auto beta = random_tensor({4}, rng);
  check("layer_norm", [&] { return probe(layer_norm(x, gamma, beta), w34); }, {x, gamma, beta});

  std::vector<int> labels{0, 1, 1};
  auto logits = random_tensor({3, 2}, rng, -2, 2);
  check("cross_entropy", [&] { return cross_entropy(logits, labels); }, {logits});

  auto w6 = random_tensor({2, 6}, rng, 0.5, 1.5, false);
  auto x32 = random_tensor({2, 3, 2}, rng);
  check("flatten", [&] { return probe(flatten(x32), w6); }, {x32});
  check("reshape", [&] { return probe(reshape(x, {4, 3}), reshape(w34, {4, 3})); }, {x});

  auto w37 = random_tensor({3, 7}, rng, 0.5, 1.5, false);
  auto z33 = random_tensor({3, 3}, rng);
  check("concat", [&] { return probe(concat({x, z33}, 1), w37); }, {x, z33});
  auto w32 = random_tensor({3, 2}, rng, 0.5, 1.5, false);
  check("slice", [&] { return probe(slice(x, 1, 1, 2), w32); }, {x});

  auto w4 = random_tensor({4}, rng, 0.5, 1.5, false);
  auto w3 = random_tensor({3}, rng, 0.5, 1.5, false);
  check("sum_axis", [&] { return probe(sum_axis(x, 0), w4); }, {x});
  check("mean_axis", [&] { return probe(mean_axis(x, 1), w3); }, {x});
  check("max_axis", [&] { return probe(max_axis(x, 0), w4); }, {x});
  check("min_axis", [&] { return probe(min_axis(x, 1), w3); }, {x});

  check("gather", [&] { return probe(gather(x, {0, 5, 5, 11}, {4}), w4); }, {x});
  std::vector<std::size_t> rows{2, 0};
  auto w24 = random_tensor({2, 4}, rng, 0.5, 1.5, false);
  check("index_rows", [&] { return probe(index_rows(x, rows), w24); }, {x});
  auto w54 = random_tensor({5, 4}, rng, 0.5, 1.5, false);
  std::vector<std::size_t> targets{4, 1, 4};
  check("scatter_rows", [&] { return probe(scatter_rows(x, targets, 5), w54); }, {x});

  SparseMatrix m;
  m.rows = 2;
  m.cols = 3;
  m.row_ptr = {0, 2, 3};
  m.col_idx = {0, 2, 1};
  m.values = {0.5, 0.5, 1.0};
  check("sparse_matmul", [&] { return probe(sparse_matmul(m, x), w24); }, {x});

  auto img = random_tensor({2, 4, 5}, rng);
  auto filt = random_tensor({2, 2}, rng);
  auto wc = random_tensor({2, 3, 4}, rng, 0.5, 1.5, false);
  check("conv2d", [&] { return probe(conv2d(img, filt, 1), wc); }, {img, filt});
  auto wp = random_tensor({2, 2, 2}, rng, 0.5, 1.5, false);
  check("avg_pool2d", [&] { return probe(avg_pool2d(img, 2), wp); }, {img});

  auto q = random_tensor({2, 3, 4}, rng);
  auto k = random_tensor({2, 3, 4}, rng);
  auto v = random_tensor({2, 3, 4}, rng);
  auto ws = random_tensor({2, 2, 3, 3}, rng, 0.5, 1.5, false);
  auto wo = random_tensor({2, 3, 4}, rng, 0.5, 1.5, false);
  check("attention_scores", [&] { return probe(attention_scores(q, k, 2), ws); }, {q, k});
  check("attention", [&] { return probe(attention_apply(softmax(attention_scores(q, k, 2)), v), wo); }, {q, k, v});

  auto cv_in = random_tensor({4}, rng, 0.5, 3.0);
  check("cv_squared", [&] { return cv_squared(cv_in); }, {cv_in});
}

TEST_CASE("cv_squared examples") {
  NoGradGuard guard;
  CHECK(cv_squared(Tensor::from({3}, {1, 1, 1})).item() == 0.0);
  CHECK(cv_squared(Tensor::from({2}, {2, 0})).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cv_squared(Tensor::from({3}, {0, 0, 0})).item() == 0.0);
  CHECK(cv_squared(Tensor::from({1}, {7})).item() == 0.0);
}

TEST_CASE("dropout is identity at eval and unbiased in training") {
  Rng rng(77);
  auto x = Tensor::full({100000}, 1.0);
  auto same = dropout(x, 0.3, false, rng);
  CHECK(same.impl() == x.impl());
  auto dropped = dropout(x, 0.3, true, rng);
  double total = 0;
  for (double v : dropped.data()) total += v;
  CHECK(std::abs(total / 100000.0 - 1.0) < 0.02);
  CHECK_THROWS(dropout(x, 1.0, true, rng));
}

TEST_CASE("grad_check examples") {
  auto x = Tensor::from({1}, {2.0}, true);
  ParamList params{{"x", x, true}};
  auto cube = [&] { return sum(mul(mul(x, x), x)); };
  auto report = grad_check(cube, params, 1e-4, 1e-7);
  CHECK(report.passed());
  CHECK(report.worst() < 1e-7);

  Tape::current().reset();
  x.zero_grad();
  backward(cube());
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  Tape::current().reset();

  auto c = Tensor::from({3}, {1, 2, 3}, true);
  auto constant = [] { return Tensor::scalar(4.0); };
  auto flat = grad_check(constant, {{"c", c, true}}, 1e-4, 1e-12);
  CHECK(flat.passed());
  CHECK(flat.worst() == 0.0);

  // A deliberately wrong gradient is flagged: the loss reads a stale copy.
  auto y = Tensor::from({2}, {1.0, 2.0}, true);
  auto broken = [&] { return add(sum(y), Tensor::scalar(y[0] * y[0] * 10.0)); };
  auto bad = grad_check(broken, {{"y", y, true}}, 1e-4, 1e-3);
  CHECK_FALSE(bad.passed());
  CHECK(bad.failures() == std::vector<std::string>{"y"});
}
