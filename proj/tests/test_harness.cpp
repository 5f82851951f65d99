#include <unistd.h>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "botmoe/harness.hpp"
#include "doctest.h"

using namespace botmoe;
namespace fs = std::filesystem;

namespace {

RunConfig tiny() {
  RunConfig cfg;
  cfg.synth.n_users = 80;
  cfg.synth.embed_dim = 4;
  cfg.model.hidden = 8;
  cfg.model.dropout = 0.1;
  cfg.adam.lr = 1e-2;
  cfg.max_epochs = 3;
  cfg.seeds = {0, 1};
  cfg.threads = 2;
  return cfg;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("botmoe_harness_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

double brute_purity(const std::vector<std::size_t>& a, const std::vector<std::size_t>& t) {
  const std::size_t k = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(t.begin(), t.end())) + 1;
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < a.size(); ++i) hits += perm[a[i]] == t[i];
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("config parsing") {
  std::istringstream in(
      "# comment\n"
      "hidden = 12   # trailing\n"
      "experts_graph = 3\n"
      "\n"
      "seeds = 4, 5\n"
      "fractions = 0.5,1\n"
      "modalities = text\n"
      "lr = 0.01\n"
      "synth.n_users = 90\n"
      "efficiency_mode = edges\n");
  const auto cfg = parse_run_config(in);
  CHECK(cfg.model.hidden == 12);
  CHECK(cfg.model.experts[0] == 3);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(cfg.fractions == std::vector<double>{0.5, 1.0});
  CHECK(cfg.modalities == std::vector<Modality>{Modality::text});
  CHECK(cfg.adam.lr == 0.01);
  CHECK(cfg.synth.n_users == 90);
  CHECK(cfg.efficiency_mode == EfficiencyMode::edges);

  SUBCASE("dump round trips") {
    std::istringstream again(cfg.dump());
    const auto back = parse_run_config(again);
    CHECK(back.dump() == cfg.dump());
    CHECK(back.model == cfg.model);
  }
  SUBCASE("unknown keys are errors with a location") {
    std::istringstream bad("hidden = 4\nhiden = 5\n");
    try {
      parse_run_config(bad, "x.cfg");
      FAIL("accepted unknown key");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("x.cfg:2") != std::string::npos);
      CHECK(std::string(e.what()).find("hiden") != std::string::npos);
    }
  }
  SUBCASE("malformed input") {
    std::istringstream no_eq("hidden 4\n");
    CHECK_THROWS_AS(parse_run_config(no_eq), std::invalid_argument);
    std::istringstream dup("hidden = 4\nhidden = 5\n");
    CHECK_THROWS_AS(parse_run_config(dup), std::invalid_argument);
    std::istringstream bad_num("hidden = four\n");
    CHECK_THROWS_AS(parse_run_config(bad_num), std::invalid_argument);
    CHECK_THROWS_AS(parse_fraction_list("0.5,1.5"), std::invalid_argument);
    CHECK_THROWS_AS(parse_modality_list("graph,audio"), std::invalid_argument);
    CHECK_THROWS_AS(parse_seed_list(""), std::invalid_argument);
  }
}

TEST_CASE("invalid configs fail before any output") {
  auto cfg = tiny();
  cfg.model.experts[0] = 0;
  const auto out = scratch("reject");
  CHECK_THROWS_AS(cmd_train(cfg, out), std::invalid_argument);
  CHECK_FALSE(fs::exists(out));

  auto sweep = tiny();
  sweep.sweep_graph = {1, 2, 3, 4, 5};
  sweep.sweep_text = {1, 2, 3, 4};
  sweep.sweep_metadata = {1, 2, 3, 4};
  CHECK_THROWS_AS(cmd_sweep(sweep, out), std::invalid_argument);
  CHECK_FALSE(fs::exists(out));

  auto eff = tiny();
  eff.fractions = {0.0, 1.0};
  CHECK_THROWS_AS(cmd_efficiency(eff, out), std::invalid_argument);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("assignment purity matches brute force") {
  CHECK(assignment_purity({0, 0, 1, 1}, {1, 1, 0, 0}) == 1.0);
  CHECK(assignment_purity({0, 0, 0, 0}, {0, 1, 0, 1}) == 0.5);
  Rng rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 5 + rng.below(20);
    const std::size_t ka = 1 + rng.below(4), kt = 1 + rng.below(4);
    std::vector<std::size_t> a(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.below(ka);
      t[i] = rng.below(kt);
    }
    CHECK(assignment_purity(a, t) == doctest::Approx(brute_purity(a, t)));
  }
}

TEST_CASE("spearman") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3, 4}, {1, 8, 27, 64}) == doctest::Approx(1.0));
  // ties: ranks of y are 1.5, 1.5, 3, 4
  const double r = spearman({1, 2, 3, 4}, {5, 5, 6, 7});
  const std::vector<double> rx{1, 2, 3, 4}, ry{1.5, 1.5, 3, 4};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - 2.5) * (ry[i] - 2.5);
    sxx += (rx[i] - 2.5) * (rx[i] - 2.5);
    syy += (ry[i] - 2.5) * (ry[i] - 2.5);
  }
  CHECK(r == doctest::Approx(sxy / std::sqrt(sxx * syy)));
  CHECK(spearman({1, 2, 3}, {2, 2, 2}) == 0.0);
  CHECK_THROWS(spearman({1}, {1}));
}

TEST_CASE("pca2") {
  // points along (3, 4) / 5 plus an orthogonal wiggle uncorrelated with it
  const std::vector<double> along{-2, -2, -1, -1, 1, 1, 2, 2};
  const std::size_t n = along.size();
  std::vector<double> rows;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = along[i], w = (i % 2 ? 0.1 : -0.1);
    rows.push_back(0.6 * s - 0.8 * w);
    rows.push_back(0.8 * s + 0.6 * w);
    rows.push_back(1.0);
  }
  const auto p = pca2(rows, n, 3);
  REQUIRE(p.size() == n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(p[i * 2]) == doctest::Approx(std::abs(along[i])));
    CHECK(std::abs(p[i * 2 + 1]) == doctest::Approx(0.1));
  }
  CHECK(pca2({1.0, 2.0}, 2, 1).size() == 4);
}

TEST_CASE("study aggregation and csv") {
  StudyReport report;
  report.rows.push_back({"full", "", 0, {8, 2, 2, 8}});
  report.rows.push_back({"full", "", 1, {10, 0, 0, 10}});
  report.rows.push_back({"wo_text", "", 0, {5, 5, 5, 5}});
  report.failures.push_back({"wo_text", "", 1, "diverged, badly"});
  report.statistics.push_back({"purity", "modality=graph", 3, 0.75});
  const auto agg = report.aggregate();
  REQUIRE(agg.size() == 2);
  CHECK(agg[0].variant == "full");
  CHECK(agg[0].n == 2);
  CHECK(agg[0].accuracy_mean == doctest::Approx(0.9));
  CHECK(agg[0].accuracy_std == doctest::Approx(std::sqrt(0.02)));
  CHECK(agg[1].n == 1);
  CHECK(agg[1].accuracy_std == 0.0);
  CHECK_FALSE(report.find("missing"));

  std::ostringstream os;
  write_study_csv(os, report);
  const auto text = os.str();
  CHECK(count_lines(text) == 1 + 3 + 2 + 1 + 1);
  CHECK(text.find("failed,wo_text,,1,") != std::string::npos);
  CHECK(text.find("\"diverged, badly\"") != std::string::npos);
  CHECK(text.find("statistic,purity,modality=graph,3,") != std::string::npos);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(50, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  parallel_for(0, 4, [](std::size_t) { FAIL("called"); });
}

TEST_CASE("ablation variants") {
  const ModelConfig base;
  const auto v = ablation_variants(base);
  REQUIRE(v.size() == 12);
  CHECK(v[0].first == "full");
  CHECK(v[0].second == base);
  for (const auto& [name, cfg] : v) CHECK_NOTHROW(cfg.validate());
  const auto g = only(base, Modality::graph);
  CHECK(g.enabled == std::array<bool, 3>{true, false, false});
}

TEST_CASE("train command writes deterministic outputs") {
  const auto cfg = tiny();
  const auto a = scratch("train_a"), b = scratch("train_b");
  const auto report = cmd_train(cfg, a);
  auto serial = cfg;
  serial.threads = 1;
  cmd_train(serial, b);
  CHECK(report.failures.empty());
  CHECK(report.rows.size() == cfg.seeds.size());
  const auto metrics = slurp(a / "metrics.csv");
  CHECK(count_lines(metrics) == 1 + cfg.seeds.size() * cfg.max_epochs);
  CHECK(metrics == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "study.csv") == slurp(b / "study.csv"));
  CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  const auto model = load_checkpoint(a / "checkpoint.bin");
  CHECK(model.config() == cfg.model);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("study commands produce their files") {
  auto cfg = tiny();
  cfg.max_epochs = 2;
  cfg.seeds = {0};
  cfg.fractions = {0.5, 1.0};

  SUBCASE("manipulate") {
    const auto out = scratch("manip");
    const auto r = cmd_manipulate(cfg, out);
    CHECK(r.failures.empty());
    // 4 models x (clean + 3 modalities x 2 fractions)
    CHECK(r.rows.size() == 4 * 7);
    CHECK(r.statistics.size() == 4 * 3);
    fs::remove_all(out);
  }
  SUBCASE("efficiency") {
    for (auto mode : {EfficiencyMode::labels, EfficiencyMode::edges, EfficiencyMode::features}) {
      cfg.efficiency_mode = mode;
      const auto out = scratch("eff");
      const auto r = cmd_efficiency(cfg, out);
      CHECK(r.failures.empty());
      CHECK(r.rows.size() == 2);
      CHECK(r.statistics.size() == 1);
      fs::remove_all(out);
    }
  }
  SUBCASE("sweep") {
    cfg.sweep_graph = {1, 2};
    cfg.sweep_text = {1};
    cfg.sweep_metadata = {1};
    const auto out = scratch("sweep");
    const auto r = cmd_sweep(cfg, out);
    CHECK(r.rows.size() == 2);
    CHECK(count_lines(slurp(out / "grid.csv")) == 3);
    fs::remove_all(out);
  }
  SUBCASE("communities") {
    const auto out = scratch("comm");
    const auto r = cmd_communities(cfg, out);
    CHECK(r.failures.empty());
    CHECK(count_lines(slurp(out / "communities.tsv")) == 1 + 3 * cfg.synth.n_users);
    std::size_t purity = 0;
    for (const auto& s : r.statistics) purity += s.name == "purity";
    CHECK(purity == 3);
    for (const auto& s : r.statistics) CHECK((s.value >= 0.0 && s.value <= 1.0));
    fs::remove_all(out);
  }
  SUBCASE("ablate") {
    const auto out = scratch("ablate");
    const auto r = cmd_ablate(cfg, out);
    CHECK(r.failures.empty());
    CHECK(r.rows.size() == 12);
    fs::remove_all(out);
  }
}
