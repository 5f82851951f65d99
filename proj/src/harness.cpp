#include "botmoe/harness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "botmoe/keyvalue.hpp"

namespace botmoe {

std::string_view to_string(EfficiencyMode m) {
  switch (m) {
    case EfficiencyMode::labels: return "labels";
    case EfficiencyMode::edges: return "edges";
    case EfficiencyMode::features: return "features";
  }
  return "?";
}

// ---- config -----------------------------------------------------------------

namespace {

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_same_v<T, double>) out += format_double(v);
    else if constexpr (std::is_same_v<T, Modality>) out += to_string(v);
    else out += std::to_string(v);
  }
  return out;
}

std::vector<std::size_t> parse_count_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<std::size_t>(key, item));
  return out;
}

std::string short_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<std::uint64_t>("seeds", item));
  if (out.empty()) throw std::invalid_argument("seeds must not be empty");
  return out;
}

std::vector<double> parse_fraction_list(std::string_view text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) {
    const double f = parse_number<double>("fractions", item);
    if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("fraction " + item + " outside [0, 1]");
    out.push_back(f);
  }
  if (out.empty()) throw std::invalid_argument("fractions must not be empty");
  return out;
}

std::vector<Modality> parse_modality_list(std::string_view text) {
  std::vector<Modality> out;
  for (const auto& item : split_list(text)) {
    const auto m = parse_modality(item);
    if (!m) throw std::invalid_argument("unknown modality '" + item + "' (graph|text|metadata)");
    out.push_back(*m);
  }
  if (out.empty()) throw std::invalid_argument("modalities must not be empty");
  return out;
}

void RunConfig::set(std::string_view key, std::string_view raw) {
  const auto value = trim(raw);
  auto num = [&]<typename T>(T& field) { field = parse_number<T>(key, value); };
  if (key == "source") {
    if (value == "synthetic") source = DataSource::synthetic;
    else if (value == "files") source = DataSource::files;
    else throw std::invalid_argument("bad value for source: '" + std::string(value) + "' (synthetic|files)");
  } else if (key == "users_file") {
    users_file = std::string(value);
  } else if (key == "edges_file") {
    edges_file = std::string(value);
  } else if (key == "splits_file") {
    splits_file = std::string(value);
  } else if (key == "vary_world") {
    vary_world = parse_flag(key, value);
  } else if (key == "synth.n_users") {
    num(synth.n_users);
  } else if (key == "synth.bot_fraction") {
    num(synth.bot_fraction);
  } else if (key == "synth.n_communities") {
    num(synth.n_communities);
  } else if (key == "synth.metadata_separation") {
    num(synth.metadata_separation);
  } else if (key == "synth.text_separation") {
    num(synth.text_separation);
  } else if (key == "synth.embed_dim") {
    num(synth.embed_dim);
  } else if (key == "synth.tweets_per_user") {
    num(synth.tweets_per_user);
  } else if (key == "synth.intra_edge_prob") {
    num(synth.intra_edge_prob);
  } else if (key == "synth.inter_edge_prob") {
    num(synth.inter_edge_prob);
  } else if (key == "synth.bot_bot_affinity") {
    num(synth.bot_bot_affinity);
  } else if (key == "synth.seed") {
    num(synth.seed);
  } else if (key == "synth.train_fraction") {
    num(synth.train_fraction);
  } else if (key == "synth.valid_fraction") {
    num(synth.valid_fraction);
  } else if (key == "synth.community_spread") {
    num(synth.community_spread);
  } else if (key == "synth.community_twist") {
    num(synth.community_twist);
  } else if (key == "lr") {
    num(adam.lr);
  } else if (key == "beta1") {
    num(adam.beta1);
  } else if (key == "beta2") {
    num(adam.beta2);
  } else if (key == "adam_eps") {
    num(adam.eps);
  } else if (key == "l2") {
    num(loss.l2);
  } else if (key == "balance_coef") {
    num(loss.balance);
  } else if (key == "w_importance") {
    num(loss.w_importance);
  } else if (key == "w_load") {
    num(loss.w_load);
  } else if (key == "max_epochs") {
    num(max_epochs);
  } else if (key == "batch_size") {
    num(batch_size);
  } else if (key == "seeds") {
    seeds = parse_seed_list(value);
  } else if (key == "threads") {
    num(threads);
  } else if (key == "fractions") {
    fractions = parse_fraction_list(value);
  } else if (key == "modalities") {
    modalities = parse_modality_list(value);
  } else if (key == "sweep_graph") {
    sweep_graph = parse_count_list(key, value);
  } else if (key == "sweep_text") {
    sweep_text = parse_count_list(key, value);
  } else if (key == "sweep_metadata") {
    sweep_metadata = parse_count_list(key, value);
  } else if (key == "efficiency_mode") {
    if (value == "labels") efficiency_mode = EfficiencyMode::labels;
    else if (value == "edges") efficiency_mode = EfficiencyMode::edges;
    else if (value == "features") efficiency_mode = EfficiencyMode::features;
    else throw std::invalid_argument("bad value for efficiency_mode: '" + std::string(value) + "' (labels|edges|features)");
  } else if (key == "ablations") {
    ablations = split_list(value);
  } else if (!model.apply(key, value)) {
    throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
  }
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (source == DataSource::synthetic) {
    synth.validate();
  } else if (users_file.empty() || edges_file.empty() || splits_file.empty()) {
    throw std::invalid_argument("source = files needs users_file, edges_file and splits_file");
  }
  if (!(adam.lr >= 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
      !(adam.eps > 0.0)) {
    throw std::invalid_argument("invalid optimizer settings");
  }
  if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
  if (fractions.empty()) throw std::invalid_argument("fractions must not be empty");
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("fraction " + format_double(f) + " outside [0, 1]");
  }
  if (modalities.empty()) throw std::invalid_argument("modalities must not be empty");
  if (!ablations.empty()) {
    const auto known = ablation_variants(model);
    for (const auto& name : ablations) {
      if (std::none_of(known.begin(), known.end(), [&](const auto& v) { return v.first == name; }))
        throw std::invalid_argument("unknown ablation variant '" + name + "'");
    }
  }
  for (const auto* list : {&sweep_graph, &sweep_text, &sweep_metadata}) {
    if (list->empty()) throw std::invalid_argument("sweep lists must not be empty");
    for (auto c : *list)
      if (c == 0) throw std::invalid_argument("sweep expert counts must be at least 1");
  }
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  os << "source = " << (source == DataSource::synthetic ? "synthetic" : "files") << '\n';
  if (source == DataSource::files) {
    os << "users_file = " << users_file.string() << "\nedges_file = " << edges_file.string()
       << "\nsplits_file = " << splits_file.string() << '\n';
  }
  os << "vary_world = " << (vary_world ? "true" : "false") << '\n'
     << "synth.n_users = " << synth.n_users << '\n'
     << "synth.bot_fraction = " << format_double(synth.bot_fraction) << '\n'
     << "synth.n_communities = " << synth.n_communities << '\n'
     << "synth.metadata_separation = " << format_double(synth.metadata_separation) << '\n'
     << "synth.text_separation = " << format_double(synth.text_separation) << '\n'
     << "synth.embed_dim = " << synth.embed_dim << '\n'
     << "synth.tweets_per_user = " << synth.tweets_per_user << '\n'
     << "synth.intra_edge_prob = " << format_double(synth.intra_edge_prob) << '\n'
     << "synth.inter_edge_prob = " << format_double(synth.inter_edge_prob) << '\n'
     << "synth.bot_bot_affinity = " << format_double(synth.bot_bot_affinity) << '\n'
     << "synth.seed = " << synth.seed << '\n'
     << "synth.train_fraction = " << format_double(synth.train_fraction) << '\n'
     << "synth.valid_fraction = " << format_double(synth.valid_fraction) << '\n'
     << "synth.community_spread = " << format_double(synth.community_spread) << '\n'
     << "synth.community_twist = " << format_double(synth.community_twist) << '\n';
  for (const auto& [key, value] : model.entries()) os << key << " = " << value << '\n';
  os << "lr = " << format_double(adam.lr) << '\n'
     << "beta1 = " << format_double(adam.beta1) << '\n'
     << "beta2 = " << format_double(adam.beta2) << '\n'
     << "adam_eps = " << format_double(adam.eps) << '\n'
     << "l2 = " << format_double(loss.l2) << '\n'
     << "balance_coef = " << format_double(loss.balance) << '\n'
     << "w_importance = " << format_double(loss.w_importance) << '\n'
     << "w_load = " << format_double(loss.w_load) << '\n'
     << "max_epochs = " << max_epochs << '\n'
     << "batch_size = " << batch_size << '\n'
     << "seeds = " << join(seeds) << '\n'
     << "fractions = " << join(fractions) << '\n'
     << "modalities = " << join(modalities) << '\n'
     << "sweep_graph = " << join(sweep_graph) << '\n'
     << "sweep_text = " << join(sweep_text) << '\n'
     << "sweep_metadata = " << join(sweep_metadata) << '\n'
     << "efficiency_mode = " << to_string(efficiency_mode) << '\n';
  if (!ablations.empty()) {
    os << "ablations = ";
    for (std::size_t i = 0; i < ablations.size(); ++i) os << (i ? "," : "") << ablations[i];
    os << '\n';
  }
  return os.str();
}

RunConfig parse_run_config(std::istream& in, const std::string& source_name) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto where = source_name + ":" + std::to_string(line_no) + ": ";
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument(where + "expected key = value");
    const std::string key(trim(view.substr(0, eq)));
    if (!seen.insert(key).second) throw std::invalid_argument(where + "duplicate key '" + key + "'");
    try {
      cfg.set(key, view.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  return parse_run_config(in, path.string());
}

Dataset build_dataset(const RunConfig& cfg, std::uint64_t seed) {
  if (cfg.source == DataSource::files) {
    return zscore_normalize(load_dataset(cfg.users_file, cfg.edges_file, cfg.splits_file));
  }
  SynthConfig synth = cfg.synth;
  if (cfg.vary_world) synth.seed += seed;
  return zscore_normalize(generate_world(synth));
}

TrainConfig make_train_config(const RunConfig& cfg, const ModelConfig& model, std::uint64_t seed) {
  TrainConfig tc;
  tc.model = model;
  tc.loss = cfg.loss;
  tc.adam = cfg.adam;
  tc.max_epochs = cfg.max_epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = seed;
  return tc;
}

// ---- reports ----------------------------------------------------------------

std::vector<Aggregate> StudyReport::aggregate() const {
  std::vector<Aggregate> out;
  std::map<std::pair<std::string, std::string>, std::vector<const StudyRow*>> groups;
  for (const auto& r : rows) {
    auto& g = groups[{r.variant, r.setting}];
    if (g.empty()) out.push_back({r.variant, r.setting});
    g.push_back(&r);
  }
  for (auto& a : out) {
    const auto& g = groups[{a.variant, a.setting}];
    a.n = g.size();
    auto stats = [&](auto get, double& mean, double& sd) {
      double total = 0.0;
      for (const auto* r : g) total += get(r->metrics);
      mean = total / static_cast<double>(g.size());
      double ss = 0.0;
      for (const auto* r : g) ss += (get(r->metrics) - mean) * (get(r->metrics) - mean);
      sd = g.size() > 1 ? std::sqrt(ss / static_cast<double>(g.size() - 1)) : 0.0;
    };
    stats([](const Metrics& m) { return m.accuracy(); }, a.accuracy_mean, a.accuracy_std);
    stats([](const Metrics& m) { return m.f1(); }, a.f1_mean, a.f1_std);
  }
  return out;
}

std::optional<Aggregate> StudyReport::find(std::string_view variant, std::string_view setting) const {
  for (const auto& a : aggregate()) {
    if (a.variant == variant && a.setting == setting) return a;
  }
  return std::nullopt;
}

namespace {

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

void write_study_csv(std::ostream& os, const StudyReport& report) {
  os << "row_type,variant,setting,seed,n_seeds,accuracy,accuracy_std,f1,f1_std,precision,recall,tp,fp,fn,tn,value,error\n";
  for (const auto& r : report.rows) {
    const auto& m = r.metrics;
    os << "seed," << csv_quote(r.variant) << ',' << csv_quote(r.setting) << ',' << r.seed << ",1,"
       << format_double(m.accuracy()) << ",," << format_double(m.f1()) << ",," << format_double(m.precision()) << ','
       << format_double(m.recall()) << ',' << m.tp << ',' << m.fp << ',' << m.fn << ',' << m.tn << ",,\n";
  }
  for (const auto& a : report.aggregate()) {
    os << "mean," << csv_quote(a.variant) << ',' << csv_quote(a.setting) << ",," << a.n << ','
       << format_double(a.accuracy_mean) << ',' << format_double(a.accuracy_std) << ',' << format_double(a.f1_mean) << ','
       << format_double(a.f1_std) << ",,,,,,,,\n";
  }
  for (const auto& s : report.statistics) {
    os << "statistic," << csv_quote(s.name) << ',' << csv_quote(s.setting) << ','
       << (s.seed ? std::to_string(*s.seed) : "") << ",,,,,,,,,,,," << format_double(s.value) << ",\n";
  }
  for (const auto& f : report.failures) {
    os << "failed," << csv_quote(f.variant) << ',' << csv_quote(f.setting) << ',' << f.seed << ",,,,,,,,,,,,,"
       << csv_quote(f.error) << '\n';
  }
}

// ---- utilities --------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& t : pool) t.join();
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double assignment_purity(const std::vector<std::size_t>& assigned, const std::vector<std::size_t>& truth) {
  if (assigned.size() != truth.size()) throw std::invalid_argument("assignment_purity: length mismatch");
  if (assigned.empty()) return 0.0;
  const std::size_t rows = *std::max_element(assigned.begin(), assigned.end()) + 1;
  const std::size_t cols = *std::max_element(truth.begin(), truth.end()) + 1;
  const std::size_t n = std::max(rows, cols);
  std::vector<std::vector<double>> cost(n + 1, std::vector<double>(n + 1, 0.0));
  for (std::size_t i = 0; i < assigned.size(); ++i) cost[assigned[i] + 1][truth[i] + 1] -= 1.0;

  // Hungarian method (potentials), 1-based, minimizes total cost.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0][j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double matched = 0.0;
  for (std::size_t j = 1; j <= n; ++j) matched -= cost[p[j]][j];
  return matched / static_cast<double>(assigned.size());
}

std::vector<double> pca2(const std::vector<double>& rows, std::size_t n, std::size_t dim) {
  if (rows.size() != n * dim) throw std::invalid_argument("pca2: size mismatch");
  std::vector<double> out(n * 2, 0.0);
  if (n == 0 || dim == 0) return out;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i * dim + j];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(std::max<std::size_t>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const auto& vecs = solver.eigenvectors();
  for (std::size_t c = 0; c < std::min<std::size_t>(2, dim); ++c) {
    Eigen::VectorXd axis = vecs.col(static_cast<Eigen::Index>(dim - 1 - c));
    Eigen::Index peak = 0;
    axis.cwiseAbs().maxCoeff(&peak);
    if (axis(peak) < 0) axis = -axis;
    const Eigen::VectorXd proj = x * axis;
    for (std::size_t i = 0; i < n; ++i) out[i * 2 + c] = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

std::string setting_of(Modality m, double fraction) {
  return "modality=" + std::string(to_string(m)) + ";fraction=" + short_number(fraction);
}

std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const ModelConfig& base) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  out.emplace_back("full", base);
  auto add = [&](const std::string& name, auto edit) {
    ModelConfig m = base;
    edit(m);
    out.emplace_back(name, m);
  };
  add("moe_single_expert", [](ModelConfig& m) { m.experts = {1, 1, 1}; });
  add("moe_mlp", [](ModelConfig& m) { m.moe = MoeMode::mlp; });
  add("moe_fully_activated", [](ModelConfig& m) { m.top_k = 0; });
  add("wo_moe", [](ModelConfig& m) { m.moe = MoeMode::none; });
  for (auto mod : kModalities) {
    add("wo_" + std::string(to_string(mod)), [&](ModelConfig& m) { m.enabled[static_cast<std::size_t>(mod)] = false; });
  }
  add("fusion_mean", [](ModelConfig& m) { m.fusion = FusionMode::mean; });
  add("fusion_max", [](ModelConfig& m) { m.fusion = FusionMode::max; });
  add("fusion_min", [](ModelConfig& m) { m.fusion = FusionMode::min; });
  add("fusion_mlp", [](ModelConfig& m) { m.fusion = FusionMode::mlp; });
  return out;
}

ModelConfig only(const ModelConfig& base, Modality m) {
  ModelConfig out = base;
  out.enabled = {false, false, false};
  out.enabled[static_cast<std::size_t>(m)] = true;
  return out;
}

// ---- studies ----------------------------------------------------------------

namespace {

struct Job {
  std::string variant;
  std::string setting;
  std::uint64_t seed = 0;
};

template <typename Result>
struct Outcome {
  std::optional<Result> value;
  std::string error;
};

template <typename Result>
std::vector<Outcome<Result>> run_jobs(const RunConfig& cfg, const std::vector<Job>& jobs,
                                      const std::function<Result(const Job&)>& work) {
  std::vector<Outcome<Result>> out(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    try {
      out[i].value.emplace(work(jobs[i]));
    } catch (const std::exception& e) {
      out[i].error = e.what();
      Tape::current().reset();
    }
  });
  return out;
}

std::filesystem::path prepare(const RunConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  std::filesystem::create_directories(out);
  std::ofstream(out / "config.txt") << cfg.dump();
  return out;
}

void write_report(const std::filesystem::path& out, StudyReport& report) {
  std::ofstream os(out / "study.csv");
  write_study_csv(os, report);
  if (!os) throw std::runtime_error("failed writing " + (out / "study.csv").string());
}

struct TrainedRun {
  TrainRun run;
  Metrics test;
};

TrainedRun train_and_test(const Dataset& world, const RunConfig& cfg, const ModelConfig& model, std::uint64_t seed) {
  auto run = train(world, make_train_config(cfg, model, seed));
  const auto test = evaluate(run.state.model, world, Split::test);
  return {std::move(run), test};
}

void collect_failure(StudyReport& report, const Job& job, const std::string& error) {
  report.failures.push_back({job.variant, job.setting, job.seed, error});
}

}  // namespace

StudyReport cmd_train(const RunConfig& cfg, const std::filesystem::path& out) {
  prepare(cfg, out);
  std::vector<Job> jobs;
  for (auto s : cfg.seeds) jobs.push_back({"full", "", s});
  auto results = run_jobs<TrainedRun>(cfg, jobs, [&](const Job& job) {
    return train_and_test(build_dataset(cfg, job.seed), cfg, cfg.model, job.seed);
  });

  StudyReport report;
  report.study = "train";
  std::ofstream metrics(out / "metrics.csv");
  write_metrics_header(metrics, cfg.model);
  bool saved = false;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].value) {
      collect_failure(report, jobs[i], results[i].error);
      continue;
    }
    const auto& r = *results[i].value;
    write_metrics_rows(metrics, jobs[i].seed, r.run.log);
    report.rows.push_back({"full", "", jobs[i].seed, r.test});
    report.statistics.push_back({"best_epoch", "", jobs[i].seed, static_cast<double>(r.run.state.best_epoch)});
    if (!saved) {
      save_checkpoint(out / "checkpoint.bin", r.run.state.model);
      saved = true;
    }
  }
  write_report(out, report);
  return report;
}

StudyReport cmd_manipulate(const RunConfig& cfg, const std::filesystem::path& out) {
  prepare(cfg, out);
  std::vector<std::pair<std::string, ModelConfig>> variants{{"full", cfg.model}};
  for (auto m : kModalities) variants.emplace_back(std::string(to_string(m)) + "_only", only(cfg.model, m));

  std::vector<Job> jobs;
  std::vector<std::size_t> variant_of;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (auto s : cfg.seeds) {
      jobs.push_back({variants[v].first, "", s});
      variant_of.push_back(v);
    }
  }
  using Rows = std::vector<StudyRow>;
  auto results = run_jobs<Rows>(cfg, jobs, [&](const Job& job) {
    const std::size_t v = variant_of[static_cast<std::size_t>(&job - jobs.data())];
    const Dataset world = build_dataset(cfg, job.seed);
    const auto trained = train_and_test(world, cfg, variants[v].second, job.seed);
    const auto& model = trained.run.state.model;
    Rows rows;
    rows.push_back({job.variant, "clean", job.seed, trained.test});
    for (auto m : cfg.modalities) {
      for (double f : cfg.fractions) {
        const auto setting = setting_of(m, f);
        const std::uint64_t mseed = Rng::mix(job.seed, fnv1a(setting));
        const Dataset attacked = m == Modality::graph
                                     ? add_adversarial_edges(world, f, mseed)
                                     : manipulate_features(world, m == Modality::text ? FeatureModality::text
                                                                                      : FeatureModality::metadata,
                                                           f, mseed);
        rows.push_back({job.variant, setting, job.seed, evaluate(model, attacked, Split::test)});
      }
    }
    return rows;
  });

  StudyReport report;
  report.study = "manipulate";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].value) {
      collect_failure(report, jobs[i], results[i].error);
      continue;
    }
    for (auto& r : *results[i].value) report.rows.push_back(std::move(r));
  }
  const double top = *std::max_element(cfg.fractions.begin(), cfg.fractions.end());
  for (const auto& [name, model] : variants) {
    const auto clean = report.find(name, "clean");
    if (!clean) continue;
    for (auto m : cfg.modalities) {
      const auto attacked = report.find(name, setting_of(m, top));
      if (!attacked) continue;
      report.statistics.push_back(
          {"accuracy_drop", name + ";" + setting_of(m, top), std::nullopt, clean->accuracy_mean - attacked->accuracy_mean});
    }
  }
  write_report(out, report);
  return report;
}

StudyReport cmd_ablate(const RunConfig& cfg, const std::filesystem::path& out) {
  prepare(cfg, out);
  auto variants = ablation_variants(cfg.model);
  if (!cfg.ablations.empty()) {
    std::erase_if(variants, [&](const auto& v) {
      return std::find(cfg.ablations.begin(), cfg.ablations.end(), v.first) == cfg.ablations.end();
    });
  }
  std::vector<Job> jobs;
  std::vector<std::size_t> variant_of;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (auto s : cfg.seeds) {
      jobs.push_back({variants[v].first, "", s});
      variant_of.push_back(v);
    }
  }
  auto results = run_jobs<Metrics>(cfg, jobs, [&](const Job& job) {
    const std::size_t v = variant_of[static_cast<std::size_t>(&job - jobs.data())];
    return train_and_test(build_dataset(cfg, job.seed), cfg, variants[v].second, job.seed).test;
  });
  StudyReport report;
  report.study = "ablate";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (results[i].value) report.rows.push_back({jobs[i].variant, "", jobs[i].seed, *results[i].value});
    else collect_failure(report, jobs[i], results[i].error);
  }
  write_report(out, report);
  return report;
}

StudyReport cmd_sweep(const RunConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  const std::size_t cells = cfg.sweep_graph.size() * cfg.sweep_text.size() * cfg.sweep_metadata.size();
  if (cells > 64) throw std::invalid_argument("expert sweep has " + std::to_string(cells) + " cells (limit 64)");
  prepare(cfg, out);
  std::vector<Job> jobs;
  std::vector<std::array<std::size_t, 3>> counts;
  for (auto g : cfg.sweep_graph)
    for (auto t : cfg.sweep_text)
      for (auto m : cfg.sweep_metadata)
        for (auto s : cfg.seeds) {
          jobs.push_back({"experts",
                          "n_g=" + std::to_string(g) + ";n_t=" + std::to_string(t) + ";n_m=" + std::to_string(m), s});
          counts.push_back({g, t, m});
        }
  auto results = run_jobs<Metrics>(cfg, jobs, [&](const Job& job) {
    ModelConfig model = cfg.model;
    model.experts = counts[static_cast<std::size_t>(&job - jobs.data())];
    return train_and_test(build_dataset(cfg, job.seed), cfg, model, job.seed).test;
  });
  StudyReport report;
  report.study = "sweep";
  std::ofstream grid(out / "grid.csv");
  grid << "n_g,n_t,n_m,seed,accuracy,f1\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].value) {
      collect_failure(report, jobs[i], results[i].error);
      continue;
    }
    const auto& m = *results[i].value;
    report.rows.push_back({jobs[i].variant, jobs[i].setting, jobs[i].seed, m});
    grid << counts[i][0] << ',' << counts[i][1] << ',' << counts[i][2] << ',' << jobs[i].seed << ','
         << format_double(m.accuracy()) << ',' << format_double(m.f1()) << '\n';
  }
  write_report(out, report);
  return report;
}

StudyReport cmd_efficiency(const RunConfig& cfg, const std::filesystem::path& out) {
  for (double f : cfg.fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("data-efficiency fractions must lie in (0, 1]");
  }
  prepare(cfg, out);
  const std::string mode(to_string(cfg.efficiency_mode));
  auto setting = [&](double f) { return "mode=" + mode + ";fraction=" + short_number(f); };
  std::vector<Job> jobs;
  std::vector<double> fraction_of;
  for (double f : cfg.fractions)
    for (auto s : cfg.seeds) {
      jobs.push_back({"full", setting(f), s});
      fraction_of.push_back(f);
    }
  auto results = run_jobs<Metrics>(cfg, jobs, [&](const Job& job) {
    const double f = fraction_of[static_cast<std::size_t>(&job - jobs.data())];
    Dataset world = build_dataset(cfg, job.seed);
    if (f < 1.0) {
      const std::uint64_t sseed = Rng::mix(job.seed, fnv1a(job.setting));
      switch (cfg.efficiency_mode) {
        case EfficiencyMode::labels: world = make_splits(world, f, sseed); break;
        case EfficiencyMode::edges: world = subsample_edges(world, f, sseed); break;
        case EfficiencyMode::features: world = mask_numeric_columns(world, 1.0 - f, sseed); break;
      }
    }
    return train_and_test(world, cfg, cfg.model, job.seed).test;
  });
  StudyReport report;
  report.study = "efficiency";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (results[i].value) report.rows.push_back({jobs[i].variant, jobs[i].setting, jobs[i].seed, *results[i].value});
    else collect_failure(report, jobs[i], results[i].error);
  }
  std::vector<double> xs, ys;
  for (double f : cfg.fractions) {
    if (auto a = report.find("full", setting(f))) {
      xs.push_back(f);
      ys.push_back(a->f1_mean);
    }
  }
  if (xs.size() >= 2) report.statistics.push_back({"spearman_fraction_f1", "mode=" + mode, std::nullopt, spearman(xs, ys)});
  write_report(out, report);
  return report;
}

StudyReport cmd_communities(const RunConfig& cfg, const std::filesystem::path& out,
                            const std::optional<std::filesystem::path>& checkpoint) {
  prepare(cfg, out);
  struct Export {
    std::string tsv;
    Metrics test;
    std::vector<std::pair<Modality, double>> purity;
  };
  std::vector<Job> jobs;
  if (checkpoint) jobs.push_back({"checkpoint", "", cfg.seeds.front()});
  else
    for (auto s : cfg.seeds) jobs.push_back({"full", "", s});

  auto results = run_jobs<Export>(cfg, jobs, [&](const Job& job) {
    const Dataset world = build_dataset(cfg, job.seed);
    std::optional<BotMoE> holder;
    if (checkpoint) holder.emplace(load_checkpoint(*checkpoint));
    else holder.emplace(std::move(train(world, make_train_config(cfg, cfg.model, job.seed)).state.model));
    const BotMoE& model = *holder;
    if (model.embed_dim() != world.embed_dim()) throw std::invalid_argument("checkpoint does not match the dataset");
    Export ex;
    ex.test = evaluate(model, world, Split::test);
    NoGradGuard guard;
    const auto fwd = model.forward(input_features(world), ForwardContext{});
    const std::size_t n = world.size();
    std::ostringstream os;
    for (auto m : kModalities) {
      const auto& routing = fwd.routing[static_cast<std::size_t>(m)];
      if (!routing) continue;
      const std::size_t dim = routing->z.dim(1);
      const std::vector<double> z(routing->z.data().begin(), routing->z.data().end());
      const auto proj = pca2(z, n, dim);
      std::vector<std::size_t> top1(n), truth;
      bool planted = true;
      for (std::size_t i = 0; i < n; ++i) {
        top1[i] = routing->gate.top1(i);
        if (world.users[i].community) truth.push_back(static_cast<std::size_t>(*world.users[i].community));
        else planted = false;
      }
      if (planted) ex.purity.emplace_back(m, assignment_purity(top1, truth));
      for (std::size_t i = 0; i < n; ++i) {
        const auto& u = world.users[i];
        os << job.seed << '\t' << u.id << '\t' << (u.community ? std::to_string(*u.community) : "") << '\t'
           << (u.label ? std::to_string(*u.label) : "") << '\t' << to_string(u.split) << '\t' << to_string(m) << '\t'
           << top1[i] << '\t';
        for (std::size_t j = 0; j < routing->gate.experts(); ++j)
          os << (j ? "," : "") << format_double(routing->gate.weights.at(i, j));
        os << '\t' << format_double(proj[i * 2]) << '\t' << format_double(proj[i * 2 + 1]) << '\t';
        for (std::size_t j = 0; j < dim; ++j) os << (j ? "," : "") << format_double(z[i * dim + j]);
        os << '\n';
      }
    }
    ex.tsv = os.str();
    return ex;
  });

  StudyReport report;
  report.study = "communities";
  std::ofstream tsv(out / "communities.tsv");
  tsv << "seed\tuser\tcommunity\tlabel\tsplit\tmodality\ttop1\tgate_weights\tpca_x\tpca_y\tembedding\n";
  std::map<Modality, std::vector<double>> purities;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].value) {
      collect_failure(report, jobs[i], results[i].error);
      continue;
    }
    const auto& ex = *results[i].value;
    tsv << ex.tsv;
    report.rows.push_back({jobs[i].variant, "", jobs[i].seed, ex.test});
    for (const auto& [m, p] : ex.purity) {
      report.statistics.push_back({"purity", "modality=" + std::string(to_string(m)), jobs[i].seed, p});
      purities[m].push_back(p);
    }
  }
  for (auto m : kModalities) {
    const auto it = purities.find(m);
    if (it == purities.end()) continue;
    const double mean = std::accumulate(it->second.begin(), it->second.end(), 0.0) / static_cast<double>(it->second.size());
    report.statistics.push_back({"mean_purity", "modality=" + std::string(to_string(m)), std::nullopt, mean});
  }
  write_report(out, report);
  return report;
}

}  // namespace botmoe
