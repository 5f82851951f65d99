#include "botmoe/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace botmoe {
namespace {

std::vector<std::string_view> split_on(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(text.substr(start));
      return parts;
    }
    parts.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw DataError("cannot open " + path.string());
  }

  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++number_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(path_.filename().string() + ":" + std::to_string(number_) + ": " + what);
  }

  std::size_t line_number() const { return number_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t number_ = 0;
};

double parse_double(std::string_view text, const LineReader& reader) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    reader.fail("malformed number '" + std::string(text) + "'");
  }
  return value;
}

long parse_int(std::string_view text, const LineReader& reader) {
  long value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) reader.fail("malformed integer '" + std::string(text) + "'");
  return value;
}

std::vector<double> parse_vector(std::string_view text, const LineReader& reader) {
  std::vector<double> values;
  if (text.empty()) return values;
  for (auto part : split_on(text, ',')) values.push_back(parse_double(part, reader));
  return values;
}

void write_vector(std::ostream& os, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << format_double(values[i]);
}

UserRecord parse_user(std::string_view line, const LineReader& reader) {
  UserRecord user;
  std::set<std::string_view> seen;
  bool have_split = false;
  for (auto field : split_on(line, '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string_view::npos) reader.fail("field without '=': '" + std::string(field) + "'");
    const auto key = field.substr(0, eq);
    const auto value = field.substr(eq + 1);
    if (!seen.insert(key).second) reader.fail("duplicate key '" + std::string(key) + "'");
    if (key == "id") {
      if (value.empty()) reader.fail("empty id");
      user.id = std::string(value);
    } else if (key == "label") {
      const auto label = parse_int(value, reader);
      if (label != 0 && label != 1) reader.fail("label must be 0 or 1");
      user.label = static_cast<int>(label);
    } else if (key == "split") {
      const auto split = parse_split(value);
      if (!split) reader.fail("unknown split '" + std::string(value) + "'");
      user.split = *split;
      have_split = true;
    } else if (key == "community") {
      user.community = static_cast<int>(parse_int(value, reader));
    } else if (key == "numeric") {
      const auto v = parse_vector(value, reader);
      if (v.size() != kNumNumeric) reader.fail("numeric needs exactly 5 values");
      std::copy(v.begin(), v.end(), user.numeric.begin());
    } else if (key == "categorical") {
      const auto parts = value.empty() ? std::vector<std::string_view>{} : split_on(value, ',');
      if (parts.size() != kNumCategorical) reader.fail("categorical needs exactly 3 values");
      for (std::size_t i = 0; i < kNumCategorical; ++i) {
        const auto flag = parse_int(parts[i], reader);
        if (flag != 0 && flag != 1) reader.fail("categorical flags must be 0 or 1");
        user.categorical[i] = static_cast<int>(flag);
      }
    } else if (key == "description") {
      user.description = parse_vector(value, reader);
    } else if (key == "tweets") {
      if (!value.empty()) {
        for (auto tweet : split_on(value, ';')) user.tweets.push_back(parse_vector(tweet, reader));
      }
    } else {
      reader.fail("unknown key '" + std::string(key) + "'");
    }
  }
  for (const char* required : {"id", "numeric", "categorical", "description", "tweets"}) {
    if (!seen.contains(required)) reader.fail(std::string("missing key '") + required + "'");
  }
  if (!have_split) user.split = Split::train;
  return user;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view to_string(Relation relation) {
  return relation == Relation::follower ? "follower" : "following";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "valid") return Split::valid;
  if (text == "test") return Split::test;
  return std::nullopt;
}

std::optional<Relation> parse_relation(std::string_view text) {
  if (text == "follower") return Relation::follower;
  if (text == "following") return Relation::following;
  return std::nullopt;
}

std::string format_double(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

HeteroGraph::HeteroGraph(std::size_t n_nodes) : n_nodes_(n_nodes) {
  for (auto& lists : in_) lists.assign(n_nodes, {});
}

void HeteroGraph::add_edge(Relation relation, std::size_t src, std::size_t dst) {
  if (src >= n_nodes_ || dst >= n_nodes_) throw std::out_of_range("HeteroGraph::add_edge: endpoint out of range");
  edges_[index(relation)].push_back({src, dst});
  in_[index(relation)][dst].push_back(src);
}

bool HeteroGraph::has_edge(Relation relation, std::size_t src, std::size_t dst) const {
  const auto& sources = in_[index(relation)].at(dst);
  return std::find(sources.begin(), sources.end(), src) != sources.end();
}

SparseMatrix HeteroGraph::mean_aggregator(Relation relation) const {
  SparseMatrix m;
  m.rows = n_nodes_;
  m.cols = n_nodes_;
  m.row_ptr.reserve(n_nodes_ + 1);
  m.row_ptr.push_back(0);
  for (std::size_t i = 0; i < n_nodes_; ++i) {
    const auto& sources = in_[index(relation)][i];
    const double w = 1.0 / static_cast<double>(std::max<std::size_t>(sources.size(), 1));
    for (auto j : sources) {
      m.col_idx.push_back(j);
      m.values.push_back(w);
    }
    m.row_ptr.push_back(m.col_idx.size());
  }
  return m;
}

std::size_t Dataset::embed_dim() const { return users.empty() ? 0 : users.front().description.size(); }

std::vector<std::size_t> Dataset::labeled(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (users[i].split == split && users[i].label) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::members(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (users[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<int> Dataset::labels_of(const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(users.at(i).label.value());
  return out;
}

Dataset load_dataset(const std::filesystem::path& users_path, const std::filesystem::path& edges_path,
                     const std::filesystem::path& splits_path) {
  Dataset d;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<bool> split_in_users;
  std::string line;
  {
    LineReader reader(users_path);
    std::optional<std::size_t> dim;
    while (reader.next(line)) {
      const bool explicit_split = line.find("\tsplit=") != std::string::npos || line.rfind("split=", 0) == 0;
      auto user = parse_user(line, reader);
      if (!dim) dim = user.description.size();
      if (user.description.size() != *dim) reader.fail("description dimension differs from earlier users");
      for (const auto& t : user.tweets) {
        if (t.size() != *dim) reader.fail("tweet embedding dimension differs from description dimension");
      }
      if (!index.emplace(user.id, d.users.size()).second) reader.fail("duplicate user id '" + user.id + "'");
      split_in_users.push_back(explicit_split);
      d.users.push_back(std::move(user));
    }
  }
  d.graph = HeteroGraph(d.users.size());
  auto resolve = [&](std::string_view id, const LineReader& reader) {
    const auto it = index.find(std::string(id));
    if (it == index.end()) reader.fail("unknown user id '" + std::string(id) + "'");
    return it->second;
  };
  {
    LineReader reader(edges_path);
    while (reader.next(line)) {
      const auto parts = split_on(line, '\t');
      if (parts.size() != 3) reader.fail("expected src<TAB>dst<TAB>relation");
      const auto src = resolve(parts[0], reader);
      const auto dst = resolve(parts[1], reader);
      const auto relation = parse_relation(parts[2]);
      if (!relation) reader.fail("unknown relation '" + std::string(parts[2]) + "'");
      d.graph.add_edge(*relation, src, dst);
    }
  }
  {
    LineReader reader(splits_path);
    std::vector<bool> assigned(d.users.size(), false);
    while (reader.next(line)) {
      const auto parts = split_on(line, '\t');
      if (parts.size() != 2) reader.fail("expected id<TAB>split");
      const auto i = resolve(parts[0], reader);
      const auto split = parse_split(parts[1]);
      if (!split) reader.fail("unknown split '" + std::string(parts[1]) + "'");
      if (assigned[i]) reader.fail("user '" + std::string(parts[0]) + "' listed twice");
      if (split_in_users[i] && d.users[i].split != *split) {
        reader.fail("split for '" + std::string(parts[0]) + "' disagrees with the users file");
      }
      d.users[i].split = *split;
      assigned[i] = true;
    }
    for (std::size_t i = 0; i < d.users.size(); ++i) {
      if (!assigned[i] && !split_in_users[i]) throw DataError("user '" + d.users[i].id + "' has no split");
    }
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& users_path, const std::filesystem::path& edges_path,
                  const std::filesystem::path& splits_path) {
  std::ofstream users(users_path);
  std::ofstream edges(edges_path);
  std::ofstream splits(splits_path);
  if (!users || !edges || !splits) throw DataError("cannot open dataset files for writing");
  for (const auto& u : d.users) {
    users << "id=" << u.id;
    if (u.label) users << "\tlabel=" << *u.label;
    users << "\tsplit=" << to_string(u.split);
    if (u.community) users << "\tcommunity=" << *u.community;
    users << "\tnumeric=";
    write_vector(users, u.numeric);
    users << "\tcategorical=" << u.categorical[0] << ',' << u.categorical[1] << ',' << u.categorical[2];
    users << "\tdescription=";
    write_vector(users, u.description);
    users << "\ttweets=";
    for (std::size_t t = 0; t < u.tweets.size(); ++t) {
      if (t) users << ';';
      write_vector(users, u.tweets[t]);
    }
    users << '\n';
    splits << u.id << '\t' << to_string(u.split) << '\n';
  }
  for (auto relation : {Relation::follower, Relation::following}) {
    for (const auto& e : d.graph.edges(relation)) {
      edges << d.users[e.src].id << '\t' << d.users[e.dst].id << '\t' << to_string(relation) << '\n';
    }
  }
}

Dataset zscore_normalize(const Dataset& d) {
  const auto train = d.members(Split::train);
  if (train.empty()) throw std::invalid_argument("zscore_normalize: empty train split");
  Dataset out = d;
  NormalizationStats stats;
  for (std::size_t c = 0; c < kNumNumeric; ++c) {
    double mu = 0.0;
    for (auto i : train) mu += d.users[i].numeric[c];
    mu /= static_cast<double>(train.size());
    double var = 0.0;
    for (auto i : train) var += (d.users[i].numeric[c] - mu) * (d.users[i].numeric[c] - mu);
    var /= static_cast<double>(train.size());
    stats.mean[c] = mu;
    stats.stddev[c] = std::sqrt(var);
    const double denom = std::max(stats.stddev[c], 1e-8);
    for (auto& u : out.users) u.numeric[c] = (u.numeric[c] - mu) / denom;
  }
  stats.computed = true;
  out.normalization = stats;
  return out;
}

Dataset make_splits(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("make_splits: fraction outside [0, 1]");
  auto train = d.labeled(Split::train);
  const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train.size())));
  if (keep == 0) throw std::invalid_argument("make_splits: fraction leaves no supervised train users");
  Rng rng(seed);
  // Partial Fisher-Yates: the first `keep` slots are a uniform sample.
  for (std::size_t i = 0; i < keep; ++i) std::swap(train[i], train[i + rng.below(train.size() - i)]);
  Dataset out = d;
  for (std::size_t i = keep; i < train.size(); ++i) out.users[train[i]].label.reset();
  return out;
}

Dataset subsample_edges(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample_edges: fraction outside [0, 1]");
  Rng rng(seed);
  Dataset out = d;
  out.graph = HeteroGraph(d.size());
  for (auto relation : {Relation::follower, Relation::following}) {
    const auto& edges = d.graph.edges(relation);
    std::vector<std::size_t> order(edges.size());
    std::iota(order.begin(), order.end(), 0);
    const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(edges.size())));
    for (std::size_t i = 0; i < keep; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    order.resize(keep);
    std::sort(order.begin(), order.end());
    for (auto e : order) out.graph.add_edge(relation, edges[e].src, edges[e].dst);
  }
  return out;
}

Dataset mask_numeric_columns(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("mask_numeric_columns: fraction outside [0, 1]");
  Rng rng(seed);
  std::array<std::size_t, kNumNumeric> cols{};
  std::iota(cols.begin(), cols.end(), 0);
  const auto n_mask = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(kNumNumeric)));
  for (std::size_t i = 0; i < n_mask; ++i) std::swap(cols[i], cols[i + rng.below(kNumNumeric - i)]);
  Dataset out = d;
  for (auto& u : out.users) {
    for (std::size_t i = 0; i < n_mask; ++i) u.numeric[cols[i]] = 0.0;
  }
  return out;
}

InputFeatures input_features(const Dataset& d) {
  const std::size_t n = d.size();
  const std::size_t dim = d.embed_dim();
  std::vector<double> numeric(n * kNumNumeric);
  std::vector<double> categorical(n * kNumCategorical);
  std::vector<double> description(n * dim);
  std::vector<double> tweets(n * dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& u = d.users[i];
    std::copy(u.numeric.begin(), u.numeric.end(), numeric.begin() + static_cast<std::ptrdiff_t>(i * kNumNumeric));
    for (std::size_t c = 0; c < kNumCategorical; ++c) categorical[i * kNumCategorical + c] = u.categorical[c];
    std::copy(u.description.begin(), u.description.end(), description.begin() + static_cast<std::ptrdiff_t>(i * dim));
    if (!u.tweets.empty()) {
      for (const auto& t : u.tweets) {
        for (std::size_t j = 0; j < dim; ++j) tweets[i * dim + j] += t[j];
      }
      for (std::size_t j = 0; j < dim; ++j) tweets[i * dim + j] /= static_cast<double>(u.tweets.size());
    }
  }
  InputFeatures in;
  in.numeric = Tensor::from({n, kNumNumeric}, std::move(numeric));
  in.categorical = Tensor::from({n, kNumCategorical}, std::move(categorical));
  in.description = Tensor::from({n, dim}, std::move(description));
  in.tweet_mean = Tensor::from({n, dim}, std::move(tweets));
  in.aggregators[0] = d.graph.mean_aggregator(Relation::follower);
  in.aggregators[1] = d.graph.mean_aggregator(Relation::following);
  return in;
}

NodeFeatureProjector::NodeFeatureProjector(std::size_t embed_dim, std::size_t per_source_dim, Rng& rng)
    : numeric(kNumNumeric, per_source_dim, rng),
      categorical(kNumCategorical, per_source_dim, rng),
      description(embed_dim, per_source_dim, rng),
      tweets(embed_dim, per_source_dim, rng) {}

Tensor NodeFeatureProjector::forward(const InputFeatures& in) const {
  return concat({numeric.forward(in.numeric), categorical.forward(in.categorical), description.forward(in.description),
                 tweets.forward(in.tweet_mean)},
                1);
}

void NodeFeatureProjector::collect(const std::string& prefix, ParamList& out) const {
  numeric.collect(prefix + ".numeric", out);
  categorical.collect(prefix + ".categorical", out);
  description.collect(prefix + ".description", out);
  tweets.collect(prefix + ".tweets", out);
}

}  // namespace botmoe
