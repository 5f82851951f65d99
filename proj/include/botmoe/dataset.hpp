#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "botmoe/nn.hpp"
#include "botmoe/ops.hpp"

namespace botmoe {

inline constexpr std::size_t kNumNumeric = 5;      // followers, followings, statuses, active days, name length
inline constexpr std::size_t kNumCategorical = 3;  // protected, verified, default profile image
inline constexpr std::size_t kNumRelations = 2;

enum class Split { train, valid, test };
enum class Relation { follower = 0, following = 1 };

std::string_view to_string(Split split);
std::string_view to_string(Relation relation);
std::optional<Split> parse_split(std::string_view text);
std::optional<Relation> parse_relation(std::string_view text);

/// Raised for malformed or inconsistent dataset files; the message carries
/// the file and line number.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UserRecord {
  std::string id;
  std::optional<int> label;  // 0 human, 1 bot
  std::array<double, kNumNumeric> numeric{};
  std::array<int, kNumCategorical> categorical{};
  std::vector<double> description;
  std::vector<std::vector<double>> tweets;
  Split split = Split::train;
  std::optional<int> community;

  bool operator==(const UserRecord&) const = default;
};

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;

  bool operator==(const Edge&) const = default;
};

/// Users plus typed directed edges. N_r(i) holds the sources of relation-r
/// edges that terminate at i, in edge-list order.
class HeteroGraph {
 public:
  HeteroGraph() = default;
  explicit HeteroGraph(std::size_t n_nodes);

  std::size_t n_nodes() const { return n_nodes_; }
  void add_edge(Relation relation, std::size_t src, std::size_t dst);
  bool has_edge(Relation relation, std::size_t src, std::size_t dst) const;

  const std::vector<Edge>& edges(Relation relation) const { return edges_[index(relation)]; }
  const std::vector<std::size_t>& in_neighbors(Relation relation, std::size_t node) const {
    return in_[index(relation)].at(node);
  }
  std::size_t edge_count() const { return edges_[0].size() + edges_[1].size(); }

  // Row-normalized in-neighbor matrix: row i averages N_r(i).
  SparseMatrix mean_aggregator(Relation relation) const;

  bool operator==(const HeteroGraph&) const = default;

 private:
  static std::size_t index(Relation r) { return static_cast<std::size_t>(r); }

  std::size_t n_nodes_ = 0;
  std::array<std::vector<Edge>, kNumRelations> edges_;
  std::array<std::vector<std::vector<std::size_t>>, kNumRelations> in_;
};

struct NormalizationStats {
  std::array<double, kNumNumeric> mean{};
  std::array<double, kNumNumeric> stddev{};  // population
  bool computed = false;

  bool operator==(const NormalizationStats&) const = default;
};

struct Dataset {
  std::vector<UserRecord> users;
  HeteroGraph graph;
  NormalizationStats normalization;

  std::size_t size() const { return users.size(); }
  std::size_t embed_dim() const;
  // Users of `split` that carry a label, in index order.
  std::vector<std::size_t> labeled(Split split) const;
  std::vector<std::size_t> members(Split split) const;
  std::vector<int> labels_of(const std::vector<std::size_t>& indices) const;

  bool operator==(const Dataset&) const = default;
};

// ---- file formats -------------------------------------------------------

/// users file: one record per line, tab-separated key=value fields
///   id=<str> [label=0|1] split=<train|valid|test> [community=<int>]
///   numeric=<5 comma-separated floats> categorical=<3 comma-separated 0/1>
///   description=<D comma-separated floats> tweets=<';'-separated vectors>
/// edges file: src<TAB>dst<TAB>relation
/// splits file: id<TAB>split (authoritative; must agree with users file)
Dataset load_dataset(const std::filesystem::path& users_path, const std::filesystem::path& edges_path,
                     const std::filesystem::path& splits_path);
void save_dataset(const Dataset& d, const std::filesystem::path& users_path, const std::filesystem::path& edges_path,
                  const std::filesystem::path& splits_path);

std::string format_double(double value);

// ---- transforms ---------------------------------------------------------

/// z-scores every numeric column with train-split mean and population std
/// (floored at 1e-8); stats are stored on the result.
Dataset zscore_normalize(const Dataset& d);

/// Keeps labels on floor(fraction * |labeled train|) uniformly chosen train
/// users; the rest of the train split becomes unlabeled.
Dataset make_splits(const Dataset& d, double train_fraction_of_train, std::uint64_t seed);

/// Keeps floor(fraction * |E_r|) uniformly chosen edges of each relation.
Dataset subsample_edges(const Dataset& d, double fraction, std::uint64_t seed);

/// Zeroes a random floor(fraction * 5) subset of numeric metadata columns for
/// every user (masked-feature mode of the data-efficiency study).
Dataset mask_numeric_columns(const Dataset& d, double fraction, std::uint64_t seed);

// ---- model inputs -------------------------------------------------------

/// Constant per-user input matrices derived from a dataset.
struct InputFeatures {
  Tensor numeric;      // [n, 5]
  Tensor categorical;  // [n, 3]
  Tensor description;  // [n, D]
  Tensor tweet_mean;   // [n, D]; zero row for users without tweets
  std::array<SparseMatrix, kNumRelations> aggregators;

  std::size_t n_users() const { return numeric.dim(0); }
};

InputFeatures input_features(const Dataset& d);

/// Learned projection of the four input sources, concatenated into the
/// graph encoder's input: [n, 4 * per_source_dim].
struct NodeFeatureProjector {
  Linear numeric;
  Linear categorical;
  Linear description;
  Linear tweets;

  NodeFeatureProjector() = default;
  NodeFeatureProjector(std::size_t embed_dim, std::size_t per_source_dim, Rng& rng);

  Tensor forward(const InputFeatures& in) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace botmoe
