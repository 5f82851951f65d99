#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "botmoe/rng.hpp"
#include "botmoe/tensor.hpp"

namespace botmoe {

inline constexpr double kLeakySlope = 0.01;

/// Constant CSR matrix (no gradient), used for neighborhood aggregation.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr;  // rows + 1 entries
  std::vector<std::size_t> col_idx;
  std::vector<double> values;
};

// Linear algebra. `a` is [..., k]; leading axes are treated as rows.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sparse_matmul(const SparseMatrix& m, const Tensor& x);

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor neg(const Tensor& x);

// x is [..., n], bias is [n].
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x is [m, ...], w is [m]; row i is multiplied by w[i].
Tensor scale_rows(const Tensor& x, const Tensor& w);

Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);
Tensor softplus(const Tensor& x);
// Standard normal CDF.
Tensor normal_cdf(const Tensor& x);

// Softmax over the last axis. -inf entries map to exactly 0.
Tensor softmax(const Tensor& x);
// Entries where keep[i] is false become -inf (no gradient flows to them).
Tensor keep_mask(const Tensor& x, const std::vector<bool>& keep);

// Inverted dropout; the identity unless training and p > 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// Normalizes over the last axis; gamma and beta are [n].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Mean cross-entropy of [m, C] logits against integer class labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
// [d0, d1, ...] -> [d0, d1 * ...].
Tensor flatten(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor max_axis(const Tensor& x, std::size_t axis);
Tensor min_axis(const Tensor& x, std::size_t axis);
Tensor sum_squares(const Tensor& x);

// Indexing.
Tensor gather(const Tensor& x, std::vector<std::size_t> flat_index, Shape out_shape);
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);
// Sums row r of x into row rows[r] of an [n_out, ...] zero tensor.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> rows, std::size_t n_out);

// 2-D cross-correlation (no flip, no padding) over the last two axes of x;
// leading axes are batch axes. filter is [h, w].
Tensor conv2d(const Tensor& x, const Tensor& filter, std::size_t stride = 1);
// Non-overlapping average pooling over the last two axes. A kernel at least
// as large as the smaller side degrades to a global mean.
Tensor avg_pool2d(const Tensor& x, std::size_t kernel);

// Multi-head attention pieces. q, k, v are [B, T, d] with d split evenly
// across `heads`. Scores are [B, heads, T, T], scaled by 1/sqrt(d/heads).
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads);
// probs [B, heads, T, T] applied to v [B, T, d] -> [B, T, d].
Tensor attention_apply(const Tensor& probs, const Tensor& v);

// (population std / mean)^2 of a vector; 0 when mean <= 1e-10 or n == 1.
Tensor cv_squared(const Tensor& v);

}  // namespace botmoe
