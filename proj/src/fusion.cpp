#include "botmoe/fusion.hpp"

#include <stdexcept>

namespace botmoe {

FusionTransformer::FusionTransformer(std::size_t dim, std::size_t heads_, std::size_t ffn_dim, Rng& rng)
    : heads(heads_),
      query(dim, dim, rng),
      key(dim, dim, rng),
      value(dim, dim, rng),
      output(dim, dim, rng),
      norm1(dim),
      norm2(dim),
      ff1(dim, ffn_dim, rng),
      ff2(ffn_dim, dim, rng) {
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("FusionTransformer: hidden size " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

FusionOutput FusionTransformer::forward(const std::array<Tensor, kNumTokens>& tokens, const ForwardContext& ctx) const {
  const std::size_t d = dim();
  std::vector<Tensor> rows;
  for (const auto& t : tokens) {
    if (t.rank() != 2 || t.dim(1) != d) throw std::invalid_argument("FusionTransformer: token shape " + shape_str(t.shape()));
    rows.push_back(reshape(t, {t.dim(0), 1, d}));
  }
  const Tensor x = concat(rows, 1);  // [B, 3, d]
  const std::size_t batch = x.dim(0);
  const bool drop = ctx.training && ctx.dropout > 0.0;

  FusionOutput out;
  out.attention = softmax(attention_scores(query.forward(x), key.forward(x), heads));
  Tensor attended = output.forward(attention_apply(out.attention, value.forward(x)));
  if (drop) attended = dropout(attended, ctx.dropout, true, ctx.generator());
  const Tensor x1 = norm1.forward(add(x, attended));

  Tensor ff = ff2.forward(leaky_relu(ff1.forward(x1)));
  if (drop) ff = dropout(ff, ctx.dropout, true, ctx.generator());
  const Tensor x2 = norm2.forward(add(x1, ff));

  for (std::size_t i = 0; i < kNumTokens; ++i) out.tokens[i] = reshape(slice(x2, 1, i, 1), {batch, d});
  return out;
}

void FusionTransformer::collect(const std::string& prefix, ParamList& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
  norm1.collect(prefix + ".norm1", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
  norm2.collect(prefix + ".norm2", out);
}

ConsistencyHead::ConsistencyHead(std::size_t heads, std::size_t filter_size, std::size_t pool_kernel_, Rng& rng)
    : pool_kernel(pool_kernel_),
      filters(glorot({heads, filter_size, filter_size}, filter_size * filter_size, 1, rng)) {
  if (heads == 0 || filter_size == 0 || pool_kernel == 0) {
    throw std::invalid_argument("ConsistencyHead: heads, filter size and pooling kernel must be positive");
  }
  if (output_size() == 0) {
    throw std::invalid_argument("ConsistencyHead: pooled attention map is smaller than the filter");
  }
}

std::size_t ConsistencyHead::output_size(std::size_t tokens) const {
  const std::size_t pooled = pool_kernel >= tokens ? 1 : tokens / pool_kernel;
  const std::size_t h = filters.dim(1), w = filters.dim(2);
  if (pooled < h || pooled < w) return 0;
  return (pooled - h + 1) * (pooled - w + 1);
}

Tensor ConsistencyHead::forward(const Tensor& attention) const {
  if (attention.rank() != 4 || attention.dim(1) != heads()) {
    throw std::invalid_argument("ConsistencyHead: attention shape " + shape_str(attention.shape()));
  }
  const std::size_t batch = attention.dim(0), t = attention.dim(2);
  const std::size_t h = filters.dim(1), w = filters.dim(2);
  Tensor total;
  for (std::size_t c = 0; c < heads(); ++c) {
    const Tensor pooled = avg_pool2d(reshape(slice(attention, 1, c, 1), {batch, t, t}), pool_kernel);
    if (pooled.dim(1) < h || pooled.dim(2) < w) {
      throw std::invalid_argument("ConsistencyHead: pooled map " + shape_str(pooled.shape()) + " smaller than filter");
    }
    const Tensor conv = conv2d(pooled, reshape(slice(filters, 0, c, 1), {h, w}), 1);
    total = total.defined() ? add(total, conv) : conv;
  }
  return reshape(total, {batch, total.numel() / batch});
}

void ConsistencyHead::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".filters", filters, true});
}

std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw std::invalid_argument("predict: expected [B, 2] logits");
  std::vector<int> out(logits.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = logits.at(r, 1) > logits.at(r, 0) ? 1 : 0;
  return out;
}

}  // namespace botmoe
