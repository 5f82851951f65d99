#include "botmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace botmoe {

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
  if (k == 0 || k > row.size()) throw std::invalid_argument("top_k_indices: k must lie in [1, n]");
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) { return std::isnan(row[i]) ? -std::numeric_limits<double>::infinity() : row[i]; };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return key(a) > key(b) || (key(a) == key(b) && a < b); });
  order.resize(k);
  return order;
}

GateNetwork::GateNetwork(std::size_t dim, std::size_t n_experts, std::size_t k_, Rng& rng)
    : w_gate(glorot(dim, n_experts, rng)), w_noise(glorot(dim, n_experts, rng)), k(k_) {
  if (n_experts == 0) throw std::invalid_argument("GateNetwork: need at least one expert");
  if (k == 0 || k > n_experts) throw std::invalid_argument("GateNetwork: k must lie in [1, n]");
}

GateOutput GateNetwork::forward(const Tensor& x, bool noisy, Rng* rng) const {
  const std::size_t n = experts();
  GateOutput out;
  out.k = k;
  out.noisy = noisy;
  out.clean_logits = matmul(x, w_gate);
  const std::size_t batch = out.clean_logits.dim(0);
  Tensor routed = out.clean_logits;
  if (noisy) {
    if (!rng) throw std::logic_error("GateNetwork: noisy gating needs an rng");
    out.noise_scales = softplus(matmul(x, w_noise));
    std::vector<double> eps(batch * n);
    for (auto& e : eps) e = rng->normal();
    out.noisy_logits = add(out.clean_logits, mul(Tensor::from({batch, n}, std::move(eps)), out.noise_scales));
    routed = out.noisy_logits;
  }
  std::vector<bool> keep(batch * n, false);
  out.top_k.reserve(batch * k);
  for (std::size_t r = 0; r < batch; ++r) {
    const auto chosen = top_k_indices(routed.data().subspan(r * n, n), k);
    for (auto j : chosen) {
      keep[r * n + j] = true;
      out.top_k.push_back(j);
    }
  }
  out.weights = k == n ? softmax(routed) : softmax(keep_mask(routed, keep));
  return out;
}

void GateNetwork::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w_gate", w_gate, true});
  out.push_back({prefix + ".w_noise", w_noise, true});
}

Tensor smooth_load(const GateOutput& gate) {
  if (!gate.noisy) throw std::logic_error("smooth_load: gate output was computed without noise");
  const std::size_t batch = gate.batch();
  const std::size_t n = gate.experts();
  const std::size_t k = gate.k;
  if (k == n) return Tensor::full({n}, static_cast<double>(batch));
  // For each (row, expert): index of the k-th largest noisy logit among the
  // other experts. An in-top-k expert competes with rank k (0-based), an
  // excluded one with rank k-1.
  std::vector<std::size_t> threshold_index(batch * n);
  for (std::size_t r = 0; r < batch; ++r) {
    const auto order = top_k_indices(gate.noisy_logits.data().subspan(r * n, n), k + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const bool selected = std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), i) !=
                            order.begin() + static_cast<std::ptrdiff_t>(k);
      threshold_index[r * n + i] = r * n + (selected ? order[k] : order[k - 1]);
    }
  }
  const Tensor threshold = gather(gate.noisy_logits, std::move(threshold_index), {batch, n});
  const Tensor prob = normal_cdf(div(sub(gate.clean_logits, threshold), gate.noise_scales));
  return sum_axis(prob, 0);
}

LoadStats load_stats(const GateOutput& gate) {
  LoadStats stats;
  stats.importance = sum_axis(gate.weights, 0);
  if (gate.noisy) {
    stats.load = smooth_load(gate);
  } else {
    std::vector<double> counts(gate.experts(), 0.0);
    for (auto j : gate.top_k) counts[j] += 1.0;
    stats.load = Tensor::from({gate.experts()}, std::move(counts));
  }
  return stats;
}

Tensor balance_loss(const LoadStats& stats, double w_importance, double w_load) {
  return add(scale(cv_squared(stats.importance), w_importance), scale(cv_squared(stats.load), w_load));
}

ExpertBank::ExpertBank(std::size_t n_experts, std::size_t dim, Rng& rng) {
  experts.reserve(n_experts);
  for (std::size_t j = 0; j < n_experts; ++j) experts.emplace_back(dim, dim, dim, rng);
}

void ExpertBank::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t j = 0; j < experts.size(); ++j) experts[j].collect(prefix + "." + std::to_string(j), out);
}

MoeLayer::MoeLayer(std::size_t dim, std::size_t n_experts, std::size_t k, Rng& rng)
    : gate(dim, n_experts, k, rng), bank(n_experts, dim, rng) {}

MoeOutput MoeLayer::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.rank() != 2 || x.dim(1) != gate.w_gate.dim(0)) {
    throw std::invalid_argument("MoeLayer: input " + shape_str(x.shape()) + " does not match gate");
  }
  MoeOutput out;
  const bool noisy = ctx.training && noisy_gating;
  out.gate = gate.forward(x, noisy, noisy ? &ctx.generator() : nullptr);
  const std::size_t batch = x.dim(0);
  const std::size_t n = bank.size();
  const std::size_t k = out.gate.k;

  std::vector<std::vector<std::size_t>> rows(n);
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t s = 0; s < k; ++s) rows[out.gate.top_k[r * k + s]].push_back(r);
  }
  Tensor z;
  for (std::size_t j = 0; j < n; ++j) {
    if (rows[j].empty()) continue;
    std::vector<std::size_t> weight_index;
    weight_index.reserve(rows[j].size());
    for (auto r : rows[j]) weight_index.push_back(r * n + j);
    const Tensor y = bank.experts[j].forward(index_rows(x, rows[j]), ctx);
    const Tensor w = gather(out.gate.weights, std::move(weight_index), {rows[j].size()});
    const Tensor part = scatter_rows(scale_rows(y, w), rows[j], batch);
    z = z.defined() ? add(z, part) : part;
  }
  out.z = z.defined() ? z : Tensor::zeros({batch, x.dim(1)});
  out.stats = load_stats(out.gate);
  return out;
}

void MoeLayer::collect(const std::string& prefix, ParamList& out) const {
  gate.collect(prefix + ".gate", out);
  bank.collect(prefix + ".expert", out);
}

}  // namespace botmoe
