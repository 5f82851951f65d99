#pragma once

#include <span>
#include <vector>

#include "botmoe/nn.hpp"

namespace botmoe {

/// Routing decision for a batch. `weights` rows have exactly k nonzeros
/// summing to one; `top_k` lists the selected experts per row (k entries per
/// row, highest gate value first, ties toward the lower index).
struct GateOutput {
  Tensor weights;       // [B, n]
  Tensor clean_logits;  // [B, n]
  Tensor noisy_logits;  // [B, n], only when noisy
  Tensor noise_scales;  // [B, n], only when noisy
  std::vector<std::size_t> top_k;
  std::size_t k = 0;
  bool noisy = false;

  std::size_t batch() const { return weights.dim(0); }
  std::size_t experts() const { return weights.dim(1); }
  std::size_t top1(std::size_t row) const { return top_k[row * k]; }
};

/// Batch statistics for the balance loss.
struct LoadStats {
  Tensor importance;  // [n] column sums of the gate weights
  Tensor load;        // [n] smoothed expected selection counts
};

/// Indices of the k largest entries, descending; equal values prefer the
/// lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);

/// Noisy top-k gate: H = x W_g (+ eps * softplus(x W_noise) when noisy),
/// weights = softmax(KeepTopK(H, k)).
struct GateNetwork {
  Tensor w_gate;   // [d, n]
  Tensor w_noise;  // [d, n]
  std::size_t k = 1;

  GateNetwork() = default;
  GateNetwork(std::size_t dim, std::size_t n_experts, std::size_t k, Rng& rng);

  std::size_t experts() const { return w_gate.dim(1); }
  GateOutput forward(const Tensor& x, bool noisy, Rng* rng) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// P(x, i): probability that expert i stays in the top k when only its own
/// noise is redrawn, Phi((clean_i - kth_excluding_i) / scale_i), summed over
/// the batch. Requires a noisy gate output.
Tensor smooth_load(const GateOutput& gate);

/// Importance from the weights; load from smooth_load when the gate was
/// noisy, otherwise the (constant) top-k selection counts.
LoadStats load_stats(const GateOutput& gate);

/// w_imp * cv^2(importance) + w_ld * cv^2(load).
Tensor balance_loss(const LoadStats& stats, double w_importance, double w_load);

struct ExpertBank {
  std::vector<Mlp2> experts;

  ExpertBank() = default;
  ExpertBank(std::size_t n_experts, std::size_t dim, Rng& rng);

  std::size_t size() const { return experts.size(); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct MoeOutput {
  Tensor z;  // [B, d]
  GateOutput gate;
  LoadStats stats;
};

/// z_i = sum_j G(x_i)_j E_j(x_i); experts with zero weight for a row are
/// not evaluated on it. Gate noise is applied only in training mode.
struct MoeLayer {
  GateNetwork gate;
  ExpertBank bank;
  bool noisy_gating = true;

  MoeLayer() = default;
  MoeLayer(std::size_t dim, std::size_t n_experts, std::size_t k, Rng& rng);

  MoeOutput forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace botmoe
