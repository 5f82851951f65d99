#pragma once

#include <string>
#include <vector>

#include "botmoe/ops.hpp"
#include "botmoe/rng.hpp"
#include "botmoe/tensor.hpp"

namespace botmoe {

/// A learnable tensor with a stable name. `decay` marks weight matrices that
/// the L2 term covers (biases and norm parameters are excluded).
struct Param {
  std::string name;
  Tensor value;
  bool decay = true;
};

using ParamList = std::vector<Param>;

/// Per-forward switches. `rng` feeds dropout masks and gate noise; a forward
/// pass with a freshly seeded rng is exactly reproducible.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Rng& generator() const;
};

// Glorot-uniform weight in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Linear -> leaky-ReLU -> dropout -> Linear.
struct Mlp2 {
  Linear first;
  Linear second;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace botmoe
