#include "botmoe/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace botmoe {

Rng& ForwardContext::generator() const {
  if (!rng) throw std::logic_error("ForwardContext: training forward needs an rng");
  return *rng;
}

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return glorot({fan_in, fan_out}, fan_in, fan_out, rng);
}

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(glorot(in, out, rng)), bias(Tensor::zeros({out}, true)) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

Mlp2::Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : first(in, hidden, rng), second(hidden, out, rng) {}

Tensor Mlp2::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = leaky_relu(first.forward(x));
  if (ctx.training && ctx.dropout > 0.0) h = dropout(h, ctx.dropout, true, ctx.generator());
  return second.forward(h);
}

void Mlp2::collect(const std::string& prefix, ParamList& out) const {
  first.collect(prefix + ".0", out);
  second.collect(prefix + ".1", out);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

}  // namespace botmoe
