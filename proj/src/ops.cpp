#include "botmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace botmoe {
namespace {

using Backward = std::function<void(const TensorImpl& out)>;

// Grad buffer of an input, or nullptr when it does not need one.
double* grad_of(TensorImpl* t) { return t->requires_grad ? t->grad.data() : nullptr; }

Tensor emit(std::string_view op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
            Backward backward) {
  auto& tape = Tape::current();
  bool track = false;
  if (tape.enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  Tensor out = Tensor::from(std::move(shape), std::move(data), track);
  if (track) {
    const TensorImpl* o = out.impl();
    tape.record(op, std::move(inputs), out, [o, backward = std::move(backward)] { backward(*o); });
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x) {
  if (x.rank() == 0) throw std::invalid_argument("expected a tensor of rank >= 1");
  return x.shape().back();
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range");
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  TensorImpl* xi = x.impl();
  return emit(op, x.shape(), std::move(out), {x}, [xi, deriv](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
  });
}

Tensor reduce_extreme(const Tensor& x, std::size_t axis, bool take_max, std::string_view op) {
  const auto s = split_at(x.shape(), axis);
  if (s.extent == 0) throw std::invalid_argument(std::string(op) + ": empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  const auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.extent * s.inner + in;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t idx = (o * s.extent + e) * s.inner + in;
        if (take_max ? xs[idx] > xs[best] : xs[idx] < xs[best]) best = idx;
      }
      out[o * s.inner + in] = xs[best];
      arg[o * s.inner + in] = best;
    }
  }
  TensorImpl* xi = x.impl();
  return emit(op, std::move(shape), std::move(out), {x}, [xi, arg = std::move(arg)](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) throw std::invalid_argument("matmul: rhs must be a matrix, got " + shape_str(b.shape()));
  const std::size_t k = last_dim(a);
  if (k != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
  const std::size_t n = b.dim(1);
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = as[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bs.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return emit("matmul", std::move(shape), std::move(out), {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    const double* go = o.grad.data();
    if (double* ga = grad_of(ai)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bi->data.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = grad_of(bi)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ai->data[i * k + p];
          if (av == 0.0) continue;
          double* grow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * go[i * n + j];
        }
      }
    }
  });
}

Tensor sparse_matmul(const SparseMatrix& m, const Tensor& x) {
  if (x.rank() == 0 || x.dim(0) != m.cols) {
    throw std::invalid_argument("sparse_matmul: operand shape " + shape_str(x.shape()) + " incompatible with " +
                                std::to_string(m.cols) + " columns");
  }
  const std::size_t inner = x.numel() / std::max<std::size_t>(m.cols, 1);
  Shape shape = x.shape();
  shape[0] = m.rows;
  std::vector<double> out(m.rows * inner, 0.0);
  const auto xs = x.data();
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t e = m.row_ptr[r]; e < m.row_ptr[r + 1]; ++e) {
      const double v = m.values[e];
      const double* src = xs.data() + m.col_idx[e] * inner;
      double* dst = out.data() + r * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += v * src[j];
    }
  }
  TensorImpl* xi = x.impl();
  // The matrix is copied into the closure so the caller need not outlive the tape.
  return emit("sparse_matmul", std::move(shape), std::move(out), {x}, [xi, m, inner](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t e = m.row_ptr[r]; e < m.row_ptr[r + 1]; ++e) {
        const double v = m.values[e];
        double* dst = gx + m.col_idx[e] * inner;
        const double* src = o.grad.data() + r * inner;
        for (std::size_t j = 0; j < inner; ++j) dst[j] += v * src[j];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return emit("add", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    for (TensorImpl* t : {ai, bi}) {
      if (double* g = grad_of(t)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return emit("sub", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (double* g = grad_of(bi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return emit("mul", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (double* g = grad_of(bi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return emit("div", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / bi->data[i];
    }
    if (double* g = grad_of(bi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i] * o.data[i] / bi->data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  TensorImpl* xi = x.impl();
  TensorImpl* bi = bias.impl();
  return emit("add_bias", x.shape(), std::move(out), {x, bias}, [xi, bi, n](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (double* g = grad_of(bi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i];
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  if (x.rank() == 0 || w.rank() != 1 || w.dim(0) != x.dim(0)) {
    throw std::invalid_argument("scale_rows: weights " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t inner = rows ? x.numel() / rows : 0;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = x[r * inner + j] * w[r];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* wi = w.impl();
  return emit("scale_rows", x.shape(), std::move(out), {x, w}, [xi, wi, rows, inner](const TensorImpl& o) {
    double* gx = grad_of(xi);
    double* gw = grad_of(wi);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t idx = r * inner + j;
        if (gx) gx[idx] += o.grad[idx] * wi->data[r];
        acc += o.grad[idx] * xi->data[idx];
      }
      if (gw) gw[r] += acc;
    }
  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary("leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
               [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor normal_cdf(const Tensor& x) {
  return unary("normal_cdf", x, [](double v) { return 0.5 * std::erfc(-v / std::numbers::sqrt2); },
               [](double v, double) { return std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi); });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* y = out.data() + r * n;
    if (std::any_of(in, in + n, [](double v) { return std::isnan(v) || v == HUGE_VAL; })) {
      std::fill(y, y + n, std::nan(""));
      continue;
    }
    const double peak = *std::max_element(in, in + n);
    if (!std::isfinite(peak)) throw std::domain_error("softmax: row has no finite entry");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  TensorImpl* xi = x.impl();
  return emit("softmax", x.shape(), std::move(out), {x}, [xi, n, rows](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* go = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (go[j] - dot);
    }
  });
}

Tensor keep_mask(const Tensor& x, const std::vector<bool>& keep) {
  if (keep.size() != x.numel()) throw std::invalid_argument("keep_mask: mask size differs from input");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? x[i] : -std::numeric_limits<double>::infinity();
  TensorImpl* xi = x.impl();
  return emit("keep_mask", x.shape(), std::move(out), {x}, [xi, keep](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (keep[i]) gx[i] += o.grad[i];
    }
  });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  TensorImpl* xi = x.impl();
  return emit("dropout", x.shape(), std::move(out), {x}, [xi, mask = std::move(mask)](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += o.grad[i] * mask[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = last_dim(x);
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw std::invalid_argument("layer_norm: affine parameters must have shape [" + std::to_string(n) + "]");
  }
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * inv_std[r];
      out[r * n + j] = gamma[j] * xhat[r * n + j] + beta[j];
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gamma.impl();
  TensorImpl* bi = beta.impl();
  return emit("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
              [xi, gi, bi, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl& o) {
                double* gx = grad_of(xi);
                double* gg = grad_of(gi);
                double* gb = grad_of(bi);
                std::vector<double> gxhat(n);
                for (std::size_t r = 0; r < rows; ++r) {
                  const double* go = o.grad.data() + r * n;
                  const double* xh = xhat.data() + r * n;
                  double sum_g = 0.0;
                  double sum_gx = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    if (gg) gg[j] += go[j] * xh[j];
                    if (gb) gb[j] += go[j];
                    gxhat[j] = go[j] * gi->data[j];
                    sum_g += gxhat[j];
                    sum_gx += gxhat[j] * xh[j];
                  }
                  if (!gx) continue;
                  const double scale_r = inv_std[r] / static_cast<double>(n);
                  for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] += scale_r * (static_cast<double>(n) * gxhat[j] - sum_g - xh[j] * sum_gx);
                  }
                }
              });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t m = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (m == 0) throw std::invalid_argument("cross_entropy: empty batch");
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::invalid_argument("cross_entropy: label out of range");
    }
    const double* row = logits.data().data() + i * classes;
    const double peak = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - peak);
    const double log_z = peak + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) probs[i * classes + c] = std::exp(row[c] - log_z);
    loss += log_z - row[label];
  }
  loss /= static_cast<double>(m);
  TensorImpl* li = logits.impl();
  std::vector<int> owned(labels.begin(), labels.end());
  return emit("cross_entropy", {}, {loss}, {logits},
              [li, m, classes, probs = std::move(probs), owned = std::move(owned)](const TensorImpl& o) {
                double* g = grad_of(li);
                if (!g) return;
                const double go = o.grad[0] / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i) {
                  for (std::size_t c = 0; c < classes; ++c) {
                    const double target = static_cast<int>(c) == owned[i] ? 1.0 : 0.0;
                    g[i * classes + c] += go * (probs[i * classes + c] - target);
                  }
                }
              });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  TensorImpl* xi = x.impl();
  return emit("reshape", std::move(shape), std::move(out), {x}, [xi](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() == 0) throw std::invalid_argument("flatten: scalar input");
  const std::size_t lead = x.dim(0);
  return reshape(x, {lead, lead ? x.numel() / lead : 0});
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw std::invalid_argument("concat: rank mismatch");
    total += probe[axis];
    probe[axis] = shape[axis];
    if (probe != shape) throw std::invalid_argument("concat: incompatible shapes");
  }
  shape[axis] = total;
  const auto s = split_at(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * s.inner + offset * s.inner));
    }
    offset += p.dim(axis);
  }
  std::vector<TensorImpl*> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return emit("concat", std::move(shape), std::move(out), parts,
              [impls, offsets, s, total, axis](const TensorImpl& o) {
                for (std::size_t k = 0; k < impls.size(); ++k) {
                  double* g = grad_of(impls[k]);
                  if (!g) continue;
                  const std::size_t block = impls[k]->shape[axis] * s.inner;
                  for (std::size_t outer = 0; outer < s.outer; ++outer) {
                    const double* src = o.grad.data() + outer * total * s.inner + offsets[k] * s.inner;
                    for (std::size_t j = 0; j < block; ++j) g[outer * block + j] += src[j];
                  }
                }
              });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto s = split_at(x.shape(), axis);
  if (start + length > s.extent) throw std::invalid_argument("slice: range exceeds axis extent");
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(shape_numel(shape));
  const std::size_t block = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  TensorImpl* xi = x.impl();
  return emit("slice", std::move(shape), std::move(out), {x}, [xi, s, start, block](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
      double* dst = gx + (outer * s.extent + start) * s.inner;
      for (std::size_t j = 0; j < block; ++j) dst[j] += o.grad[outer * block + j];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* xi = x.impl();
  return emit("sum", {}, {total}, {x}, [xi](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += x[(o * s.extent + e) * s.inner + in];
    }
  }
  TensorImpl* xi = x.impl();
  return emit("sum_axis", std::move(shape), std::move(out), {x}, [xi, s](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          gx[(outer * s.extent + e) * s.inner + in] += o.grad[outer * s.inner + in];
        }
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto extent = split_at(x.shape(), axis).extent;
  if (extent == 0) throw std::invalid_argument("mean_axis: empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(extent));
}

Tensor max_axis(const Tensor& x, std::size_t axis) { return reduce_extreme(x, axis, true, "max_axis"); }

Tensor min_axis(const Tensor& x, std::size_t axis) { return reduce_extreme(x, axis, false, "min_axis"); }

Tensor sum_squares(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v * v;
  TensorImpl* xi = x.impl();
  return emit("sum_squares", {}, {total}, {x}, [xi](const TensorImpl& o) {
    double* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += 2.0 * xi->data[i] * o.grad[0];
  });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> flat_index, Shape out_shape) {
  if (shape_numel(out_shape) != flat_index.size()) throw std::invalid_argument("gather: index count vs shape");
  std::vector<double> out(flat_index.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flat_index[i] >= x.numel()) throw std::out_of_range("gather: index out of range");
    out[i] = x[flat_index[i]];
  }
  TensorImpl* xi = x.impl();
  return emit("gather", std::move(out_shape), std::move(out), {x},
              [xi, idx = std::move(flat_index)](const TensorImpl& o) {
                double* gx = grad_of(xi);
                if (!gx) return;
                for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += o.grad[i];
              });
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw std::invalid_argument("index_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t inner = n ? x.numel() / n : 0;
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<double> out(rows.size() * inner);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw std::out_of_range("index_rows: row out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * inner), inner,
                out.begin() + static_cast<std::ptrdiff_t>(r * inner));
  }
  TensorImpl* xi = x.impl();
  std::vector<std::size_t> owned(rows.begin(), rows.end());
  return emit("index_rows", std::move(shape), std::move(out), {x},
              [xi, inner, owned = std::move(owned)](const TensorImpl& o) {
                double* gx = grad_of(xi);
                if (!gx) return;
                for (std::size_t r = 0; r < owned.size(); ++r) {
                  for (std::size_t j = 0; j < inner; ++j) gx[owned[r] * inner + j] += o.grad[r * inner + j];
                }
              });
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> rows, std::size_t n_out) {
  if (x.rank() == 0 || x.dim(0) != rows.size()) throw std::invalid_argument("scatter_rows: row count mismatch");
  const std::size_t inner = rows.empty() ? 0 : x.numel() / rows.size();
  Shape shape = x.shape();
  shape[0] = n_out;
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_out) throw std::out_of_range("scatter_rows: row out of range");
    for (std::size_t j = 0; j < inner; ++j) out[rows[r] * inner + j] += x[r * inner + j];
  }
  TensorImpl* xi = x.impl();
  std::vector<std::size_t> owned(rows.begin(), rows.end());
  return emit("scatter_rows", std::move(shape), std::move(out), {x},
              [xi, inner, owned = std::move(owned)](const TensorImpl& o) {
                double* gx = grad_of(xi);
                if (!gx) return;
                for (std::size_t r = 0; r < owned.size(); ++r) {
                  for (std::size_t j = 0; j < inner; ++j) gx[r * inner + j] += o.grad[owned[r] * inner + j];
                }
              });
}

Tensor conv2d(const Tensor& x, const Tensor& filter, std::size_t stride) {
  if (x.rank() < 2 || filter.rank() != 2) throw std::invalid_argument("conv2d: expects [..., H, W] and [h, w]");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t height = x.dim(x.rank() - 2);
  const std::size_t width = x.dim(x.rank() - 1);
  const std::size_t fh = filter.dim(0);
  const std::size_t fw = filter.dim(1);
  if (fh > height || fw > width) {
    throw std::invalid_argument("conv2d: filter " + shape_str(filter.shape()) + " larger than input " +
                                shape_str(x.shape()));
  }
  const std::size_t oh = (height - fh) / stride + 1;
  const std::size_t ow = (width - fw) / stride + 1;
  const std::size_t batch = x.numel() / (height * width);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<double> out(batch * oh * ow, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* in = x.data().data() + b * height * width;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t u = 0; u < fh; ++u) {
          for (std::size_t v = 0; v < fw; ++v) acc += filter[u * fw + v] * in[(i * stride + u) * width + j * stride + v];
        }
        out[(b * oh + i) * ow + j] = acc;
      }
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* fi = filter.impl();
  return emit("conv2d", std::move(shape), std::move(out), {x, filter},
              [xi, fi, batch, height, width, fh, fw, oh, ow, stride](const TensorImpl& o) {
                double* gx = grad_of(xi);
                double* gf = grad_of(fi);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                      const double go = o.grad[(b * oh + i) * ow + j];
                      for (std::size_t u = 0; u < fh; ++u) {
                        for (std::size_t v = 0; v < fw; ++v) {
                          const std::size_t idx = b * height * width + (i * stride + u) * width + j * stride + v;
                          if (gx) gx[idx] += go * fi->data[u * fw + v];
                          if (gf) gf[u * fw + v] += go * xi->data[idx];
                        }
                      }
                    }
                  }
                }
              });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel) {
  if (x.rank() < 2) throw std::invalid_argument("avg_pool2d: expects [..., H, W]");
  if (kernel == 0) throw std::invalid_argument("avg_pool2d: kernel must be positive");
  if (kernel == 1) return x;
  const std::size_t height = x.dim(x.rank() - 2);
  const std::size_t width = x.dim(x.rank() - 1);
  const bool global = kernel >= std::min(height, width);
  const std::size_t kh = global ? height : kernel;
  const std::size_t kw = global ? width : kernel;
  const std::size_t oh = height / kh;
  const std::size_t ow = width / kw;
  const std::size_t batch = x.numel() / (height * width);
  const double inv = 1.0 / static_cast<double>(kh * kw);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<double> out(batch * oh * ow, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t u = 0; u < kh; ++u) {
          for (std::size_t v = 0; v < kw; ++v) acc += x[b * height * width + (i * kh + u) * width + j * kw + v];
        }
        out[(b * oh + i) * ow + j] = acc * inv;
      }
    }
  }
  TensorImpl* xi = x.impl();
  return emit("avg_pool2d", std::move(shape), std::move(out), {x},
              [xi, batch, height, width, kh, kw, oh, ow, inv](const TensorImpl& o) {
                double* gx = grad_of(xi);
                if (!gx) return;
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                      const double go = o.grad[(b * oh + i) * ow + j] * inv;
                      for (std::size_t u = 0; u < kh; ++u) {
                        for (std::size_t v = 0; v < kw; ++v) gx[b * height * width + (i * kh + u) * width + j * kw + v] += go;
                      }
                    }
                  }
                }
              });
}

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads) {
  if (q.rank() != 3 || q.shape() != k.shape()) throw std::invalid_argument("attention_scores: q, k must be [B, T, d]");
  const std::size_t batch = q.dim(0);
  const std::size_t tokens = q.dim(1);
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("attention_scores: d not divisible by heads");
  const std::size_t dh = d / heads;
  const double factor = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(batch * heads * tokens * tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < heads; ++c) {
      for (std::size_t i = 0; i < tokens; ++i) {
        for (std::size_t j = 0; j < tokens; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += q[(b * tokens + i) * d + c * dh + e] * k[(b * tokens + j) * d + c * dh + e];
          out[((b * heads + c) * tokens + i) * tokens + j] = acc * factor;
        }
      }
    }
  }
  TensorImpl* qi = q.impl();
  TensorImpl* ki = k.impl();
  return emit("attention_scores", {batch, heads, tokens, tokens}, std::move(out), {q, k},
              [qi, ki, batch, heads, tokens, d, dh, factor](const TensorImpl& o) {
                double* gq = grad_of(qi);
                double* gk = grad_of(ki);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t c = 0; c < heads; ++c) {
                    for (std::size_t i = 0; i < tokens; ++i) {
                      for (std::size_t j = 0; j < tokens; ++j) {
                        const double go = o.grad[((b * heads + c) * tokens + i) * tokens + j] * factor;
                        const std::size_t qo = (b * tokens + i) * d + c * dh;
                        const std::size_t ko = (b * tokens + j) * d + c * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                          if (gq) gq[qo + e] += go * ki->data[ko + e];
                          if (gk) gk[ko + e] += go * qi->data[qo + e];
                        }
                      }
                    }
                  }
                }
              });
}

Tensor attention_apply(const Tensor& probs, const Tensor& v) {
  if (probs.rank() != 4 || v.rank() != 3) throw std::invalid_argument("attention_apply: expects [B,C,T,T] and [B,T,d]");
  const std::size_t batch = v.dim(0);
  const std::size_t tokens = v.dim(1);
  const std::size_t d = v.dim(2);
  const std::size_t heads = probs.dim(1);
  if (probs.dim(0) != batch || probs.dim(2) != tokens || probs.dim(3) != tokens || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention_apply: incompatible shapes " + shape_str(probs.shape()) + " and " +
                                shape_str(v.shape()));
  }
  const std::size_t dh = d / heads;
  std::vector<double> out(v.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < heads; ++c) {
      for (std::size_t i = 0; i < tokens; ++i) {
        for (std::size_t j = 0; j < tokens; ++j) {
          const double p = probs[((b * heads + c) * tokens + i) * tokens + j];
          for (std::size_t e = 0; e < dh; ++e) out[(b * tokens + i) * d + c * dh + e] += p * v[(b * tokens + j) * d + c * dh + e];
        }
      }
    }
  }
  TensorImpl* pi = probs.impl();
  TensorImpl* vi = v.impl();
  return emit("attention_apply", v.shape(), std::move(out), {probs, v},
              [pi, vi, batch, heads, tokens, d, dh](const TensorImpl& o) {
                double* gp = grad_of(pi);
                double* gv = grad_of(vi);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t c = 0; c < heads; ++c) {
                    for (std::size_t i = 0; i < tokens; ++i) {
                      for (std::size_t j = 0; j < tokens; ++j) {
                        const std::size_t pidx = ((b * heads + c) * tokens + i) * tokens + j;
                        const double p = pi->data[pidx];
                        double acc = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                          const double go = o.grad[(b * tokens + i) * d + c * dh + e];
                          acc += go * vi->data[(b * tokens + j) * d + c * dh + e];
                          if (gv) gv[(b * tokens + j) * d + c * dh + e] += p * go;
                        }
                        if (gp) gp[pidx] += acc;
                      }
                    }
                  }
                }
              });
}

Tensor cv_squared(const Tensor& v) {
  const std::size_t n = v.numel();
  if (n == 0) throw std::invalid_argument("cv_squared: empty vector");
  double mu = 0.0;
  for (double x : v.data()) mu += x;
  mu /= static_cast<double>(n);
  const bool degenerate = n == 1 || mu <= 1e-10;
  double dev = 0.0;
  if (!degenerate) {
    for (double x : v.data()) dev += (x - mu) * (x - mu);
  }
  const double nd = static_cast<double>(n);
  const double value = degenerate ? 0.0 : dev / (nd * mu * mu);
  TensorImpl* vi = v.impl();
  return emit("cv_squared", {}, {value}, {v}, [vi, degenerate, mu, dev, nd](const TensorImpl& o) {
    double* g = grad_of(vi);
    if (!g || degenerate) return;
    const double go = o.grad[0];
    for (std::size_t j = 0; j < vi->data.size(); ++j) {
      const double d_dev = 2.0 * (vi->data[j] - mu) / (nd * mu * mu);
      const double d_mu = -2.0 * dev / (nd * mu * mu * mu) / nd;
      g[j] += go * (d_dev + d_mu);
    }
  });
}

}  // namespace botmoe
