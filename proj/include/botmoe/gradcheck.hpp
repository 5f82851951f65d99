#pragma once

#include <functional>
#include <string>
#include <vector>

#include "botmoe/nn.hpp"

namespace botmoe {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double worst() const;
  std::vector<std::string> failures() const;
};

/// Compares tape gradients of the scalar `loss` against central differences
/// (f(p+h) - f(p-h)) / 2h for every coordinate of every parameter. The
/// per-coordinate relative error is |tape - numeric| / max(|tape|, |numeric|,
/// abs_floor); each entry reports the maximum over its tensor.
///
/// `loss` must be a pure function of the parameter values (reseed any rng it
/// uses on every call), and the evaluation point should sit away from kinks.
GradCheckReport grad_check(const std::function<Tensor()>& loss, const ParamList& params, double h, double tol,
                           double abs_floor = 1e-8);

}  // namespace botmoe
