#include "botmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace botmoe {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> names;
  for (const auto& e : entries) {
    if (!e.passed) names.push_back(e.name);
  }
  return names;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss, const ParamList& params, double h, double tol,
                           double abs_floor) {
  auto& tape = Tape::current();
  tape.reset();
  for (const auto& p : params) Tensor(p.value).zero_grad();
  {
    const Tensor value = loss();
    tape.backward(value);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.value.grad().begin(), p.value.grad().end());
  tape.reset();

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor param = params[k].value;
    auto values = param.mutable_data();
    GradCheckEntry entry{params[k].name, 0.0, true};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double tape_grad = analytic[k][i];
      const double denom = std::max({std::abs(tape_grad), std::abs(numeric), abs_floor});
      const double err = tape_grad == numeric ? 0.0 : std::abs(tape_grad - numeric) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, err);
    }
    entry.passed = entry.max_rel_error <= tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace botmoe
