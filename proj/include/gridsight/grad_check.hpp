#pragma once

// Central finite-difference verification of backward rules. The error
// measure is |analytic - numeric| / max(1, |analytic|, |numeric|): relative
// above unit scale, absolute below it.

#include <functional>

#include "gridsight/ops.hpp"

namespace gridsight {

struct GradCheckEntry {
  std::string input;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckReport {
  double max_error = 0.0;
  int64_t checked = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failures;  // entries above tol

  bool passed() const { return failures.empty(); }
};

// builder() must rebuild the scalar loss from the current input values and
// be free of observable side effects (batch-norm running-stat updates off).
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& builder,
                                  std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                  double h = 1e-5, double tol = 1e-4) {
  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = builder();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : inputs)
    analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckReport report;
  NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti].second;
    auto vals = t.data();
    for (int64_t i = 0; i < t.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      double fp = builder().item();
      vals[i] = keep - h;
      double fm = builder().item();
      vals[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][size_t(i)];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.checked;
      GradCheckEntry e{inputs[ti].first, i, a, numeric, err};
      if (err > report.max_error) {
        report.max_error = err;
        report.worst = e;
      }
      if (err > tol && report.failures.size() < 16) report.failures.push_back(e);
    }
  }
  return report;
}

}  // namespace gridsight
