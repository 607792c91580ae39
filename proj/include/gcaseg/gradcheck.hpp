#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace gcaseg {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped_kinks = 0;  // coordinates whose perturbation flips a rectifier
};

namespace detail {

struct Probe {
  double value;
  std::uint64_t signature;
};

inline Probe probe(const std::function<Tensor<double>()>& loss) {
  NoGradGuard ng;
  kink_monitor.active = true;
  kink_monitor.reset();
  const double v = loss().item();
  kink_monitor.active = false;
  return {v, kink_monitor.signature};
}

}  // namespace detail

// Compares reverse-mode gradients of loss() with respect to every element of
// `leaves` against central differences. The relative error of a coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& loss,
                                         std::vector<Tensor<double>> leaves, double eps = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

  const auto base = detail::probe(loss);
  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& vals = leaves[l].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const auto up = detail::probe(loss);
      vals[i] = orig - eps;
      const auto down = detail::probe(loss);
      vals[i] = orig;
      if (up.signature != base.signature || down.signature != base.signature) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (up.value - down.value) / (2.0 * eps);
      const double a = analytic[l][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

// Single-input form: f maps x to a scalar.
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                         const Tensor<double>& x, double eps = 1e-5) {
  Tensor<double> leaf = x.clone();
  return finite_diff_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace gcaseg
