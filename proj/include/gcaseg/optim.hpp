#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace gcaseg {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

template <class T>
struct AdamWState {
  std::int64_t t = 0;  // completed steps
  std::vector<std::vector<T>> m, v;

  void reset(const ParameterList<T>& params) {
    t = 0;
    m.clear(), v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
      v.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
    }
  }
};

// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p), moments bias-corrected.
template <class T>
void adamw_step(ParameterList<T>& params, AdamWState<T>& state, double lr, const AdamWOptions& opt) {
  if (state.m.size() != params.size()) state.reset(params);
  ++state.t;
  const double c1 = 1 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value.values();
    const auto g = params[k].value.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw std::logic_error("optimizer state does not match parameter " + params[k].name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1 - opt.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double upd = (mi / c1) / (std::sqrt(vi / c2) + opt.eps) + opt.weight_decay * p[i];
      p[i] = static_cast<T>(p[i] - lr * upd);
    }
  }
}

// Linear 0 -> base over [0, warmup], then half-cosine to 0 at total.
inline double cosine_warmup_lr(std::int64_t step, std::int64_t total, std::int64_t warmup, double base) {
  if (total < 1 || warmup < 0 || warmup >= total) throw std::invalid_argument("need 0 <= warmup < total");
  step = std::clamp<std::int64_t>(step, 0, total);
  if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  const double frac = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return std::max(0.0, base * 0.5 * (1 + std::cos(std::numbers::pi * frac)));
}

inline std::int64_t warmup_steps(std::int64_t total, double fraction) {
  if (total <= 1) return 0;
  const auto w = static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(total)));
  return std::clamp<std::int64_t>(w, 1, total - 1);
}

}  // namespace gcaseg
