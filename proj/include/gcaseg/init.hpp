#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "tensor.hpp"

namespace gcaseg {

// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)].
template <class T>
void init_uniform_fan_in(Tensor<T>& t, std::int64_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::int64_t>(1, fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

}  // namespace gcaseg
