#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcaseg {

using Extents = std::array<std::int64_t, 3>;  // (D, H, W)

struct Spacing {
  double z = 1.0, y = 1.0, x = 1.0;
  bool operator==(const Spacing&) const = default;
};

// Dense D*H*W scalar volume, W fastest.
template <class V>
struct Volume {
  Extents dims{0, 0, 0};
  std::vector<V> data;

  Volume() = default;
  explicit Volume(Extents d, V fill = V{}) : dims(d), data(static_cast<std::size_t>(d[0] * d[1] * d[2]), fill) {}

  std::int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  V& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
  const V& at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[static_cast<std::size_t>(index(z, y, x))]; }
  V& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const V& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  bool operator==(const Volume&) const = default;
};

// 0 background, 1 NCR/NET, 2 ED, 3 ET.
using LabelVolume = Volume<std::uint8_t>;
using BinaryMask = Volume<std::uint8_t>;

inline constexpr int kNumLabels = 4;

inline std::string to_string(const Extents& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

inline void check_labels(const LabelVolume& labels, int n_classes = kNumLabels) {
  for (auto v : labels.data)
    if (v >= n_classes) throw std::out_of_range("label " + std::to_string(int(v)) + " outside [0, " + std::to_string(n_classes) + ")");
}

}  // namespace gcaseg
