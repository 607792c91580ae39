#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <utility>
#include <vector>

namespace gcaseg {

enum class Connectivity { kFace6 = 6, kFull26 = 26 };

// Directed voxel adjacency over a flattened D*H*W grid (row-major, W fastest).
struct EdgeIndex {
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;  // (source, target)
  std::int64_t node_count = 0;
};

inline EdgeIndex build_grid_graph(std::int64_t depth, std::int64_t height, std::int64_t width,
                                  Connectivity connectivity = Connectivity::kFace6) {
  if (depth < 1 || height < 1 || width < 1) throw std::invalid_argument("build_grid_graph: extents must be >= 1");
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0) continue;
        if (connectivity == Connectivity::kFace6 && manhattan != 1) continue;
        offsets.push_back({dz, dy, dx});
      }
  EdgeIndex e;
  e.node_count = depth * height * width;
  for (std::int64_t z = 0; z < depth; ++z)
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        const auto i = static_cast<std::int32_t>((z * height + y) * width + x);
        for (const auto& o : offsets) {
          const auto nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz < 0 || ny < 0 || nx < 0 || nz >= depth || ny >= height || nx >= width) continue;
          e.pairs.emplace_back(i, static_cast<std::int32_t>((nz * height + ny) * width + nx));
        }
      }
  return e;
}

// Incoming-neighbour lists in CSR form: sources of target i are
// sources[offsets[i] .. offsets[i+1]). With self loops, i itself comes first.
struct InNeighbourhoods {
  std::vector<std::int64_t> offsets;
  std::vector<std::int32_t> sources;
};

inline InNeighbourhoods in_neighbourhoods(const EdgeIndex& edges, bool self_loops) {
  const auto n = edges.node_count;
  std::vector<std::int64_t> count(static_cast<std::size_t>(n), self_loops ? 1 : 0);
  for (const auto& [s, t] : edges.pairs) {
    if (s < 0 || t < 0 || s >= n || t >= n) throw std::out_of_range("EdgeIndex: node index out of range");
    if (s != t) ++count[static_cast<std::size_t>(t)];
  }
  InNeighbourhoods nb;
  nb.offsets.assign(static_cast<std::size_t>(n) + 1, 0);
  for (std::int64_t i = 0; i < n; ++i)
    nb.offsets[static_cast<std::size_t>(i) + 1] = nb.offsets[static_cast<std::size_t>(i)] + count[static_cast<std::size_t>(i)];
  nb.sources.resize(static_cast<std::size_t>(nb.offsets.back()));
  std::vector<std::int64_t> fill(nb.offsets.begin(), nb.offsets.end() - 1);
  if (self_loops)
    for (std::int64_t i = 0; i < n; ++i) nb.sources[static_cast<std::size_t>(fill[static_cast<std::size_t>(i)]++)] = static_cast<std::int32_t>(i);
  for (const auto& [s, t] : edges.pairs)
    if (s != t) nb.sources[static_cast<std::size_t>(fill[static_cast<std::size_t>(t)]++)] = s;
  return nb;
}

}  // namespace gcaseg
