#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "metrics.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace gcaseg {

struct TilePlan {
  Extents extents{};
  Extents roi{};
  double overlap = 0;
  Extents stride{};
  std::array<std::vector<std::int64_t>, 3> starts;

  std::int64_t tile_count() const {
    return static_cast<std::int64_t>(starts[0].size() * starts[1].size() * starts[2].size());
  }
  // Tile origins in z-major order.
  std::vector<Extents> tiles() const {
    std::vector<Extents> out;
    for (auto z : starts[0])
      for (auto y : starts[1])
        for (auto x : starts[2]) out.push_back({z, y, x});
    return out;
  }
};

inline std::vector<std::int64_t> plan_axis(std::int64_t extent, std::int64_t roi, std::int64_t stride) {
  std::vector<std::int64_t> s;
  for (std::int64_t p = 0; p + roi < extent; p += stride) s.push_back(p);
  if (s.empty() || s.back() != extent - roi) s.push_back(extent - roi);
  return s;
}

inline TilePlan plan_tiles(const Extents& extents, const Extents& roi, double overlap) {
  if (!(overlap >= 0 && overlap < 1)) throw std::invalid_argument("overlap must be in [0, 1), got " + std::to_string(overlap));
  TilePlan p{extents, roi, overlap, {}, {}};
  for (int a = 0; a < 3; ++a) {
    if (roi[a] < 1) throw std::invalid_argument("roi extents must be >= 1");
    if (roi[a] > extents[a])
      throw ShapeError("plan_tiles: roi " + to_string(roi) + " exceeds volume " + to_string(extents) + " (pad first)");
    p.stride[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(roi[a]) * (1 - overlap))));
    p.starts[static_cast<std::size_t>(a)] = plan_axis(extents[a], roi[a], p.stride[a]);
  }
  return p;
}

enum class Blending { kConstant, kGaussian };

inline Blending blending_from_string(const std::string& s) {
  if (s == "constant") return Blending::kConstant;
  if (s == "gaussian") return Blending::kGaussian;
  throw std::invalid_argument("blending must be 'constant' or 'gaussian', got '" + s + "'");
}

// Per-voxel tile weight: 1, or a separable Gaussian centred in the tile with sigma = roi/8.
inline std::vector<float> blend_weights(const Extents& roi, Blending mode) {
  std::vector<float> w(static_cast<std::size_t>(roi[0] * roi[1] * roi[2]), 1.0f);
  if (mode == Blending::kConstant) return w;
  std::array<std::vector<double>, 3> g;
  for (int a = 0; a < 3; ++a) {
    const double c = (roi[a] - 1) / 2.0, sigma = roi[a] / 8.0;
    for (std::int64_t i = 0; i < roi[a]; ++i) g[a].push_back(std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma)));
  }
  std::size_t k = 0;
  for (std::int64_t z = 0; z < roi[0]; ++z)
    for (std::int64_t y = 0; y < roi[1]; ++y)
      for (std::int64_t x = 0; x < roi[2]; ++x) w[k++] = static_cast<float>(g[0][z] * g[1][y] * g[2][x]);
  return w;
}

// Maps [n, C, r, r, r] tiles to [n, K, r, r, r] logits. Must be callable
// concurrently when workers > 1.
template <class T>
using TileModel = std::function<Tensor<T>(const Tensor<T>&)>;

struct SlidingWindowOptions {
  std::int64_t sw_batch = 2;
  Blending blending = Blending::kGaussian;
  std::int64_t workers = 1;  // concurrent tile batches; accumulation order is fixed
};

// volume [B, C, D, H, W] -> logits [B, K, D, H, W] as the weighted mean of tile outputs.
template <class T>
Tensor<T> sliding_window_infer(const Tensor<T>& volume, const TileModel<T>& model, const TilePlan& plan,
                               const SlidingWindowOptions& opt = {}) {
  check_shape(volume.ndim() == 5, "sliding_window_infer", "volume must be [B,C,D,H,W]");
  const Extents e{volume.dim(2), volume.dim(3), volume.dim(4)};
  check_shape(e == plan.extents, "sliding_window_infer", "volume " + to_string(e) + " does not match plan " + to_string(plan.extents));
  if (opt.sw_batch < 1) throw std::invalid_argument("sw_batch must be >= 1");
  const auto B = volume.dim(0), C = volume.dim(1), n = e[0] * e[1] * e[2];
  const auto r = plan.roi;
  const auto rn = r[0] * r[1] * r[2];
  const auto tiles = plan.tiles();
  const auto w = blend_weights(r, opt.blending);

  // Tile batches are (batch item, run of up to sw_batch tiles).
  struct Job {
    std::int64_t b;
    std::size_t first, count;
  };
  std::vector<Job> jobs;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < tiles.size(); t += static_cast<std::size_t>(opt.sw_batch))
      jobs.push_back({b, t, std::min<std::size_t>(static_cast<std::size_t>(opt.sw_batch), tiles.size() - t)});

  auto run = [&](const Job& job) {
    NoGradGuard ng;
    const auto cnt = static_cast<std::int64_t>(job.count);
    Tensor<T> in({cnt, C, r[0], r[1], r[2]});
    for (std::int64_t k = 0; k < cnt; ++k) {
      const auto& o = tiles[job.first + static_cast<std::size_t>(k)];
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t z = 0; z < r[0]; ++z)
          for (std::int64_t y = 0; y < r[1]; ++y) {
            const T* src = volume.data().data() + ((job.b * C + c) * e[0] + o[0] + z) * e[1] * e[2] + (o[1] + y) * e[2] + o[2];
            T* dst = in.data().data() + (((k * C + c) * r[0] + z) * r[1] + y) * r[2];
            std::copy_n(src, r[2], dst);
          }
    }
    auto out = model(in);
    check_shape(out.ndim() == 5 && out.dim(0) == cnt && out.dim(2) == r[0] && out.dim(3) == r[1] && out.dim(4) == r[2],
                "sliding_window_infer", "model returned " + to_string(out.shape()) + " for tiles " + to_string(in.shape()));
    return out;
  };

  std::vector<double> wsum(static_cast<std::size_t>(B * n), 0.0);
  std::vector<double> sum;
  std::int64_t K = -1;
  auto accumulate = [&](const Job& job, const Tensor<T>& out) {
    if (K < 0) {
      K = out.dim(1);
      sum.assign(static_cast<std::size_t>(B * K * n), 0.0);
    }
    check_shape(out.dim(1) == K, "sliding_window_infer", "inconsistent class count across tiles");
    for (std::size_t k = 0; k < job.count; ++k) {
      const auto& o = tiles[job.first + k];
      for (std::int64_t z = 0; z < r[0]; ++z)
        for (std::int64_t y = 0; y < r[1]; ++y)
          for (std::int64_t x = 0; x < r[2]; ++x) {
            const auto ti = (z * r[1] + y) * r[2] + x;
            const auto vi = ((o[0] + z) * e[1] + o[1] + y) * e[2] + o[2] + x;
            const double wt = w[static_cast<std::size_t>(ti)];
            wsum[static_cast<std::size_t>(job.b * n + vi)] += wt;
            for (std::int64_t c = 0; c < K; ++c)
              sum[static_cast<std::size_t>((job.b * K + c) * n + vi)] +=
                  wt * static_cast<double>(out[(static_cast<std::int64_t>(k) * K + c) * rn + ti]);
          }
    }
  };

  const auto workers = std::max<std::int64_t>(1, opt.workers);
  if (workers == 1) {
    for (const auto& job : jobs) accumulate(job, run(job));
  } else {
    // Keep up to `workers` batches in flight; consume strictly in job order.
    std::vector<std::future<Tensor<T>>> inflight(jobs.size());
    std::size_t next = 0;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      while (next < jobs.size() && next < j + static_cast<std::size_t>(workers)) {
        inflight[next] = std::async(std::launch::async, run, std::cref(jobs[next]));
        ++next;
      }
      accumulate(jobs[j], inflight[j].get());
    }
  }

  Tensor<T> acc({B, K, e[0], e[1], e[2]});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < K; ++c)
      for (std::int64_t i = 0; i < n; ++i)
        acc[(b * K + c) * n + i] = static_cast<T>(sum[static_cast<std::size_t>((b * K + c) * n + i)] / wsum[static_cast<std::size_t>(b * n + i)]);
  return acc;
}

// Single case [C, D, H, W] of any extent: zero-pads up to roi where needed,
// runs the sliding window and crops the logits back to the input extents.
template <class T>
Tensor<T> infer_case(const Tensor<T>& image, const TileModel<T>& model, const Extents& roi, double overlap,
                     const SlidingWindowOptions& opt = {}, bool* single_tile = nullptr) {
  check_shape(image.ndim() == 4, "infer_case", "image must be [C,D,H,W]");
  const Extents e{image.dim(1), image.dim(2), image.dim(3)};
  Extents padded;
  for (int a = 0; a < 3; ++a) padded[a] = std::max(e[a], roi[a]);
  const auto C = image.dim(0);
  Tensor<T> vol({1, C, padded[0], padded[1], padded[2]});
  std::array<std::int64_t, 3> off;
  for (int a = 0; a < 3; ++a) off[a] = (padded[a] - e[a]) / 2;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t z = 0; z < e[0]; ++z)
      for (std::int64_t y = 0; y < e[1]; ++y)
        std::copy_n(image.data().data() + ((c * e[0] + z) * e[1] + y) * e[2], e[2],
                    vol.data().data() + ((c * padded[0] + z + off[0]) * padded[1] + y + off[1]) * padded[2] + off[2]);
  const auto plan = plan_tiles(padded, roi, overlap);
  if (single_tile) *single_tile = plan.tile_count() == 1;
  const auto full = sliding_window_infer(vol, model, plan, opt);
  const auto K = full.dim(1);
  if (padded == e) return Tensor<T>({K, e[0], e[1], e[2]}, full.values());
  Tensor<T> out({K, e[0], e[1], e[2]});
  for (std::int64_t c = 0; c < K; ++c)
    for (std::int64_t z = 0; z < e[0]; ++z)
      for (std::int64_t y = 0; y < e[1]; ++y)
        std::copy_n(full.data().data() + ((c * padded[0] + z + off[0]) * padded[1] + y + off[1]) * padded[2] + off[2], e[2],
                    out.data().data() + ((c * e[0] + z) * e[1] + y) * e[2]);
  return out;
}

// ------------------------------------------------------------ morphology

namespace morph {

inline constexpr std::array<std::array<int, 3>, 6> kFaces = {{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};

// 6-neighbourhood dilation; nothing outside the volume is set.
inline BinaryMask dilate(const BinaryMask& m) {
  BinaryMask out = m;
  const auto& e = m.dims;
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) {
        if (m.at(z, y, x)) continue;
        for (const auto& f : kFaces) {
          const auto zz = z + f[0], yy = y + f[1], xx = x + f[2];
          if (zz >= 0 && zz < e[0] && yy >= 0 && yy < e[1] && xx >= 0 && xx < e[2] && m.at(zz, yy, xx)) {
            out.at(z, y, x) = 1;
            break;
          }
        }
      }
  return out;
}

// Neighbours outside the volume do not erode.
inline BinaryMask erode(const BinaryMask& m) {
  BinaryMask out = m;
  const auto& e = m.dims;
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        for (const auto& f : kFaces) {
          const auto zz = z + f[0], yy = y + f[1], xx = x + f[2];
          if (zz >= 0 && zz < e[0] && yy >= 0 && yy < e[1] && xx >= 0 && xx < e[2] && !m.at(zz, yy, xx)) {
            out.at(z, y, x) = 0;
            break;
          }
        }
      }
  return out;
}

// Closing against an unbounded background: pad by one voxel, close, crop.
inline BinaryMask close(const BinaryMask& m) {
  const auto& e = m.dims;
  BinaryMask p({e[0] + 2, e[1] + 2, e[2] + 2});
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) p.at(z + 1, y + 1, x + 1) = m.at(z, y, x);
  const auto c = erode(dilate(p));
  BinaryMask out(e);
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) out.at(z, y, x) = c.at(z + 1, y + 1, x + 1);
  return out;
}

// Component id per voxel (-1 for background) and the size of each component.
inline std::pair<std::vector<std::int32_t>, std::vector<std::int64_t>> components(const BinaryMask& m) {
  const auto& e = m.dims;
  std::vector<std::int32_t> id(static_cast<std::size_t>(m.size()), -1);
  std::vector<std::int64_t> sizes;
  std::vector<std::int64_t> stack;
  for (std::int64_t s = 0; s < m.size(); ++s) {
    if (!m[s] || id[static_cast<std::size_t>(s)] >= 0) continue;
    const auto label = static_cast<std::int32_t>(sizes.size());
    std::int64_t count = 0;
    stack.push_back(s);
    id[static_cast<std::size_t>(s)] = label;
    while (!stack.empty()) {
      const auto v = stack.back();
      stack.pop_back();
      ++count;
      const std::int64_t z = v / (e[1] * e[2]), y = v / e[2] % e[1], x = v % e[2];
      for (const auto& f : kFaces) {
        const auto zz = z + f[0], yy = y + f[1], xx = x + f[2];
        if (zz < 0 || zz >= e[0] || yy < 0 || yy >= e[1] || xx < 0 || xx >= e[2]) continue;
        const auto u = m.index(zz, yy, xx);
        if (m[u] && id[static_cast<std::size_t>(u)] < 0) {
          id[static_cast<std::size_t>(u)] = label;
          stack.push_back(u);
        }
      }
    }
    sizes.push_back(count);
  }
  return {std::move(id), std::move(sizes)};
}

}  // namespace morph

struct PostprocessOptions {
  std::int64_t min_component_voxels = 10;
  bool closing = true;
};

// Drops 6-connected WT components below the size threshold, then closes WT,
// TC and ET in that order, clipping each to the previous one so that
// ET <= TC <= WT, and rebuilds the label map from the three composites.
inline LabelVolume postprocess(const LabelVolume& labels, const PostprocessOptions& opt = {}) {
  check_labels(labels);
  LabelVolume l = labels;
  const auto [comp, sizes] = morph::components(region_composites(l).wt);
  for (std::int64_t i = 0; i < l.size(); ++i) {
    const auto c = comp[static_cast<std::size_t>(i)];
    if (c >= 0 && sizes[static_cast<std::size_t>(c)] < opt.min_component_voxels) l[i] = 0;
  }
  if (!opt.closing) return l;
  auto r = region_composites(l);
  const auto wt = morph::close(r.wt);
  auto tc = morph::close(r.tc);
  auto et = morph::close(r.et);
  for (std::int64_t i = 0; i < l.size(); ++i) {
    tc[i] = tc[i] && wt[i];
    et[i] = et[i] && tc[i];
    l[i] = et[i] ? 3 : tc[i] ? 1 : wt[i] ? 2 : 0;
  }
  return l;
}

}  // namespace gcaseg
