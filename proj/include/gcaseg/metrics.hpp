#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "volume.hpp"

namespace gcaseg {

enum class Region { kET, kTC, kWT, kCustom };

inline const char* region_name(Region r) {
  switch (r) {
    case Region::kET: return "ET";
    case Region::kTC: return "TC";
    case Region::kWT: return "WT";
    default: return "custom";
  }
}

struct RegionMask {
  BinaryMask mask;
  Region region = Region::kCustom;
  Spacing spacing;
};

struct OverlapCounts {
  std::int64_t pred = 0, gt = 0, both = 0;
};

inline OverlapCounts overlap_counts(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.dims != gt.dims)
    throw ShapeError("metrics: mask shapes differ (" + to_string(pred.dims) + " vs " + to_string(gt.dims) + ")");
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
    c.pred += a;
    c.gt += b;
    c.both += a && b;
  }
  return c;
}

// Both empty -> 1, exactly one empty -> 0.
inline double dice(const OverlapCounts& c) {
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.gt);
}
inline double dice(const BinaryMask& pred, const BinaryMask& gt) { return dice(overlap_counts(pred, gt)); }

inline double iou(const OverlapCounts& c) {
  const auto uni = c.pred + c.gt - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}
inline double iou(const BinaryMask& pred, const BinaryMask& gt) { return iou(overlap_counts(pred, gt)); }

// An empty prediction has precision 1 if the reference is also empty, else 0
// (and symmetrically for recall), so dice_from_pr agrees with dice.
inline double precision(const OverlapCounts& c) {
  if (c.pred == 0) return c.gt == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.both) / static_cast<double>(c.pred);
}
inline double recall(const OverlapCounts& c) {
  if (c.gt == 0) return c.pred == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.both) / static_cast<double>(c.gt);
}

inline double dice_from_pr(double p, double r) {
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

// ------------------------------------------------------------------ distances

using Point = std::array<std::int64_t, 3>;

// Mask voxels with a 6-neighbour outside the mask or lying on the volume border.
inline std::vector<Point> boundary_points(const BinaryMask& m) {
  std::vector<Point> pts;
  const auto [D, H, W] = m.dims;
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool border = z == 0 || y == 0 || x == 0 || z == D - 1 || y == H - 1 || x == W - 1;
        if (border || !m.at(z - 1, y, x) || !m.at(z + 1, y, x) || !m.at(z, y - 1, x) || !m.at(z, y + 1, x) ||
            !m.at(z, y, x - 1) || !m.at(z, y, x + 1))
          pts.push_back({z, y, x});
      }
  return pts;
}

inline double squared_distance(const Point& a, const Point& b, const Spacing& s) {
  const double dz = static_cast<double>(a[0] - b[0]) * s.z;
  const double dy = static_cast<double>(a[1] - b[1]) * s.y;
  const double dx = static_cast<double>(a[2] - b[2]) * s.x;
  return dz * dz + (dy * dy + dx * dx);
}

// For each point in `from`, the exact Euclidean distance to the nearest point
// of `to` (nonempty). `to` is swept in z order with pruning on the z gap.
inline std::vector<double> nearest_distances(const std::vector<Point>& from, std::vector<Point> to, const Spacing& s) {
  std::sort(to.begin(), to.end());
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    const auto mid = std::lower_bound(to.begin(), to.end(), p) - to.begin();
    auto gap = [&](std::int64_t i) {
      const double dz = static_cast<double>(to[static_cast<std::size_t>(i)][0] - p[0]) * s.z;
      return dz * dz;
    };
    for (std::int64_t i = mid; i < static_cast<std::int64_t>(to.size()) && gap(i) <= best; ++i)
      best = std::min(best, squared_distance(p, to[static_cast<std::size_t>(i)], s));
    for (std::int64_t i = mid - 1; i >= 0 && gap(i) <= best; --i)
      best = std::min(best, squared_distance(p, to[static_cast<std::size_t>(i)], s));
    out.push_back(std::sqrt(best));
  }
  return out;
}

// Linear interpolation between order statistics at rank q/100 * (n-1).
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("percentile of an empty set");
  const double h = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return percentile_sorted(v, q);
}

// Same convention without a full sort (for very large multisets).
inline double percentile_select(std::vector<double>& v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty set");
  const double h = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + (h - static_cast<double>(lo)) * (b - a);
}

enum class HdVariant { kStandard, kPaperLiteral };

struct SurfaceDistances {
  std::vector<double> pred_to_gt, gt_to_pred;
};

inline std::optional<SurfaceDistances> surface_distances(const BinaryMask& pred, const BinaryMask& gt, const Spacing& s) {
  if (pred.dims != gt.dims) throw ShapeError("metrics: mask shapes differ");
  auto bp = boundary_points(pred), bg = boundary_points(gt);
  if (bp.empty() || bg.empty()) return std::nullopt;
  return SurfaceDistances{nearest_distances(bp, bg, s), nearest_distances(bg, bp, s)};
}

// nullopt when either mask is empty (distance undefined).
inline std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt, const Spacing& s = {},
                                  HdVariant variant = HdVariant::kStandard) {
  if (pred.dims != gt.dims) throw ShapeError("metrics: mask shapes differ");
  if (variant == HdVariant::kPaperLiteral) {
    auto bp = boundary_points(pred), bg = boundary_points(gt);
    if (bp.empty() || bg.empty()) return std::nullopt;
    std::vector<double> all;
    all.reserve(bp.size() * bg.size());
    for (const auto& p : bp)
      for (const auto& g : bg) all.push_back(std::sqrt(squared_distance(p, g, s)));
    return percentile_select(all, 95.0);
  }
  auto d = surface_distances(pred, gt, s);
  if (!d) return std::nullopt;
  return std::max(percentile(d->pred_to_gt, 95.0), percentile(d->gt_to_pred, 95.0));
}

inline std::optional<double> hd_max(const BinaryMask& pred, const BinaryMask& gt, const Spacing& s = {}) {
  auto d = surface_distances(pred, gt, s);
  if (!d) return std::nullopt;
  return std::max(*std::max_element(d->pred_to_gt.begin(), d->pred_to_gt.end()),
                  *std::max_element(d->gt_to_pred.begin(), d->gt_to_pred.end()));
}

// ----------------------------------------------------------------- composites

struct Composites {
  BinaryMask et, tc, wt;
};

// ET = {3}, TC = {1, 3}, WT = {1, 2, 3}.
inline Composites region_composites(const LabelVolume& labels) {
  check_labels(labels);
  Composites c{BinaryMask(labels.dims), BinaryMask(labels.dims), BinaryMask(labels.dims)};
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const auto l = labels.data[i];
    c.et.data[i] = l == 3;
    c.tc.data[i] = l == 1 || l == 3;
    c.wt.data[i] = l != 0;
  }
  return c;
}

// ---------------------------------------------------------------------- report

struct MetricsRow {
  std::string case_id;
  std::string fold;
  std::string region;
  std::optional<double> dice, iou, hd95, hd_max;
  std::string flags;
};

inline std::vector<MetricsRow> evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing,
                                             const std::string& case_id = "", const std::string& fold = "",
                                             HdVariant variant = HdVariant::kStandard) {
  if (pred.dims != gt.dims)
    throw ShapeError("evaluate_case: prediction " + to_string(pred.dims) + " and reference " + to_string(gt.dims) + " differ");
  const auto p = region_composites(pred), g = region_composites(gt);
  std::vector<MetricsRow> rows;
  const std::array<std::pair<Region, std::pair<const BinaryMask*, const BinaryMask*>>, 3> regions{{
      {Region::kET, {&p.et, &g.et}}, {Region::kTC, {&p.tc, &g.tc}}, {Region::kWT, {&p.wt, &g.wt}}}};
  for (const auto& [r, masks] : regions) {
    MetricsRow row{case_id, fold, region_name(r), {}, {}, {}, {}, ""};
    const auto c = overlap_counts(*masks.first, *masks.second);
    row.dice = dice(c);
    row.iou = iou(c);
    row.hd95 = hd95(*masks.first, *masks.second, spacing, variant);
    row.hd_max = hd_max(*masks.first, *masks.second, spacing);
    if (c.pred == 0) row.flags += "pred_empty;";
    if (c.gt == 0) row.flags += "gt_empty;";
    if (!row.flags.empty()) row.flags.pop_back();
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MetricsRow missing_case_row(const std::string& case_id, const std::string& fold, Region r) {
  return MetricsRow{case_id, fold, region_name(r), {}, {}, {}, {}, "missing_prediction"};
}

struct MetricsReport {
  std::vector<MetricsRow> rows;

  void add(std::vector<MetricsRow> more) {
    for (auto& r : more) rows.push_back(std::move(r));
  }

  // Mean over cases of each metric, per region, ignoring missing values.
  // Grouped per fold plus an "all" group.
  std::vector<MetricsRow> aggregate() const {
    struct Acc {
      double sum[4] = {0, 0, 0, 0};
      int n[4] = {0, 0, 0, 0};
    };
    std::map<std::pair<std::string, std::string>, Acc> acc;
    for (const auto& r : rows) {
      if (r.flags == "aggregate") continue;
      for (const auto& key : {std::make_pair(r.fold, r.region), std::make_pair(std::string("all"), r.region)}) {
        auto& a = acc[key];
        const std::optional<double>* vals[4] = {&r.dice, &r.iou, &r.hd95, &r.hd_max};
        for (int m = 0; m < 4; ++m)
          if (vals[m]->has_value()) a.sum[m] += **vals[m], ++a.n[m];
      }
    }
    std::vector<MetricsRow> out;
    for (const auto& [key, a] : acc) {
      if (key.first != "all" && key.first.empty()) continue;
      MetricsRow row{"mean", key.first, key.second, {}, {}, {}, {}, "aggregate"};
      std::optional<double>* dst[4] = {&row.dice, &row.iou, &row.hd95, &row.hd_max};
      for (int m = 0; m < 4; ++m)
        if (a.n[m] > 0) *dst[m] = a.sum[m] / a.n[m];
      out.push_back(std::move(row));
    }
    return out;
  }

  std::optional<double> mean_dice(const std::string& region, const std::string& fold = "all") const {
    for (const auto& r : aggregate())
      if (r.region == region && r.fold == fold) return r.dice;
    return std::nullopt;
  }

  bool any_missing() const {
    for (const auto& r : rows)
      if (r.flags.find("missing") != std::string::npos) return true;
    return false;
  }

  static constexpr const char* kHeader = "case_id,fold,region,dice,iou,hd95,hd_max,flags";

  void write_csv(std::ostream& os, bool with_aggregate = true) const {
    os << kHeader << '\n';
    auto num = [&](const std::optional<double>& v) {
      if (!v) return std::string();
      std::ostringstream s;
      s << std::setprecision(17) << *v;
      return s.str();
    };
    auto emit = [&](const MetricsRow& r) {
      os << r.case_id << ',' << r.fold << ',' << r.region << ',' << num(r.dice) << ',' << num(r.iou) << ','
         << num(r.hd95) << ',' << num(r.hd_max) << ',' << r.flags << '\n';
    };
    for (const auto& r : rows) emit(r);
    if (with_aggregate)
      for (const auto& r : aggregate()) emit(r);
  }
};

}  // namespace gcaseg
