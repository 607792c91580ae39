#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "gcaseg/metrics.hpp"

using namespace gcaseg;

namespace {

// Mix of sparse noise, dense noise and blobs so boundaries vary in size.
BinaryMask random_mask(Extents e, std::mt19937_64& rng) {
  BinaryMask m(e);
  std::uniform_int_distribution<int> kind(0, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int k = kind(rng);
  if (k < 2) {
    const double p = k == 0 ? 0.08 : 0.55;
    for (auto& v : m.data) v = u(rng) < p;
  } else {
    const double cz = u(rng) * e[0], cy = u(rng) * e[1], cx = u(rng) * e[2];
    const double rz = 1.5 + 4 * u(rng), ry = 1.5 + 4 * u(rng), rx = 1.5 + 4 * u(rng);
    for (std::int64_t z = 0; z < e[0]; ++z)
      for (std::int64_t y = 0; y < e[1]; ++y)
        for (std::int64_t x = 0; x < e[2]; ++x) {
          const double q = std::pow((z - cz) / rz, 2) + std::pow((y - cy) / ry, 2) + std::pow((x - cx) / rx, 2);
          m.at(z, y, x) = q <= 1.0 || u(rng) < 0.02;
        }
  }
  bool any = false;
  for (auto v : m.data) any |= v != 0;
  if (!any) m.at(e[0] / 2, e[1] / 2, e[2] / 2) = 1;
  return m;
}

struct Counts {
  long a = 0, b = 0, both = 0, either = 0;
};

Counts count_oracle(const BinaryMask& p, const BinaryMask& g) {
  Counts c;
  for (std::int64_t z = 0; z < p.dims[0]; ++z)
    for (std::int64_t y = 0; y < p.dims[1]; ++y)
      for (std::int64_t x = 0; x < p.dims[2]; ++x) {
        const int a = p.at(z, y, x), b = g.at(z, y, x);
        c.a += a, c.b += b, c.both += a & b, c.either += a | b;
      }
  return c;
}

// Independent boundary extraction: a voxel is interior iff all six
// neighbours exist and are set.
std::vector<Point> boundary_oracle(const BinaryMask& m) {
  std::vector<Point> pts;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (std::int64_t z = 0; z < m.dims[0]; ++z)
    for (std::int64_t y = 0; y < m.dims[1]; ++y)
      for (std::int64_t x = 0; x < m.dims[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        int inside = 0;
        for (const auto& o : off) {
          const auto nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz >= 0 && ny >= 0 && nx >= 0 && nz < m.dims[0] && ny < m.dims[1] && nx < m.dims[2] && m.at(nz, ny, nx)) ++inside;
        }
        if (inside < 6) pts.push_back({z, y, x});
      }
  return pts;
}

double dist_oracle(const Point& a, const Point& b, const Spacing& s) {
  const double dz = (a[0] - b[0]) * s.z, dy = (a[1] - b[1]) * s.y, dx = (a[2] - b[2]) * s.x;
  return std::sqrt(dz * dz + (dy * dy + dx * dx));
}

std::vector<double> all_pairs_min(const std::vector<Point>& from, const std::vector<Point>& to, const Spacing& s) {
  std::vector<double> out;
  for (const auto& p : from) {
    double best = INFINITY;
    for (const auto& q : to) best = std::min(best, dist_oracle(p, q, s));
    out.push_back(best);
  }
  return out;
}

double p95_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double h = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 == v.size()) return v[lo];
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

BinaryMask voxels(Extents e, std::initializer_list<Point> pts) {
  BinaryMask m(e);
  for (const auto& p : pts) m.at(p[0], p[1], p[2]) = 1;
  return m;
}

}  // namespace

TEST(Metrics, DiceAndIouReferenceCases) {
  const Extents e{1, 1, 6};
  auto a = voxels(e, {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}, {0, 0, 3}});
  auto b = voxels(e, {{0, 0, 2}, {0, 0, 3}, {0, 0, 4}, {0, 0, 5}});
  EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(iou(a, b), 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  BinaryMask empty(e);
  EXPECT_DOUBLE_EQ(dice(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(iou(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, empty), 0.0);
  EXPECT_THROW(dice(a, BinaryMask({1, 2, 3})), ShapeError);
  EXPECT_DOUBLE_EQ(dice_from_pr(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(dice_from_pr(0.5, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(dice_from_pr(0, 0), 0.0);
}

TEST(Metrics, HausdorffReferenceCases) {
  const Extents e{1, 1, 6};
  auto a = voxels(e, {{0, 0, 0}}), b = voxels(e, {{0, 0, 3}});
  EXPECT_DOUBLE_EQ(*hd95(a, b), 3.0);
  EXPECT_DOUBLE_EQ(*hd_max(a, b), 3.0);
  EXPECT_DOUBLE_EQ(*hd95(a, a), 0.0);
  EXPECT_DOUBLE_EQ(*hd_max(a, a), 0.0);
  EXPECT_FALSE(hd95(a, BinaryMask(e)).has_value());
  EXPECT_FALSE(hd_max(BinaryMask(e), a).has_value());
  // All-pairs multiset {3, 5}: 3 + 0.95 * 2.
  auto two = voxels(e, {{0, 0, 3}, {0, 0, 5}});
  EXPECT_DOUBLE_EQ(*hd95(a, two, {}, HdVariant::kPaperLiteral), 4.9);
  // Standard: d_P = {3}, d_G = {3, 5} -> max(3, 3 + 0.95 * 2).
  EXPECT_DOUBLE_EQ(*hd95(a, two), 4.9);
}

// 200 random pairs at 12^3: counting and all-pairs brute-force oracles.
TEST(Metrics, RandomPairsMatchOracles) {
  std::mt19937_64 rng(2024);
  const Extents e{12, 12, 12};
  for (int t = 0; t < 200; ++t) {
    auto p = random_mask(e, rng), g = random_mask(e, rng);
    const auto c = count_oracle(p, g);
    EXPECT_EQ(dice(p, g), 2.0 * c.both / static_cast<double>(c.a + c.b));
    EXPECT_EQ(iou(p, g), c.both / static_cast<double>(c.either));

    const auto bp = boundary_oracle(p), bg = boundary_oracle(g);
    ASSERT_EQ(boundary_points(p), bp);
    const auto dp = all_pairs_min(bp, bg, {}), dg = all_pairs_min(bg, bp, {});
    EXPECT_EQ(*hd95(p, g), std::max(p95_oracle(dp), p95_oracle(dg))) << "pair " << t;
    EXPECT_EQ(*hd_max(p, g), std::max(*std::max_element(dp.begin(), dp.end()), *std::max_element(dg.begin(), dg.end())));
  }
}

TEST(Metrics, IdentitiesOnRandomPairs) {
  std::mt19937_64 rng(2024);
  const Extents e{12, 12, 12};
  for (int t = 0; t < 200; ++t) {
    auto p = random_mask(e, rng), g = random_mask(e, rng);
    const auto c = overlap_counts(p, g);
    const double d = dice(c), j = iou(c);
    EXPECT_NEAR(d, 2 * j / (1 + j), 1e-12);
    EXPECT_NEAR(d, dice_from_pr(precision(c), recall(c)), 1e-12);
    EXPECT_EQ(d, dice(g, p));
    EXPECT_EQ(j, iou(g, p));
    EXPECT_LE(*hd95(p, g), *hd_max(p, g));
  }
}

TEST(Metrics, AnisotropicSpacingMatchesOracle) {
  std::mt19937_64 rng(7);
  const Spacing s{2.5, 0.7, 1.3};
  for (int t = 0; t < 20; ++t) {
    auto p = random_mask({8, 9, 10}, rng), g = random_mask({8, 9, 10}, rng);
    const auto dp = all_pairs_min(boundary_oracle(p), boundary_oracle(g), s);
    const auto dg = all_pairs_min(boundary_oracle(g), boundary_oracle(p), s);
    EXPECT_EQ(*hd95(p, g, s), std::max(p95_oracle(dp), p95_oracle(dg)));
  }
}

TEST(Metrics, IsotropicSpacingScalesLinearly) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    auto p = random_mask({10, 10, 10}, rng), g = random_mask({10, 10, 10}, rng);
    EXPECT_NEAR(*hd95(p, g, {2, 2, 2}), 2.0 * *hd95(p, g), 1e-12);
  }
}

TEST(Metrics, InvariantUnderJointFlips) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    auto p = random_mask({7, 8, 9}, rng), g = random_mask({7, 8, 9}, rng);
    auto flip = [](const BinaryMask& m) {
      BinaryMask f(m.dims);
      for (std::int64_t z = 0; z < m.dims[0]; ++z)
        for (std::int64_t y = 0; y < m.dims[1]; ++y)
          for (std::int64_t x = 0; x < m.dims[2]; ++x) f.at(m.dims[0] - 1 - z, y, m.dims[2] - 1 - x) = m.at(z, y, x);
      return f;
    };
    EXPECT_EQ(dice(p, g), dice(flip(p), flip(g)));
    EXPECT_EQ(*hd95(p, g), *hd95(flip(p), flip(g)));
    EXPECT_EQ(*hd_max(p, g), *hd_max(flip(p), flip(g)));
  }
}

TEST(Metrics, PaperLiteralMatchesAllPairsPercentile) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 10; ++t) {
    auto p = random_mask({8, 8, 8}, rng), g = random_mask({8, 8, 8}, rng);
    std::vector<double> all;
    for (const auto& a : boundary_oracle(p))
      for (const auto& b : boundary_oracle(g)) all.push_back(dist_oracle(a, b, {}));
    EXPECT_EQ(*hd95(p, g, {}, HdVariant::kPaperLiteral), p95_oracle(all));
  }
}

TEST(Composites, NestingAndDefinitions) {
  LabelVolume bg({3, 3, 3});
  auto c = region_composites(bg);
  for (auto* m : {&c.et, &c.tc, &c.wt})
    for (auto v : m->data) EXPECT_EQ(v, 0);
  LabelVolume one({1, 1, 1}, 3);
  c = region_composites(one);
  EXPECT_EQ(c.et[0] + c.tc[0] + c.wt[0], 3);

  std::mt19937_64 rng(11);
  LabelVolume r({6, 6, 6});
  for (auto& v : r.data) v = static_cast<std::uint8_t>(rng() % 4);
  c = region_composites(r);
  for (std::int64_t i = 0; i < r.size(); ++i) {
    EXPECT_LE(c.et[i], c.tc[i]);
    EXPECT_LE(c.tc[i], c.wt[i]);
    EXPECT_EQ(c.tc[i], r[i] == 1 || r[i] == 3);
  }
  r[0] = 7;
  EXPECT_THROW(region_composites(r), std::out_of_range);
}

TEST(EvaluateCase, PerfectAndComplement) {
  std::mt19937_64 rng(12);
  LabelVolume gt({6, 6, 6});
  for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 4);
  for (const auto& row : evaluate_case(gt, gt, {}, "c0", "4")) {
    EXPECT_EQ(*row.dice, 1.0);
    EXPECT_EQ(*row.iou, 1.0);
    EXPECT_EQ(*row.hd95, 0.0);
  }
  LabelVolume comp(gt.dims);
  for (std::int64_t i = 0; i < gt.size(); ++i) comp[i] = gt[i] == 0 ? 2 : 0;
  for (const auto& row : evaluate_case(comp, gt, {})) EXPECT_EQ(*row.dice, 0.0);
}

TEST(EvaluateCase, AggregateIsMeanOfPerCaseOracles) {
  // Three 1x1x6 cases with hand-set WT overlaps; ET and TC empty in gt.
  const Extents e{1, 1, 6};
  auto lab = [&](std::initializer_list<int> idx, std::uint8_t v) {
    LabelVolume l(e);
    for (int i : idx) l[i] = v;
    return l;
  };
  MetricsReport report;
  report.add(evaluate_case(lab({0, 1, 2, 3}, 2), lab({2, 3, 4, 5}, 2), {}, "a", "0"));  // WT dice 0.5
  report.add(evaluate_case(lab({0, 1}, 2), lab({0, 1}, 2), {}, "b", "0"));              // 1.0
  report.add(evaluate_case(lab({0}, 2), lab({5}, 2), {}, "c", "1"));                    // 0.0, hd 5
  EXPECT_DOUBLE_EQ(*report.mean_dice("WT"), (0.5 + 1.0 + 0.0) / 3.0);
  EXPECT_DOUBLE_EQ(*report.mean_dice("WT", "0"), 0.75);
  EXPECT_DOUBLE_EQ(*report.mean_dice("ET"), 1.0);  // both empty everywhere
  for (const auto& r : report.aggregate())
    if (r.region == "WT" && r.fold == "all") {
      // Case a from the brute-force oracle; b is 0 and c is 5.
      auto da = all_pairs_min(boundary_oracle(region_composites(lab({0, 1, 2, 3}, 2)).wt),
                              boundary_oracle(region_composites(lab({2, 3, 4, 5}, 2)).wt), {});
      auto dg = all_pairs_min(boundary_oracle(region_composites(lab({2, 3, 4, 5}, 2)).wt),
                              boundary_oracle(region_composites(lab({0, 1, 2, 3}, 2)).wt), {});
      const double hd_a = std::max(p95_oracle(da), p95_oracle(dg));
      EXPECT_DOUBLE_EQ(*r.hd95, (hd_a + 0.0 + 5.0) / 3.0);
    }
  // ET rows have no distance (both empty) but still aggregate dice.
  for (const auto& r : report.rows)
    if (r.region == "ET") {
      EXPECT_FALSE(r.hd95.has_value());
      EXPECT_EQ(r.flags, "pred_empty;gt_empty");
    }
}

TEST(MetricsReport, CsvLayout) {
  MetricsReport report;
  report.add(evaluate_case(LabelVolume({2, 2, 2}, 1), LabelVolume({2, 2, 2}, 1), {}, "case_1", "4"));
  report.rows.push_back(missing_case_row("case_2", "4", Region::kWT));
  EXPECT_TRUE(report.any_missing());
  std::ostringstream os;
  report.write_csv(os, false);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "case_id,fold,region,dice,iou,hd95,hd_max,flags");
  std::getline(is, line);
  EXPECT_EQ(line, "case_1,4,ET,1,1,,,pred_empty;gt_empty");
  std::getline(is, line);
  EXPECT_EQ(line, "case_1,4,TC,1,1,0,0,");
  std::getline(is, line);
  std::getline(is, line);
  EXPECT_EQ(line, "case_2,4,WT,,,,,missing_prediction");
}
