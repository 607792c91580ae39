#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "gcaseg/attention.hpp"
#include "gcaseg/gradcheck.hpp"
#include "test_util.hpp"

using namespace gcaseg;
using gcaseg::testing::random_tensor;

namespace {

// Exhaustive neighbour enumeration, independent of build_grid_graph.
std::set<std::pair<int, int>> enumerate_face_neighbours(int D, int H, int W) {
  std::set<std::pair<int, int>> out;
  auto id = [&](int z, int y, int x) { return (z * H + y) * W + x; };
  for (int z1 = 0; z1 < D; ++z1)
    for (int y1 = 0; y1 < H; ++y1)
      for (int x1 = 0; x1 < W; ++x1)
        for (int z2 = 0; z2 < D; ++z2)
          for (int y2 = 0; y2 < H; ++y2)
            for (int x2 = 0; x2 < W; ++x2)
              if (std::abs(z1 - z2) + std::abs(y1 - y2) + std::abs(x1 - x2) == 1)
                out.insert({id(z1, y1, x1), id(z2, y2, x2)});
  return out;
}

GraphAttentionLayer<double> scalar_layer(double ws, double wd, double a) {
  GraphAttentionLayer<double> layer(1, 1);
  layer.w_src[0] = ws;
  layer.w_dst[0] = wd;
  layer.att[0] = a;
  return layer;
}

}  // namespace

TEST(GridGraph, SmallCounts) {
  EXPECT_EQ(build_grid_graph(1, 1, 1).pairs.size(), 0u);
  EXPECT_EQ(build_grid_graph(2, 2, 2).pairs.size(), 24u);
  auto g = build_grid_graph(3, 3, 3);
  EXPECT_EQ(g.pairs.size(), 108u);
  std::set<std::pair<int, int>> got(g.pairs.begin(), g.pairs.end());
  EXPECT_EQ(got, enumerate_face_neighbours(3, 3, 3));
}

TEST(GridGraph, EdgeCountFormulaExhaustive) {
  for (int D = 1; D <= 5; ++D)
    for (int H = 1; H <= 5; ++H)
      for (int W = 1; W <= 5; ++W) {
        auto g = build_grid_graph(D, H, W);
        const auto expect = 2 * ((D - 1) * H * W + D * (H - 1) * W + D * H * (W - 1));
        ASSERT_EQ(static_cast<int>(g.pairs.size()), expect) << D << "x" << H << "x" << W;
        std::set<std::pair<int, int>> uniq(g.pairs.begin(), g.pairs.end());
        EXPECT_EQ(uniq.size(), g.pairs.size());
        for (auto [s, t] : g.pairs) {
          EXPECT_NE(s, t);
          EXPECT_TRUE(s >= 0 && t >= 0 && s < g.node_count && t < g.node_count);
          EXPECT_TRUE(uniq.count({t, s}));
        }
      }
}

TEST(GridGraph, FullConnectivity) {
  auto g = build_grid_graph(3, 3, 3, Connectivity::kFull26);
  // Interior voxel sees all 26; brute-force count over the cube.
  int expect = 0;
  for (int a = 0; a < 27; ++a)
    for (int b = 0; b < 27; ++b) {
      if (a == b) continue;
      const int dz = std::abs(a / 9 - b / 9), dy = std::abs(a / 3 % 3 - b / 3 % 3), dx = std::abs(a % 3 - b % 3);
      if (std::max({dz, dy, dx}) == 1) ++expect;
    }
  EXPECT_EQ(static_cast<int>(g.pairs.size()), expect);
}

TEST(Gatv2, IdenticalFeaturesGiveUniformAttention) {
  GraphAttentionLayer<double> layer(3, 2);
  std::mt19937_64 rng(1);
  layer.init(rng);
  Tensor<double> feats({8, 3});
  for (std::int64_t i = 0; i < 8; ++i)
    for (int c = 0; c < 3; ++c) feats[i * 3 + c] = 0.1 * (c + 1);
  std::vector<double> alpha;
  auto edges = build_grid_graph(2, 2, 2);
  gatv2_attend(feats, edges, layer, &alpha);
  // Each node: self + 3 neighbours.
  for (double a : alpha) EXPECT_NEAR(a, 0.25, 1e-15);
}

TEST(Gatv2, SingletonSelfLoop) {
  auto layer = scalar_layer(1.7, -0.4, 2.0);
  EdgeIndex single;
  single.node_count = 1;
  auto out = gatv2_attend(Tensor<double>({1, 1}, {0.6}), single, layer);
  EXPECT_DOUBLE_EQ(out[0], 1.7 * 0.6);
}

TEST(Gatv2, PathGraphMatchesScalarOracle) {
  EdgeIndex path;
  path.node_count = 3;
  path.pairs = {{0, 1}, {1, 0}, {1, 2}, {2, 1}};
  auto out = gatv2_attend(Tensor<double>({3, 1}, {1.0, -2.0, 0.5}), path, scalar_layer(0.7, -1.1, 0.9));
  // Frozen from tests/oracles/gca_hand_oracle.py.
  EXPECT_NEAR(out[0], -0.15387966265134329, 1e-12);
  EXPECT_NEAR(out[1], 0.39552401743811205, 1e-12);
  EXPECT_NEAR(out[2], -0.388315842452459, 1e-12);
}

TEST(Gatv2, RejectsIsolatedNodeWithoutSelfLoops) {
  auto layer = scalar_layer(1.0, 1.0, 1.0);
  layer.self_loops = false;
  EdgeIndex g;
  g.node_count = 3;
  g.pairs = {{0, 1}, {1, 0}};
  EXPECT_THROW(gatv2_attend(Tensor<double>({3, 1}, {1, 2, 3}), g, layer), std::invalid_argument);
}

TEST(Gatv2, AttentionNormalisedPerNeighbourhood) {
  GraphAttentionLayer<double> layer(4, 3, 2);
  std::mt19937_64 rng(2);
  layer.init(rng);
  auto edges = build_grid_graph(3, 2, 4);
  auto nb = in_neighbourhoods(edges, true);
  std::vector<double> alpha;
  auto out = gatv2_attend(random_tensor<double>({24, 4}, 3), edges, layer, &alpha);
  EXPECT_EQ(out.shape(), (Shape{24, 6}));
  for (std::int64_t i = 0; i < 24; ++i)
    for (int h = 0; h < 2; ++h) {
      double s = 0;
      for (auto e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) s += alpha[e * 2 + h];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Gca, GammaZeroSelectSecondHalfIsIdentity) {
  GCAModule<float> m(4);
  std::mt19937_64 rng(4);
  m.init(rng);
  m.set_identity();
  auto x = random_tensor<float>({2, 4, 2, 3, 2}, 5);
  auto y = graph_cross_attention(x, build_grid_graph(2, 3, 2), m);
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.values(), x.values());
}

TEST(Gca, ShapeAndAttentionRows) {
  GCAModule<float> m(8);
  std::mt19937_64 rng(6);
  m.init(rng);
  m.gamma[0] = 0.5f;
  auto x = random_tensor<float>({2, 8, 4, 4, 4}, 7, -3.0f, 3.0f);
  GcaTrace<float> trace;
  auto y = graph_cross_attention(x, build_grid_graph(4, 4, 4), m, &trace);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(trace.attention.size(), 2u);
  for (const auto& a : trace.attention) {
    ASSERT_EQ(a.shape(), (Shape{64, 64}));
    for (int r = 0; r < 64; ++r) {
      double s = 0;
      for (int c = 0; c < 64; ++c) s += a[r * 64 + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Gca, TwoNodeHandOracle) {
  GCAModule<double> m(1, GcaOptions{.scaled = true});
  m.q_layer = scalar_layer(0.8, -0.3, 1.5);
  m.k_layer = scalar_layer(-0.6, 0.4, 0.7);
  m.v_layer = scalar_layer(1.2, 0.5, -0.9);
  m.gamma[0] = 0.7;
  m.merge_weight[0] = 0.3;
  m.merge_weight[1] = 0.6;
  m.merge_bias[0] = 0.1;
  Tensor<double> x({1, 1, 2, 1, 1}, {0.5, -1.0});
  auto y = graph_cross_attention(x, build_grid_graph(2, 1, 1), m);
  // Frozen from tests/oracles/gca_hand_oracle.py.
  EXPECT_NEAR(y[0], 0.42728008083471025, 1e-12);
  EXPECT_NEAR(y[1], -0.9228281020206163, 1e-12);
}

TEST(Gca, PermutationConsistency) {
  GCAModule<double> m(3);
  std::mt19937_64 rng(8);
  m.init(rng);
  m.gamma[0] = 0.9;
  auto edges = build_grid_graph(2, 2, 2);
  auto nodes = random_tensor<double>({8, 3}, 9, -2.0, 2.0);
  auto base = gca_nodes(nodes, std::make_shared<const InNeighbourhoods>(in_neighbourhoods(edges, true)), m);
  std::vector<int> perm(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> permuted({8, 3});
    for (int i = 0; i < 8; ++i)
      for (int c = 0; c < 3; ++c) permuted[perm[i] * 3 + c] = nodes[i * 3 + c];
    EdgeIndex pe;
    pe.node_count = 8;
    for (auto [s, t] : edges.pairs) pe.pairs.emplace_back(perm[s], perm[t]);
    auto out = gca_nodes(permuted, std::make_shared<const InNeighbourhoods>(in_neighbourhoods(pe, true)), m);
    for (int i = 0; i < 8; ++i)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(out[perm[i] * 3 + c], base[i * 3 + c], 1e-6);
  }
}

TEST(Gca, RejectsMismatchAndOversizedGrids) {
  GCAModule<float> m(2, GcaOptions{.dense_cap = 8});
  EXPECT_THROW(graph_cross_attention(Tensor<float>({1, 2, 2, 2, 2}), build_grid_graph(2, 2, 1), m), ShapeError);
  try {
    graph_cross_attention(Tensor<float>({1, 2, 3, 3, 3}), build_grid_graph(3, 3, 3), m);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("coarser stage"), std::string::npos);
  }
}

TEST(Gca, GradientMatchesFiniteDifferences) {
  GCAModule<double> m(2);
  std::mt19937_64 rng(10);
  m.init(rng);
  m.gamma[0] = 0.6;
  auto edges = build_grid_graph(2, 2, 2);
  auto x = random_tensor<double>({1, 2, 2, 2, 2}, 11, -1.5, 1.5);
  auto w = random_tensor<double>({1, 2, 2, 2, 2}, 12);
  ParameterList<double> params;
  m.collect(params, "gca.0");
  std::vector<Tensor<double>> leaves{x};
  for (auto& p : params) leaves.push_back(p.value);
  auto r = finite_diff_check([&] { return sum(mul(graph_cross_attention(x, edges, m), w)); }, leaves);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_GT(r.checked, 40);
}

TEST(DenseAttention, MatchesUnfusedCompositionAcrossBlocks) {
  // 600 rows forces several row blocks including a ragged last one.
  auto q = random_tensor<double>({600, 3}, 20, -2.0, 2.0), k = random_tensor<double>({600, 3}, 21, -2.0, 2.0);
  auto v = random_tensor<double>({600, 2}, 22);
  auto w = random_tensor<double>({600, 2}, 23);
  for (auto* t : {&q, &k, &v}) t->set_requires_grad(true);
  const double s = 0.37;
  std::vector<double> attn;
  auto fused = dense_attention(q, k, v, s, &attn);
  sum(mul(fused, w)).backward();
  std::vector<std::vector<double>> g_fused{q.grad_tensor().values(), k.grad_tensor().values(), v.grad_tensor().values()};
  for (auto* t : {&q, &k, &v}) t->zero_grad();
  auto a = softmax(scale(matmul_bt(q, k), s), 1);
  auto plain = matmul(a, v);
  sum(mul(plain, w)).backward();
  EXPECT_LT(gcaseg::testing::max_rel_diff(fused.values(), plain.values()), 1e-12);
  EXPECT_LT(gcaseg::testing::max_rel_diff(attn, a.values()), 1e-12);
  EXPECT_LT(gcaseg::testing::max_rel_diff(g_fused[0], q.grad_tensor().values()), 1e-10);
  EXPECT_LT(gcaseg::testing::max_rel_diff(g_fused[1], k.grad_tensor().values()), 1e-10);
  EXPECT_LT(gcaseg::testing::max_rel_diff(g_fused[2], v.grad_tensor().values()), 1e-10);
}

TEST(DenseAttention, GradientMatchesFiniteDifferences) {
  auto q = random_tensor<double>({10, 3}, 24), k = random_tensor<double>({10, 3}, 25), v = random_tensor<double>({10, 4}, 26);
  auto w = random_tensor<double>({10, 4}, 27);
  auto r = finite_diff_check([&] { return sum(mul(dense_attention(q, k, v, 0.8), w)); }, {q, k, v});
  EXPECT_LT(r.max_relative_error, 1e-6);
}
