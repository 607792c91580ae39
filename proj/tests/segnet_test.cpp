#include <random>
#include <set>

#include <gtest/gtest.h>

#include "gcaseg/gradcheck.hpp"
#include "gcaseg/losses.hpp"
#include "gcaseg/segnet.hpp"
#include "test_util.hpp"

using namespace gcaseg;
using gcaseg::testing::random_tensor;

namespace {

NetworkConfig small_config(std::int64_t stages, std::int64_t width) {
  NetworkConfig cfg;
  cfg.n_stages = stages;
  cfg.base_width = width;
  return cfg;
}

std::vector<LabelVolume> random_labels(std::int64_t B, Extents e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LabelVolume> out;
  for (std::int64_t b = 0; b < B; ++b) {
    LabelVolume l(e);
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 4);
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

TEST(SegNet, DefaultShapes) {
  SegmentationModel<float> model{NetworkConfig{}};
  model.init(1);
  auto out = model.forward(random_tensor<float>({1, 4, 32, 32, 32}, 2));
  EXPECT_EQ(out.logits.shape(), (Shape{1, 4, 32, 32, 32}));
  ASSERT_EQ(out.aux.size(), 2u);
  EXPECT_EQ(out.aux[0].shape(), (Shape{1, 4, 16, 16, 16}));
  EXPECT_EQ(out.aux[1].shape(), (Shape{1, 4, 8, 8, 8}));
}

TEST(SegNet, ShapeSweep) {
  for (std::int64_t stages : {2, 3})
    for (std::int64_t width : {8, 16})
      for (std::int64_t extent : {16, 32}) {
        SegmentationModel<float> model(small_config(stages, width));
        model.init(3);
        auto out = model.forward(random_tensor<float>({1, 4, extent, extent, extent}, 4));
        EXPECT_EQ(out.logits.shape(), (Shape{1, 4, extent, extent, extent}));
        ASSERT_EQ(static_cast<std::int64_t>(out.aux.size()), stages - 1);
        for (std::int64_t k = 1; k < stages; ++k) {
          const auto e = extent >> k;
          EXPECT_EQ(out.aux[static_cast<std::size_t>(k - 1)].shape(), (Shape{1, 4, e, e, e}));
        }
      }
}

TEST(SegNet, ZeroWeightsGiveUniformPosterior) {
  SegmentationModel<float> model{NetworkConfig{}};
  for (auto& p : model.parameters()) std::fill(p.value.values().begin(), p.value.values().end(), 0.0f);
  auto out = model.forward(random_tensor<float>({1, 4, 16, 16, 16}, 5));
  for (float v : out.logits.values()) ASSERT_EQ(v, 0.0f);
  auto probs = softmax(out.logits, 1);
  for (float v : probs.values()) ASSERT_FLOAT_EQ(v, 0.25f);
  for (const auto& l : predict_labels(out.logits))
    for (auto v : l.data) ASSERT_EQ(v, 0);
}

TEST(SegNet, ParameterCountMatchesLayerOracle) {
  // Frozen from tests/oracles/param_count.py.
  EXPECT_EQ(SegmentationModel<float>(NetworkConfig{}).parameter_count(), 181838);
  NetworkConfig no_ds;
  no_ds.deep_sup = false;
  EXPECT_EQ(SegmentationModel<float>(no_ds).parameter_count(), 181446);
  NetworkConfig m;
  apply_mednext_size(m, "M");
  EXPECT_EQ(SegmentationModel<float>(m).parameter_count(), 1441230);
  EXPECT_EQ(SegmentationModel<float>(small_config(2, 8)).parameter_count(), 10009);
}

TEST(SegNet, ParameterNamesAreUniqueAndPrefixed) {
  SegmentationModel<float> model{NetworkConfig{}};
  std::set<std::string> names;
  bool saw_gca = false;
  for (const auto& p : model.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    saw_gca |= p.name == "gca.1.gamma";
  }
  EXPECT_TRUE(saw_gca);
  EXPECT_TRUE(names.count("gca.0.merge.weight"));
  EXPECT_TRUE(names.count("head.weight"));
  EXPECT_TRUE(names.count("aux.2.bias"));
}

TEST(SegNet, RejectsIndivisibleExtentsBeforeCompute) {
  SegmentationModel<float> model{NetworkConfig{}};
  const auto before = gca_invocations().load();
  EXPECT_THROW(model.forward(Tensor<float>({1, 4, 30, 32, 32})), ShapeError);
  EXPECT_THROW(model.forward(Tensor<float>({1, 3, 32, 32, 32})), ShapeError);
  EXPECT_EQ(gca_invocations().load(), before);
  NetworkConfig tmp;
  EXPECT_THROW(apply_mednext_size(tmp, "XL"), std::invalid_argument);
}

TEST(SegNet, ForwardIsDeterministic) {
  SegmentationModel<float> model(small_config(3, 8));
  model.init(6);
  for (auto& p : model.parameters())
    if (p.name.ends_with("gamma")) p.value[0] = 0.3f;
  auto x = random_tensor<float>({2, 4, 16, 16, 16}, 7);
  auto a = model.forward(x), b = model.forward(x);
  EXPECT_EQ(a.logits.values(), b.logits.values());
  EXPECT_EQ(a.aux[0].values(), b.aux[0].values());
}

TEST(SegNet, GcaRunsOnlyAtStagesWithinCap) {
  SegmentationModel<float> model{NetworkConfig{}};
  model.init(8);
  NoGradGuard ng;
  auto before = gca_invocations().load();
  model.forward(random_tensor<float>({1, 4, 32, 32, 32}, 9));
  EXPECT_EQ(gca_invocations().load() - before, 1);  // the 16^3 stage only
  before = gca_invocations().load();
  model.forward(random_tensor<float>({2, 4, 32, 32, 32}, 9));
  EXPECT_EQ(gca_invocations().load() - before, 2);
  before = gca_invocations().load();
  model.forward(random_tensor<float>({1, 4, 16, 16, 16}, 9));
  EXPECT_EQ(gca_invocations().load() - before, 2);  // 16^3 and 8^3
}

TEST(PredictLabels, ArgmaxTieAndScanOracle) {
  Tensor<float> l({1, 4, 1, 1, 2});
  l[3 * 2 + 0] = 5.0f;  // class 3 at voxel 0; voxel 1 all equal
  auto lab = predict_labels(l);
  EXPECT_EQ(lab[0][0], 3);
  EXPECT_EQ(lab[0][1], 0);

  auto r = random_tensor<float>({2, 4, 3, 4, 5}, 10);
  for (std::size_t i = 0; i < 10; ++i) r[static_cast<std::int64_t>(i) * 7 % r.numel()] = 0.5f;
  auto labs = predict_labels(r);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t s = 0; s < 60; ++s) {
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (r[(b * 4 + c) * 60 + s] > r[(b * 4 + best) * 60 + s]) best = c;
      EXPECT_EQ(labs[static_cast<std::size_t>(b)][s], best);
    }
}

TEST(SegNet, EndToEndGradientMatchesFiniteDifferences) {
  NetworkConfig cfg = small_config(2, 2);
  SegmentationModel<double> model(cfg);
  model.init(11);
  auto params = model.parameters();
  for (auto& p : params)
    if (p.name.ends_with("gamma")) p.value[0] = 0.5;
  auto x = random_tensor<double>({1, 4, 8, 8, 8}, 12);
  auto labels = random_labels(1, {8, 8, 8}, 13);
  std::vector<Tensor<double>> leaves;
  for (auto& p : params) leaves.push_back(p.value);
  auto r = finite_diff_check([&] { return combined_loss(model.forward(x), labels); }, leaves);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_GT(r.checked, 500);
}
