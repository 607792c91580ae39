#pragma once

#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "conv.hpp"
#include "gradcheck.hpp"
#include "graph.hpp"
#include "losses.hpp"
#include "ops.hpp"
#include "segnet.hpp"

namespace gcaseg {

// Named finite-difference checks, run in double precision. Shared by the
// `gradcheck` command and the acceptance binary.
struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

namespace gradsuite {

inline Tensor<double> rnd(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline std::vector<LabelVolume> rnd_labels(std::int64_t B, Extents e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LabelVolume> out;
  for (std::int64_t b = 0; b < B; ++b) {
    LabelVolume l(e);
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 4);
    out.push_back(std::move(l));
  }
  return out;
}

using Unary = std::function<Tensor<double>(const Tensor<double>&)>;

inline std::vector<GradSuiteEntry> ops() {
  std::vector<GradSuiteEntry> out;
  auto run = [&](const std::string& name, const Unary& f, const Tensor<double>& x) {
    out.push_back({name, finite_diff_check(f, x)});
  };
  const auto x = rnd({2, 3, 4}, 50), y = rnd({2, 3, 4}, 51), pos = rnd({2, 3, 4}, 52, 0.5, 2.0);
  const auto w = rnd({2, 3, 4}, 53);
  auto wsum = [w](const Tensor<double>& t) { return sum(mul(t, w)); };

  run("add", [&](const Tensor<double>& t) { return wsum(add(t, y)); }, x);
  run("sub", [&](const Tensor<double>& t) { return wsum(sub(y, t)); }, x);
  run("mul", [&](const Tensor<double>& t) { return wsum(mul(t, t)); }, x);
  run("div.denominator", [&](const Tensor<double>& t) { return wsum(div(y, t)); }, pos);
  run("div.numerator", [&](const Tensor<double>& t) { return wsum(div(t, pos)); }, x);
  run("scale", [&](const Tensor<double>& t) { return wsum(scale(t, 3.0)); }, x);
  run("add_scalar", [&](const Tensor<double>& t) { return wsum(add_scalar(t, 3.0)); }, x);
  run("relu", [&](const Tensor<double>& t) { return wsum(relu(t)); }, x);
  run("leaky_relu", [&](const Tensor<double>& t) { return wsum(leaky_relu(t, 0.2)); }, x);
  for (int axis = 0; axis < 3; ++axis) {
    run("softmax.axis" + std::to_string(axis), [&, axis](const Tensor<double>& t) { return wsum(softmax(t, axis)); }, x);
    run("log_softmax.axis" + std::to_string(axis), [&, axis](const Tensor<double>& t) { return wsum(log_softmax(t, axis)); },
        x);
  }
  run("sum", [&](const Tensor<double>& t) { return sum(mul(t, t)); }, x);
  run("mean", [&](const Tensor<double>& t) { return mean(mul(t, t)); }, x);
  run("sum_dims", [&](const Tensor<double>& t) {
    auto r = sum_dims(mul(t, w), {0, 2});
    return sum(mul(r, r));
  }, x);
  const auto s = Tensor<double>({1}, std::vector<double>{0.7});
  run("scale_by.factor", [&](const Tensor<double>& t) { return wsum(scale_by(y, t)); }, s);
  run("scale_by.input", [&](const Tensor<double>& t) { return wsum(scale_by(t, s)); }, x);
  const auto bias = rnd({4}, 63);
  run("add_bias.input", [&](const Tensor<double>& t) { return wsum(add_bias(t, bias)); }, x);
  run("add_bias.bias", [&](const Tensor<double>& t) { return wsum(add_bias(x, t)); }, bias);

  const auto m = rnd({2, 4, 3}, 54), wm = rnd({2, 3, 3}, 62);
  run("matmul.lhs", [&](const Tensor<double>& t) { return sum(mul(matmul(t, m), wm)); }, x);
  run("matmul.rhs", [&](const Tensor<double>& t) { return sum(mul(matmul(x, t), wm)); }, m);
  const auto mt = rnd({5, 4}, 55), w5 = rnd({2, 3, 5}, 56);
  run("matmul_bt.lhs", [&](const Tensor<double>& t) { return sum(mul(matmul_bt(t, mt), w5)); }, x);
  run("matmul_bt.rhs", [&](const Tensor<double>& t) { return sum(mul(matmul_bt(x, t), w5)); }, mt);
  const auto wt = rnd({2, 4, 3}, 57);
  run("transpose", [&](const Tensor<double>& t) { return sum(mul(transpose(t), wt)); }, x);
  const auto wr = rnd({6, 4}, 58);
  run("reshape", [&](const Tensor<double>& t) { return sum(mul(reshape(t, {6, 4}), wr)); }, x);
  const auto wc = rnd({2, 6, 4}, 59);
  run("concat", [&](const Tensor<double>& t) { return sum(mul(concat<double>({t, y}, 1), wc)); }, x);
  const auto wn = rnd({2, 2, 4}, 60);
  run("narrow", [&](const Tensor<double>& t) { return sum(mul(narrow(t, 1, 1, 2), wn)); }, x);
  const std::vector<std::int32_t> idx{0, 1, 2, 0, 2, 2, 1, 0};
  run("take_along_channels", [&](const Tensor<double>& t) {
    auto p = take_along_channels(t, idx);
    return sum(mul(p, p));
  }, rnd({2, 3, 2, 2}, 61));

  // convolutions
  const auto cx = rnd({2, 2, 5, 4, 6}, 70), cw = rnd({3, 2, 3, 3, 3}, 71), cb = rnd({3}, 72);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
    const auto wy = rnd(conv3d(cx, cw, cb, stride, pad).shape(), 73);
    const auto tag = "conv3d.s" + std::to_string(stride) + "p" + std::to_string(pad);
    run(tag + ".input", [&](const Tensor<double>& t) { return sum(mul(conv3d(t, cw, cb, stride, pad), wy)); }, cx);
    run(tag + ".weight", [&](const Tensor<double>& t) { return sum(mul(conv3d(cx, t, cb, stride, pad), wy)); }, cw);
    run(tag + ".bias", [&](const Tensor<double>& t) { return sum(mul(conv3d(cx, cw, t, stride, pad), wy)); }, cb);
  }
  // more input than output channels
  const auto nx = rnd({1, 3, 4, 5, 3}, 74), nw = rnd({2, 3, 3, 3, 3}, 75);
  for (int pad : {1, 0}) {
    const auto wy = rnd(conv3d(nx, nw, 1, pad).shape(), 76);
    const auto tag = "conv3d.narrow.p" + std::to_string(pad);
    run(tag + ".input", [&](const Tensor<double>& t) { return sum(mul(conv3d(t, nw, 1, pad), wy)); }, nx);
    run(tag + ".weight", [&](const Tensor<double>& t) { return sum(mul(conv3d(nx, t, 1, pad), wy)); }, nw);
  }
  const auto tx = rnd({2, 3, 2, 3, 2}, 77), tw = rnd({3, 2, 2, 2, 2}, 78), tb = rnd({2}, 79);
  const auto twy = rnd({2, 2, 4, 6, 4}, 80);
  run("conv3d_transpose.input", [&](const Tensor<double>& t) { return sum(mul(conv3d_transpose(t, tw, tb), twy)); }, tx);
  run("conv3d_transpose.weight", [&](const Tensor<double>& t) { return sum(mul(conv3d_transpose(tx, t, tb), twy)); }, tw);
  run("conv3d_transpose.bias", [&](const Tensor<double>& t) { return sum(mul(conv3d_transpose(tx, tw, t), twy)); }, tb);

  // losses
  const auto logits = rnd({2, 4, 2, 2, 2}, 13, -2.0, 2.0), aux = rnd({2, 4, 1, 1, 1}, 14);
  const auto labels = rnd_labels(2, {2, 2, 2}, 15);
  run("cross_entropy", [&](const Tensor<double>& t) { return cross_entropy(t, labels); }, logits);
  run("soft_dice_loss", [&](const Tensor<double>& t) { return soft_dice_loss(softmax(t, 1), one_hot<double>(labels, 4)); },
      logits);
  for (bool mb : {true, false}) {
    LossConfig cfg;
    cfg.mean_batch = mb;
    auto a = aux.clone(), l = logits.clone();
    out.push_back({std::string("combined_loss.mean_batch_") + (mb ? "on" : "off"),
                   finite_diff_check([&] { return combined_loss(l, {a}, labels, cfg); }, {l, a})});
  }
  return out;
}

inline std::vector<GradSuiteEntry> gca() {
  std::vector<GradSuiteEntry> out;
  const auto edges = build_grid_graph(2, 2, 2);
  {
    GraphAttentionLayer<double> layer(3, 2, 1);
    std::mt19937_64 rng(30);
    layer.init(rng);
    auto f = rnd({8, 3}, 31), w = rnd({8, 2}, 32);
    out.push_back({"gatv2_attend", finite_diff_check([&] { return sum(mul(gatv2_attend(f, edges, layer), w)); },
                                                     {f, layer.w_src, layer.w_dst, layer.att})});
  }
  {
    auto q = rnd({8, 3}, 24), k = rnd({8, 3}, 25), v = rnd({8, 4}, 26), w = rnd({8, 4}, 27);
    out.push_back({"dense_attention", finite_diff_check([&] { return sum(mul(dense_attention(q, k, v, 0.8), w)); }, {q, k, v})});
  }
  for (std::int64_t heads : {1, 2}) {
    GcaOptions opts;
    opts.heads = heads;
    GCAModule<double> m(2, opts);
    std::mt19937_64 rng(10);
    m.init(rng);
    m.gamma[0] = 0.6;
    auto x = rnd({1, 2, 2, 2, 2}, 11, -1.5, 1.5), w = rnd({1, 2, 2, 2, 2}, 12);
    ParameterList<double> params;
    m.collect(params, "gca");
    std::vector<Tensor<double>> leaves{x};
    for (auto& p : params) leaves.push_back(p.value);
    out.push_back({"graph_cross_attention.heads" + std::to_string(heads),
                   finite_diff_check([&] { return sum(mul(graph_cross_attention(x, edges, m), w)); }, leaves)});
  }
  return out;
}

// Whole network on an 8^3 input: every parameter and the input.
inline std::vector<GradSuiteEntry> end2end() {
  NetworkConfig cfg;
  cfg.n_stages = 2;
  cfg.base_width = 2;
  SegmentationModel<double> model(cfg);
  model.init(11);
  auto params = model.parameters();
  for (auto& p : params)
    if (p.name.ends_with("gamma")) p.value[0] = 0.5;
  auto x = rnd({1, 4, 8, 8, 8}, 12);
  const auto labels = rnd_labels(1, {8, 8, 8}, 13);
  std::vector<Tensor<double>> leaves{x};
  for (auto& p : params) leaves.push_back(p.value);
  return {{"segnet.8cubed", finite_diff_check([&] { return combined_loss(model.forward(x), labels); }, leaves)}};
}

}  // namespace gradsuite

inline std::vector<GradSuiteEntry> run_gradcheck_suite(const std::string& scope) {
  if (scope == "ops") return gradsuite::ops();
  if (scope == "gca") return gradsuite::gca();
  if (scope == "end2end") return gradsuite::end2end();
  throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (expected ops, gca or end2end)");
}

}  // namespace gcaseg
