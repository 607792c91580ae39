#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "conv.hpp"
#include "graph.hpp"
#include "init.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace gcaseg {

// GATv2-style neighbourhood aggregation on pre-projected features.
//   src_proj, dst_proj: [N, heads*F]  (W_src·h, W_dst·h)
//   att:               [heads, F]
// For target i and each j in its in-neighbourhood (self loop first):
//   e_ij = att · leaky_relu(src_proj_j + dst_proj_i)
//   α_ij = softmax_j(e_ij),  out_i = Σ_j α_ij src_proj_j
// Optionally records α per (edge, head) in `alpha_out`.
template <class T>
Tensor<T> gatv2_aggregate(const Tensor<T>& src_proj, const Tensor<T>& dst_proj, const Tensor<T>& att,
                          std::shared_ptr<const InNeighbourhoods> nb, T negative_slope,
                          std::vector<T>* alpha_out = nullptr) {
  const char* op = "gatv2_aggregate";
  check_shape(src_proj.ndim() == 2 && src_proj.shape() == dst_proj.shape(), op, "projections must be equal [N, heads*F]");
  check_shape(att.ndim() == 2, op, "attention vector must be [heads, F]");
  const auto N = src_proj.dim(0), heads = att.dim(0), F = att.dim(1);
  check_shape(src_proj.dim(1) == heads * F, op, "projection width must equal heads*F");
  check_shape(static_cast<std::int64_t>(nb->offsets.size()) == N + 1, op, "node count mismatch with graph");
  const auto width = heads * F;
  const auto E = static_cast<std::int64_t>(nb->sources.size());

  const T* hs = src_proj.data().data();
  const T* hd = dst_proj.data().data();
  const T* a = att.data().data();
  // Pre-activations per (edge, channel) and attention per (edge, head).
  auto pre = std::make_shared<std::vector<T>>(static_cast<std::size_t>(E * width));
  auto alpha = std::make_shared<std::vector<T>>(static_cast<std::size_t>(E * heads));
  std::vector<T> out(static_cast<std::size_t>(N * width), T(0));
  std::vector<T> score;
  for (std::int64_t i = 0; i < N; ++i) {
    const auto e0 = nb->offsets[static_cast<std::size_t>(i)], e1 = nb->offsets[static_cast<std::size_t>(i) + 1];
    if (e0 == e1)
      throw std::invalid_argument("gatv2_attend: node " + std::to_string(i) +
                                  " has an empty neighbourhood and self loops are disabled");
    for (auto e = e0; e < e1; ++e) {
      const auto j = nb->sources[static_cast<std::size_t>(e)];
      T* z = pre->data() + e * width;
      for (std::int64_t c = 0; c < width; ++c) z[c] = hs[j * width + c] + hd[i * width + c];
    }
    if (detail::kink_monitor.active)
      detail::kink_monitor.observe(std::span<const T>(pre->data() + e0 * width, static_cast<std::size_t>((e1 - e0) * width)));
    score.assign(static_cast<std::size_t>(e1 - e0), T(0));
    for (std::int64_t h = 0; h < heads; ++h) {
      T m = -std::numeric_limits<T>::infinity();
      for (auto e = e0; e < e1; ++e) {
        const T* z = pre->data() + e * width + h * F;
        T s = 0;
        for (std::int64_t f = 0; f < F; ++f) s += a[h * F + f] * (z[f] > T(0) ? z[f] : negative_slope * z[f]);
        score[static_cast<std::size_t>(e - e0)] = s;
        m = std::max(m, s);
      }
      T zsum = 0;
      for (auto e = e0; e < e1; ++e) zsum += (score[static_cast<std::size_t>(e - e0)] = std::exp(score[static_cast<std::size_t>(e - e0)] - m));
      for (auto e = e0; e < e1; ++e) {
        const T al = score[static_cast<std::size_t>(e - e0)] / zsum;
        (*alpha)[static_cast<std::size_t>(e * heads + h)] = al;
        const auto j = nb->sources[static_cast<std::size_t>(e)];
        for (std::int64_t f = 0; f < F; ++f) out[static_cast<std::size_t>(i * width + h * F + f)] += al * hs[j * width + h * F + f];
      }
    }
  }
  if (alpha_out) *alpha_out = *alpha;

  auto si = src_proj.impl(), di = dst_proj.impl(), ai = att.impl();
  return make_result<T>(
      {N, width}, std::move(out), {&src_proj, &dst_proj, &att},
      [si, di, ai, nb, pre, alpha, N, heads, F, width, negative_slope](TensorImpl<T>& self) {
        const T* hs = si->value.data();
        const T* a = ai->value.data();
        T* ghs = si->requires_grad ? si->ensure_grad().data() : nullptr;
        T* ghd = di->requires_grad ? di->ensure_grad().data() : nullptr;
        T* ga = ai->requires_grad ? ai->ensure_grad().data() : nullptr;
        std::vector<T> dalpha;
        for (std::int64_t i = 0; i < N; ++i) {
          const auto e0 = nb->offsets[static_cast<std::size_t>(i)], e1 = nb->offsets[static_cast<std::size_t>(i) + 1];
          const T* go = self.grad.data() + i * width;
          dalpha.assign(static_cast<std::size_t>(e1 - e0), T(0));
          for (std::int64_t h = 0; h < heads; ++h) {
            T weighted = 0;
            for (auto e = e0; e < e1; ++e) {
              const auto j = nb->sources[static_cast<std::size_t>(e)];
              const T al = (*alpha)[static_cast<std::size_t>(e * heads + h)];
              T d = 0;
              for (std::int64_t f = 0; f < F; ++f) {
                d += go[h * F + f] * hs[j * width + h * F + f];
                if (ghs) ghs[j * width + h * F + f] += al * go[h * F + f];
              }
              dalpha[static_cast<std::size_t>(e - e0)] = d;
              weighted += al * d;
            }
            for (auto e = e0; e < e1; ++e) {
              const auto j = nb->sources[static_cast<std::size_t>(e)];
              const T al = (*alpha)[static_cast<std::size_t>(e * heads + h)];
              const T ds = al * (dalpha[static_cast<std::size_t>(e - e0)] - weighted);
              const T* z = pre->data() + e * width + h * F;
              for (std::int64_t f = 0; f < F; ++f) {
                const bool pos = z[f] > T(0);
                if (ga) ga[h * F + f] += ds * (pos ? z[f] : negative_slope * z[f]);
                const T dpre = ds * a[h * F + f] * (pos ? T(1) : negative_slope);
                if (ghs) ghs[j * width + h * F + f] += dpre;
                if (ghd) ghd[i * width + h * F + f] += dpre;
              }
            }
          }
        }
      });
}

template <class T>
struct GraphAttentionLayer {
  Tensor<T> w_src;  // [heads*F_out, F_in]
  Tensor<T> w_dst;  // [heads*F_out, F_in]
  Tensor<T> att;    // [heads, F_out]
  std::int64_t heads = 1;
  T negative_slope = T(0.2);
  bool self_loops = true;

  GraphAttentionLayer() = default;
  GraphAttentionLayer(std::int64_t in_features, std::int64_t out_features, std::int64_t n_heads = 1)
      : w_src(make_parameter<T>({n_heads * out_features, in_features})),
        w_dst(make_parameter<T>({n_heads * out_features, in_features})),
        att(make_parameter<T>({n_heads, out_features})),
        heads(n_heads) {}

  std::int64_t in_features() const { return w_src.dim(1); }
  std::int64_t out_width() const { return w_src.dim(0); }

  void init(std::mt19937_64& rng) {
    init_uniform_fan_in(w_src, in_features(), rng);
    init_uniform_fan_in(w_dst, in_features(), rng);
    init_uniform_fan_in(att, att.dim(1), rng);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_src", w_src});
    out.push_back({prefix + ".w_dst", w_dst});
    out.push_back({prefix + ".att", att});
  }
};

// feats [N, F_in] -> [N, heads*F_out].
template <class T>
Tensor<T> gatv2_attend(const Tensor<T>& feats, const std::shared_ptr<const InNeighbourhoods>& nb,
                       const GraphAttentionLayer<T>& layer, std::vector<T>* alpha_out = nullptr) {
  check_shape(feats.ndim() == 2 && feats.dim(1) == layer.in_features(), "gatv2_attend",
              "features " + to_string(feats.shape()) + " do not match layer input width " +
                  std::to_string(layer.in_features()));
  auto src = matmul_bt(feats, layer.w_src);
  auto dst = matmul_bt(feats, layer.w_dst);
  return gatv2_aggregate(src, dst, layer.att, nb, layer.negative_slope, alpha_out);
}

template <class T>
Tensor<T> gatv2_attend(const Tensor<T>& feats, const EdgeIndex& edges, const GraphAttentionLayer<T>& layer,
                       std::vector<T>* alpha_out = nullptr) {
  check_shape(feats.ndim() == 2 && feats.dim(0) == edges.node_count, "gatv2_attend",
              "feature rows must equal the graph node count");
  auto nb = std::make_shared<const InNeighbourhoods>(in_neighbourhoods(edges, layer.self_loops));
  return gatv2_attend(feats, nb, layer, alpha_out);
}

// softmax_rows(scale · Q Kᵀ) · V without materialising the N x N matrix.
// Rows are processed in blocks that stay cache resident; backward recomputes
// each block from the saved row log-sum-exp. `attention_out`, when given,
// receives the full row-stochastic matrix.
template <class T>
Tensor<T> dense_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale,
                          std::vector<T>* attention_out = nullptr) {
  const char* op = "dense_attention";
  check_shape(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, op, "operands must be matrices");
  check_shape(q.shape() == k.shape() && v.dim(0) == q.dim(0), op, "Q, K must be [N, d] and V [N, dv]");
  const auto N = q.dim(0), dk = q.dim(1), dv = v.dim(1);
  using Mat = detail::RowMat<T>;
  const auto block = std::clamp<std::int64_t>((std::int64_t{1} << 19) / std::max<std::int64_t>(1, N), 8, 256);

  detail::ConstMatMap<T> Q(q.data().data(), N, dk), K(k.data().data(), N, dk), V(v.data().data(), N, dv);
  std::vector<T> out(static_cast<std::size_t>(N * dv));
  detail::MatMap<T> O(out.data(), N, dv);
  auto lse = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N));
  if (attention_out) attention_out->resize(static_cast<std::size_t>(N * N));
  Mat E(block, N);
  for (std::int64_t r0 = 0; r0 < N; r0 += block) {
    const auto nb = std::min(block, N - r0);
    auto Eb = E.topRows(nb);
    Eb.noalias() = Q.middleRows(r0, nb) * K.transpose();
    for (std::int64_t i = 0; i < nb; ++i) {
      auto row = Eb.row(i).array();
      row *= scale;
      const T m = row.maxCoeff();
      row = (row - m).exp();
      const T z = row.sum();
      row /= z;
      (*lse)[static_cast<std::size_t>(r0 + i)] = m + std::log(z);
    }
    O.middleRows(r0, nb).noalias() = Eb * V;
    if (attention_out) std::copy(Eb.data(), Eb.data() + nb * N, attention_out->data() + r0 * N);
  }

  auto qi = q.impl(), ki = k.impl(), vi = v.impl();
  return make_result<T>({N, dv}, std::move(out), {&q, &k, &v},
                        [qi, ki, vi, lse, N, dk, dv, block, scale](TensorImpl<T>& self) {
    detail::ConstMatMap<T> Q(qi->value.data(), N, dk), K(ki->value.data(), N, dk), V(vi->value.data(), N, dv);
    detail::ConstMatMap<T> dO(self.grad.data(), N, dv);
    Mat gQ = Mat::Zero(N, dk), gK = Mat::Zero(N, dk), gV = Mat::Zero(N, dv);
    Mat A(block, N), dA(block, N);
    for (std::int64_t r0 = 0; r0 < N; r0 += block) {
      const auto nb = std::min(block, N - r0);
      auto Ab = A.topRows(nb);
      auto dAb = dA.topRows(nb);
      Ab.noalias() = Q.middleRows(r0, nb) * K.transpose();
      for (std::int64_t i = 0; i < nb; ++i)
        Ab.row(i).array() = (Ab.row(i).array() * scale - (*lse)[static_cast<std::size_t>(r0 + i)]).exp();
      dAb.noalias() = dO.middleRows(r0, nb) * V.transpose();
      gV.noalias() += Ab.transpose() * dO.middleRows(r0, nb);
      for (std::int64_t i = 0; i < nb; ++i) {
        const T dot = (dAb.row(i).array() * Ab.row(i).array()).sum();
        dAb.row(i).array() = Ab.row(i).array() * (dAb.row(i).array() - dot) * scale;
      }
      gQ.middleRows(r0, nb).noalias() = dAb * K;
      gK.noalias() += dAb.transpose() * Q.middleRows(r0, nb);
    }
    auto acc = [](TensorImpl<T>& t, const Mat& g) {
      if (!t.requires_grad) return;
      auto& dst = t.ensure_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data()[i];
    };
    acc(*qi, gQ);
    acc(*ki, gK);
    acc(*vi, gV);
  });
}

struct GcaOptions {
  bool scaled = true;                 // 1/sqrt(d_k) on the energy
  std::int64_t dense_cap = 4096;      // maximum node count for dense N x N attention
  std::int64_t heads = 1;
};

// Counts executions of graph cross attention (all instances, all threads).
inline std::atomic<std::int64_t>& gca_invocations() {
  static std::atomic<std::int64_t> counter{0};
  return counter;
}

template <class T>
struct GcaTrace {
  std::vector<Tensor<T>> attention;  // per batch item, [N, N], detached
};

template <class T>
struct GCAModule {
  GraphAttentionLayer<T> q_layer, k_layer, v_layer;
  Tensor<T> gamma;         // [1]
  Tensor<T> merge_weight;  // [C, 2C, 1, 1, 1]
  Tensor<T> merge_bias;    // [C]
  GcaOptions options;

  GCAModule() = default;
  explicit GCAModule(std::int64_t channels, GcaOptions opts = {})
      : q_layer(channels, channels / opts.heads, opts.heads),
        k_layer(channels, channels / opts.heads, opts.heads),
        v_layer(channels, channels / opts.heads, opts.heads),
        gamma(make_parameter<T>({1})),
        merge_weight(make_parameter<T>({channels, 2 * channels, 1, 1, 1})),
        merge_bias(make_parameter<T>({channels})),
        options(opts) {
    if (opts.heads < 1 || channels % opts.heads != 0)
      throw std::invalid_argument("GCAModule: channel count must be divisible by the head count");
  }

  std::int64_t channels() const { return merge_bias.dim(0); }

  // gamma starts at zero.
  void init(std::mt19937_64& rng) {
    q_layer.init(rng);
    k_layer.init(rng);
    v_layer.init(rng);
    gamma.values()[0] = T(0);
    init_uniform_fan_in(merge_weight, 2 * channels(), rng);
    init_uniform_fan_in(merge_bias, 2 * channels(), rng);
  }

  // gamma = 0 and a merge that copies the second concatenated half.
  void set_identity() {
    gamma.values()[0] = T(0);
    std::fill(merge_weight.values().begin(), merge_weight.values().end(), T(0));
    std::fill(merge_bias.values().begin(), merge_bias.values().end(), T(0));
    const auto c = channels();
    for (std::int64_t o = 0; o < c; ++o) merge_weight[o * 2 * c + c + o] = T(1);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    q_layer.collect(out, prefix + ".q");
    k_layer.collect(out, prefix + ".k");
    v_layer.collect(out, prefix + ".v");
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".merge.weight", merge_weight});
    out.push_back({prefix + ".merge.bias", merge_bias});
  }
};

// Node-level block: Y [N, C] -> [N, C].
//   Q, K, V = GATv2(Y);  A = softmax_rows(Q Kᵀ · s);  O = A V
//   result  = merge([γ O + Y ; Y])
template <class T>
Tensor<T> gca_nodes(const Tensor<T>& nodes, const std::shared_ptr<const InNeighbourhoods>& nb,
                    const GCAModule<T>& m, GcaTrace<T>* trace = nullptr) {
  const auto N = nodes.dim(0), C = nodes.dim(1);
  check_shape(C == m.channels(), "graph_cross_attention", "channel count does not match module");
  if (N > m.options.dense_cap)
    throw std::invalid_argument("graph_cross_attention: " + std::to_string(N) + " nodes exceed the dense attention cap of " +
                                std::to_string(m.options.dense_cap) +
                                "; apply the block at a coarser stage or raise gca_dense_cap");
  auto q = gatv2_attend(nodes, nb, m.q_layer);
  auto k = gatv2_attend(nodes, nb, m.k_layer);
  auto v = gatv2_attend(nodes, nb, m.v_layer);
  const T s = m.options.scaled ? T(1) / std::sqrt(static_cast<T>(q.dim(1))) : T(1);
  std::vector<T> attention;
  auto output = dense_attention(q, k, v, s, trace ? &attention : nullptr);
  if (trace) trace->attention.emplace_back(Shape{N, N}, std::move(attention));
  auto enhanced = add(scale_by(output, m.gamma), nodes);
  auto merged = matmul_bt(concat<T>({enhanced, nodes}, 1), reshape(m.merge_weight, {C, 2 * C}));
  gca_invocations().fetch_add(1, std::memory_order_relaxed);
  return add_bias(merged, m.merge_bias);
}

template <class T>
Tensor<T> graph_cross_attention(const Tensor<T>& x, const EdgeIndex& edges, const GCAModule<T>& m,
                                GcaTrace<T>* trace = nullptr) {
  check_shape(x.ndim() == 5, "graph_cross_attention", "input must be [B,C,D,H,W]");
  const auto B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3) * x.dim(4);
  if (N != edges.node_count)
    throw ShapeError("graph_cross_attention: grid has " + std::to_string(N) + " voxels but graph has " +
                     std::to_string(edges.node_count) + " nodes");
  if (N > m.options.dense_cap)
    throw std::invalid_argument("graph_cross_attention: " + std::to_string(N) + " nodes exceed the dense attention cap of " +
                                std::to_string(m.options.dense_cap) +
                                "; apply the block at a coarser stage or raise gca_dense_cap");
  auto nb = std::make_shared<const InNeighbourhoods>(in_neighbourhoods(edges, m.q_layer.self_loops));
  std::vector<Tensor<T>> items;
  for (std::int64_t b = 0; b < B; ++b) {
    auto nodes = transpose(reshape(narrow(x, 0, b, 1), {C, N}));
    auto out = gca_nodes(nodes, nb, m, trace);
    items.push_back(reshape(transpose(out), {1, C, x.dim(2), x.dim(3), x.dim(4)}));
  }
  return B == 1 ? items[0] : concat(items, 0);
}

}  // namespace gcaseg
