#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "conv.hpp"
#include "graph.hpp"
#include "init.hpp"
#include "ops.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace gcaseg {

struct NetworkConfig {
  std::int64_t in_channels = 4;
  std::int64_t n_classes = 4;
  std::int64_t base_width = 16;
  std::int64_t n_stages = 3;
  std::int64_t kernel_size = 3;
  std::int64_t blocks_per_stage = 1;
  bool deep_sup = true;
  std::int64_t gca_dense_cap = 4096;
  bool gca_scaled = true;
  std::int64_t gca_heads = 1;

  std::int64_t width(std::int64_t stage) const { return base_width << stage; }
  std::int64_t divisor() const { return std::int64_t{1} << (n_stages - 1); }
};

// Size letters: S=(8,1), B=(16,1), M=(32,2) as (base_width, blocks_per_stage).
inline void apply_mednext_size(NetworkConfig& cfg, const std::string& size) {
  if (size == "S") {
    cfg.base_width = 8, cfg.blocks_per_stage = 1;
  } else if (size == "B") {
    cfg.base_width = 16, cfg.blocks_per_stage = 1;
  } else if (size == "M") {
    cfg.base_width = 32, cfg.blocks_per_stage = 2;
  } else {
    throw std::invalid_argument("mednext_size must be one of S, B, M (got '" + size + "')");
  }
}

template <class T>
struct ConvLayer {
  Tensor<T> weight;  // [Cout, Cin, k, k, k]
  Tensor<T> bias;    // [Cout]
  std::int64_t stride = 1, pad = 0;

  ConvLayer() = default;
  ConvLayer(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_, std::int64_t pad_)
      : weight(make_parameter<T>({cout, cin, k, k, k})), bias(make_parameter<T>({cout})), stride(stride_), pad(pad_) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias, stride, pad); }

  void init(std::mt19937_64& rng) {
    const auto fan_in = weight.numel() / weight.dim(0);
    init_uniform_fan_in(weight, fan_in, rng);
    init_uniform_fan_in(bias, fan_in, rng);
  }
  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct UpLayer {
  Tensor<T> weight;  // [Cin, Cout, 2, 2, 2]
  Tensor<T> bias;

  UpLayer() = default;
  UpLayer(std::int64_t cin, std::int64_t cout)
      : weight(make_parameter<T>({cin, cout, 2, 2, 2})), bias(make_parameter<T>({cout})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d_transpose(x, weight, bias, 2); }

  // Each output voxel sees exactly one kernel tap per input channel.
  void init(std::mt19937_64& rng) {
    init_uniform_fan_in(weight, weight.dim(0), rng);
    init_uniform_fan_in(bias, weight.dim(0), rng);
  }
  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct SegOutput {
  Tensor<T> logits;            // [B, n_classes, D, H, W]
  std::vector<Tensor<T>> aux;  // aux[k-1] at extents / 2^k
};

// Encoder: per stage (conv -> relu) x blocks, skip taken, then a k=2 stride-2
// conv downsample. Decoder: transpose-conv upsample, concat skip, conv, then
// graph cross attention when the stage is small enough for dense attention.
template <class T>
class SegmentationModel {
 public:
  SegmentationModel() = default;
  explicit SegmentationModel(const NetworkConfig& cfg) : cfg_(cfg) {
    if (cfg.n_stages < 2) throw std::invalid_argument("n_stages must be >= 2");
    if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0) throw std::invalid_argument("kernel_size must be odd");
    if (cfg.blocks_per_stage < 1) throw std::invalid_argument("blocks_per_stage must be >= 1");
    const auto S = cfg.n_stages, k = cfg.kernel_size, p = k / 2;
    for (std::int64_t s = 0; s + 1 < S; ++s) {
      Stage st;
      for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b)
        st.convs.emplace_back(b == 0 ? (s == 0 ? cfg.in_channels : cfg.width(s - 1)) : cfg.width(s), cfg.width(s), k, 1, p);
      st.down = ConvLayer<T>(cfg.width(s), cfg.width(s), 2, 2, 0);
      encoder_.push_back(std::move(st));
    }
    for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b)
      bottleneck_.emplace_back(b == 0 ? cfg.width(S - 2) : cfg.width(S - 1), cfg.width(S - 1), k, 1, p);
    for (std::int64_t s = 0; s + 1 < S; ++s) {
      DecoderStage st;
      st.up = UpLayer<T>(cfg.width(s + 1), cfg.width(s));
      for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b)
        st.convs.emplace_back(b == 0 ? 2 * cfg.width(s) : cfg.width(s), cfg.width(s), k, 1, p);
      st.gca = GCAModule<T>(cfg.width(s), GcaOptions{cfg.gca_scaled, cfg.gca_dense_cap, cfg.gca_heads});
      decoder_.push_back(std::move(st));
    }
    head_ = ConvLayer<T>(cfg.width(0), cfg.n_classes, 1, 1, 0);
    if (cfg.deep_sup)
      for (std::int64_t r = 1; r < S; ++r) aux_.emplace_back(cfg.width(r), cfg.n_classes, 1, 1, 0);
  }

  const NetworkConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& st : encoder_) {
      for (auto& c : st.convs) c.init(rng);
      st.down.init(rng);
    }
    for (auto& c : bottleneck_) c.init(rng);
    for (auto& st : decoder_) {
      st.up.init(rng);
      for (auto& c : st.convs) c.init(rng);
      st.gca.init(rng);
    }
    head_.init(rng);
    for (auto& a : aux_) a.init(rng);
  }

  // Stable, checkpoint-facing order and names.
  ParameterList<T> parameters() const {
    ParameterList<T> out;
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
      const auto pre = "enc." + std::to_string(s);
      for (std::size_t b = 0; b < encoder_[s].convs.size(); ++b) encoder_[s].convs[b].collect(out, pre + ".conv" + std::to_string(b));
      encoder_[s].down.collect(out, pre + ".down");
    }
    for (std::size_t b = 0; b < bottleneck_.size(); ++b) bottleneck_[b].collect(out, "bottleneck.conv" + std::to_string(b));
    for (std::size_t s = 0; s < decoder_.size(); ++s) {
      const auto pre = "dec." + std::to_string(s);
      decoder_[s].up.collect(out, pre + ".up");
      for (std::size_t b = 0; b < decoder_[s].convs.size(); ++b) decoder_[s].convs[b].collect(out, pre + ".conv" + std::to_string(b));
      decoder_[s].gca.collect(out, "gca." + std::to_string(s));
    }
    head_.collect(out, "head");
    for (std::size_t a = 0; a < aux_.size(); ++a) aux_[a].collect(out, "aux." + std::to_string(a + 1));
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.value.numel();
    return n;
  }

  bool gca_eligible(std::int64_t voxels) const { return voxels <= cfg_.gca_dense_cap; }

  void check_input(const Tensor<T>& x) const {
    check_shape(x.ndim() == 5, "SegmentationModel", "input must be [B,C,D,H,W], got " + to_string(x.shape()));
    check_shape(x.dim(1) == cfg_.in_channels, "SegmentationModel",
                "expected " + std::to_string(cfg_.in_channels) + " input channels, got " + std::to_string(x.dim(1)));
    const auto div = cfg_.divisor();
    for (int a = 2; a < 5; ++a)
      if (x.dim(a) < div || x.dim(a) % div != 0)
        throw ShapeError("SegmentationModel: spatial extents " + to_string(x.shape()) + " must be positive multiples of " +
                         std::to_string(div) + " for " + std::to_string(cfg_.n_stages) + " stages");
  }

  SegOutput<T> forward(const Tensor<T>& x) const {
    check_input(x);
    FlushDenormalsGuard ftz;
    const auto S = cfg_.n_stages;
    std::vector<Tensor<T>> skips;
    Tensor<T> f = x;
    for (const auto& st : encoder_) {
      for (const auto& c : st.convs) f = relu(c(f));
      skips.push_back(f);
      f = st.down(f);
    }
    for (const auto& c : bottleneck_) f = relu(c(f));

    SegOutput<T> out;
    std::vector<Tensor<T>> by_res(static_cast<std::size_t>(S));
    by_res[static_cast<std::size_t>(S - 1)] = f;
    for (std::int64_t s = S - 2; s >= 0; --s) {
      const auto& st = decoder_[static_cast<std::size_t>(s)];
      f = concat<T>({st.up(f), skips[static_cast<std::size_t>(s)]}, 1);
      for (std::size_t b = 0; b < st.convs.size(); ++b) {
        if (b > 0) f = relu(f);
        f = st.convs[b](f);
      }
      const auto d = f.dim(2), h = f.dim(3), w = f.dim(4);
      if (gca_eligible(d * h * w)) f = graph_cross_attention(f, build_grid_graph(d, h, w), st.gca);
      by_res[static_cast<std::size_t>(s)] = f;
    }
    out.logits = head_(by_res[0]);
    for (std::size_t a = 0; a < aux_.size(); ++a) out.aux.push_back(aux_[a](by_res[a + 1]));
    return out;
  }

 private:
  struct Stage {
    std::vector<ConvLayer<T>> convs;
    ConvLayer<T> down;
  };
  struct DecoderStage {
    UpLayer<T> up;
    std::vector<ConvLayer<T>> convs;
    GCAModule<T> gca;
  };

  NetworkConfig cfg_;
  std::vector<Stage> encoder_;
  std::vector<ConvLayer<T>> bottleneck_;
  std::vector<DecoderStage> decoder_;
  ConvLayer<T> head_;
  std::vector<ConvLayer<T>> aux_;
};

// Per-voxel argmax over the class axis; ties go to the lowest class.
template <class T>
std::vector<LabelVolume> predict_labels(const Tensor<T>& logits) {
  check_shape(logits.ndim() == 5, "predict_labels", "logits must be [B,C,D,H,W]");
  const auto B = logits.dim(0), C = logits.dim(1);
  const Extents e{logits.dim(2), logits.dim(3), logits.dim(4)};
  const auto n = e[0] * e[1] * e[2];
  check_shape(C >= 1 && C <= 255, "predict_labels", "class count must be in [1, 255]");
  std::vector<LabelVolume> out;
  const T* v = logits.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    LabelVolume lab(e, 0);
    const T* base = v + b * C * n;
    std::vector<T> best(base, base + n);
    for (std::int64_t c = 1; c < C; ++c) {
      const T* row = base + c * n;
      for (std::int64_t i = 0; i < n; ++i)
        if (row[i] > best[static_cast<std::size_t>(i)]) {
          best[static_cast<std::size_t>(i)] = row[i];
          lab[i] = static_cast<std::uint8_t>(c);
        }
    }
    out.push_back(std::move(lab));
  }
  return out;
}

}  // namespace gcaseg
