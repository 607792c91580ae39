#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ops.hpp"
#include "segnet.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace gcaseg {

enum class LossType { kCrossEntropy = 1, kDice = 2, kCombined = 3 };

struct LossConfig {
  double w_ce = 1.0;
  double w_dice = 1.0;
  double dice_eps = 1e-5;
  bool mean_batch = true;
  LossType loss_type = LossType::kCombined;
  std::vector<double> deep_sup_weights;  // empty: halve per coarser stage
};

inline LossType loss_type_from_int(int v) {
  if (v < 1 || v > 3) throw std::invalid_argument("loss_type must be 1 (CE), 2 (Dice) or 3 (CE+Dice), got " + std::to_string(v));
  return static_cast<LossType>(v);
}

// Weights for stage 0 (main head) .. n_stages-1, normalized to sum 1.
inline std::vector<double> deep_supervision_weights(const LossConfig& cfg, std::size_t n_stages) {
  std::vector<double> w = cfg.deep_sup_weights;
  if (w.empty()) {
    double v = 1.0;
    for (std::size_t s = 0; s < n_stages; ++s, v *= 0.5) w.push_back(v);
  }
  if (w.size() != n_stages)
    throw std::invalid_argument("deep_sup_weights has " + std::to_string(w.size()) + " entries for " +
                                std::to_string(n_stages) + " supervised outputs");
  double total = 0;
  for (double x : w) {
    if (!(x >= 0)) throw std::invalid_argument("deep_sup_weights must be nonnegative");
    total += x;
  }
  if (total <= 0) throw std::invalid_argument("deep_sup_weights must not all be zero");
  for (double& x : w) x /= total;
  return w;
}

inline void check_label_batch(const std::vector<LabelVolume>& labels, std::int64_t B, const Extents& e, const char* op) {
  check_shape(static_cast<std::int64_t>(labels.size()) == B, op, "label batch size does not match logits");
  for (const auto& l : labels)
    check_shape(l.dims == e, op, "label extents " + to_string(l.dims) + " do not match logits " + to_string(e));
}

inline std::vector<std::int32_t> label_indices(const std::vector<LabelVolume>& labels) {
  std::vector<std::int32_t> idx;
  for (const auto& l : labels) idx.insert(idx.end(), l.data.begin(), l.data.end());
  return idx;
}

template <class T>
Tensor<T> one_hot(const std::vector<LabelVolume>& labels, std::int64_t n_classes) {
  check_shape(!labels.empty(), "one_hot", "empty label batch");
  const auto e = labels[0].dims;
  const auto n = labels[0].size();
  const auto B = static_cast<std::int64_t>(labels.size());
  Tensor<T> out({B, n_classes, e[0], e[1], e[2]});
  for (std::int64_t b = 0; b < B; ++b) {
    check_shape(labels[static_cast<std::size_t>(b)].dims == e, "one_hot", "inconsistent label extents in batch");
    for (std::int64_t i = 0; i < n; ++i) {
      const int c = labels[static_cast<std::size_t>(b)][i];
      if (c >= n_classes) throw std::out_of_range("one_hot: label " + std::to_string(c) + " out of range");
      out[(b * n_classes + c) * n + i] = T(1);
    }
  }
  return out;
}

// Nearest-neighbour downsampling by an integer factor (keeps voxel z*f, y*f, x*f).
inline LabelVolume downsample_labels(const LabelVolume& l, std::int64_t factor) {
  if (factor == 1) return l;
  for (auto d : l.dims)
    if (d % factor != 0) throw ShapeError("downsample_labels: extents " + to_string(l.dims) + " not divisible by " + std::to_string(factor));
  LabelVolume out({l.dims[0] / factor, l.dims[1] / factor, l.dims[2] / factor});
  for (std::int64_t z = 0; z < out.dims[0]; ++z)
    for (std::int64_t y = 0; y < out.dims[1]; ++y)
      for (std::int64_t x = 0; x < out.dims[2]; ++x) out.at(z, y, x) = l.at(z * factor, y * factor, x * factor);
  return out;
}

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), averaged over classes.
// mean_batch pools the sums over the batch before the ratio; otherwise each
// (batch item, class) ratio is formed separately and averaged.
template <class T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg = {}) {
  check_shape(probs.shape() == target.shape() && probs.ndim() >= 3, "soft_dice_loss",
              "probs " + to_string(probs.shape()) + " and target " + to_string(target.shape()) + " must match [B,C,...]");
  std::vector<std::int64_t> spatial;
  for (std::int64_t d = 2; d < probs.ndim(); ++d) spatial.push_back(d);
  if (cfg.mean_batch) spatial.insert(spatial.begin(), 0);
  auto inter = sum_dims(mul(probs, target), spatial);
  auto psum = sum_dims(probs, spatial);
  auto tsum = sum_dims(target, spatial);
  const T eps = static_cast<T>(cfg.dice_eps);
  auto ratio = div(add_scalar(scale(inter, T(2)), eps), add_scalar(add(psum, tsum), eps));
  return add_scalar(scale(mean(ratio), T(-1)), T(1));
}

// Mean over batch and voxels of -log softmax(logits)[label].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<LabelVolume>& labels) {
  check_shape(logits.ndim() == 5, "cross_entropy", "logits must be [B,C,D,H,W]");
  check_label_batch(labels, logits.dim(0), {logits.dim(2), logits.dim(3), logits.dim(4)}, "cross_entropy");
  auto picked = take_along_channels(log_softmax(logits, 1), label_indices(labels));
  return scale(mean(picked), T(-1));
}

template <class T>
Tensor<T> stage_loss(const Tensor<T>& logits, const std::vector<LabelVolume>& labels, const LossConfig& cfg) {
  const bool ce = cfg.loss_type != LossType::kDice, dice = cfg.loss_type != LossType::kCrossEntropy;
  Tensor<T> total;
  if (ce) total = scale(cross_entropy(logits, labels), static_cast<T>(cfg.w_ce));
  if (dice) {
    check_label_batch(labels, logits.dim(0), {logits.dim(2), logits.dim(3), logits.dim(4)}, "soft_dice_loss");
    auto d = scale(soft_dice_loss(softmax(logits, 1), one_hot<T>(labels, logits.dim(1)), cfg), static_cast<T>(cfg.w_dice));
    total = ce ? add(total, d) : d;
  }
  return total;
}

// sum_s w_s * stage_loss(s); stage 0 is the main head, stage k uses labels
// downsampled by 2^k.
template <class T>
Tensor<T> combined_loss(const Tensor<T>& logits, const std::vector<Tensor<T>>& aux,
                        const std::vector<LabelVolume>& labels, const LossConfig& cfg = {}) {
  const auto w = deep_supervision_weights(cfg, aux.size() + 1);
  auto total = scale(stage_loss(logits, labels, cfg), static_cast<T>(w[0]));
  for (std::size_t k = 0; k < aux.size(); ++k) {
    const auto factor = logits.dim(2) / aux[k].dim(2);
    std::vector<LabelVolume> down;
    for (const auto& l : labels) down.push_back(downsample_labels(l, factor));
    total = add(total, scale(stage_loss(aux[k], down, cfg), static_cast<T>(w[k + 1])));
  }
  return total;
}

template <class T>
Tensor<T> combined_loss(const SegOutput<T>& out, const std::vector<LabelVolume>& labels, const LossConfig& cfg = {}) {
  return combined_loss(out.logits, out.aux, labels, cfg);
}

}  // namespace gcaseg
