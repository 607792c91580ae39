#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "ops.hpp"
#include "tensor.hpp"

namespace gcaseg {

namespace detail {

struct ConvGeometry {
  std::int64_t cin, d, h, w;       // input
  std::int64_t k, stride, pad;
  std::int64_t od, oh, ow;         // output
  std::int64_t rows() const { return cin * k * k * k; }
  std::int64_t in_size() const { return d * h * w; }
  std::int64_t out_size() const { return od * oh * ow; }
};

// Walks output positions [p0, p1) of one column row in runs along the
// output W axis. Each run is split into a leading padded span, an in-bounds
// span, and a trailing padded span: on_pad(j, count) and
// on_copy(j, count, input_offset_of_first, input_step).
template <class Pad, class Copy>
void for_each_patch_run(const ConvGeometry& g, std::int64_t row, std::int64_t p0, std::int64_t p1, Pad&& on_pad,
                        Copy&& on_copy) {
  const auto kk = g.k * g.k * g.k;
  const auto ci = row / kk;
  const auto kd = (row / (g.k * g.k)) % g.k;
  const auto kh = (row / g.k) % g.k;
  const auto kw = row % g.k;
  // Output columns x whose input column x*stride - pad + kw lies in [0, w).
  const auto lo_num = g.pad - kw;
  const std::int64_t x_valid_lo = lo_num > 0 ? (lo_num + g.stride - 1) / g.stride : 0;
  const auto hi_num = g.w - 1 + g.pad - kw;
  const std::int64_t x_valid_hi = hi_num >= 0 ? hi_num / g.stride + 1 : 0;
  std::int64_t ow = p0 % g.ow;
  std::int64_t oh = (p0 / g.ow) % g.oh;
  std::int64_t od = p0 / (g.ow * g.oh);
  std::int64_t j = 0;
  for (std::int64_t p = p0; p < p1;) {
    const auto seg_end = std::min(g.ow, ow + (p1 - p));
    const auto n = seg_end - ow;
    const auto id = od * g.stride - g.pad + kd;
    const auto ih = oh * g.stride - g.pad + kh;
    if (id >= 0 && id < g.d && ih >= 0 && ih < g.h) {
      const auto lo = std::clamp(x_valid_lo, ow, seg_end);
      const auto hi = std::clamp(x_valid_hi, lo, seg_end);
      if (lo > ow) on_pad(j, lo - ow);
      if (hi > lo) on_copy(j + (lo - ow), hi - lo, ((ci * g.d + id) * g.h + ih) * g.w + lo * g.stride - g.pad + kw, g.stride);
      if (seg_end > hi) on_pad(j + (hi - ow), seg_end - hi);
    } else {
      on_pad(j, n);
    }
    j += n;
    p += n;
    ow = 0;
    if (++oh == g.oh) {
      oh = 0;
      ++od;
    }
  }
}

template <class T>
void im2col(const ConvGeometry& g, const T* x, std::int64_t p0, std::int64_t p1, T* col) {
  const auto pc = p1 - p0;
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    T* dst = col + r * pc;
    for_each_patch_run(
        g, r, p0, p1, [&](std::int64_t j, std::int64_t n) { std::fill_n(dst + j, n, T(0)); },
        [&](std::int64_t j, std::int64_t n, std::int64_t src, std::int64_t step) {
          if (step == 1) {
            std::copy_n(x + src, n, dst + j);
          } else {
            for (std::int64_t i = 0; i < n; ++i) dst[j + i] = x[src + i * step];
          }
        });
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, std::int64_t p0, std::int64_t p1, T* dx) {
  const auto pc = p1 - p0;
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    const T* src = col + r * pc;
    for_each_patch_run(
        g, r, p0, p1, [](std::int64_t, std::int64_t) {},
        [&](std::int64_t j, std::int64_t n, std::int64_t dst, std::int64_t step) {
          for (std::int64_t i = 0; i < n; ++i) dx[dst + i * step] += src[j + i];
        });
  }
}

// Column count per buffer; whole output rows when stride is 1.
inline std::int64_t column_chunk(const ConvGeometry& g) {
  constexpr std::int64_t kBudget = std::int64_t{1} << 18;  // elements per column buffer (L2 sized)
  const auto per_row = kBudget / std::max<std::int64_t>(1, g.rows());
  if (g.stride == 1) return std::min(g.out_size(), std::max<std::int64_t>(1, per_row / g.ow) * g.ow);
  return std::clamp<std::int64_t>(per_row, 64, g.out_size());
}

// Stride-1 patch access through a zero-padded volume, so each column row is
// a run of contiguous output-row copies. f(column row, padded offset, column
// offset) is called once per output row; chunks start on output rows.
template <class F>
void for_each_padded_row(const ConvGeometry& g, std::int64_t p0, std::int64_t p1, F&& f) {
  const auto hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad, dp = g.d + 2 * g.pad;
  const auto pc = p1 - p0, l0 = p0 / g.ow, l1 = p1 / g.ow, kk = g.k * g.k * g.k;
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    const auto ci = r / kk, kd = (r / (g.k * g.k)) % g.k, kh = (r / g.k) % g.k, kw = r % g.k;
    const auto base = ((ci * dp + kd) * hp + kh) * wp + kw;
    auto j = r * pc;
    std::int64_t z = l0 / g.oh, y = l0 % g.oh;
    for (std::int64_t l = l0; l < l1; ++l, j += g.ow) {
      f(base + (z * hp + y) * wp, j);
      if (++y == g.oh) y = 0, ++z;
    }
  }
}

template <class T>
std::vector<T> pad_volume(const ConvGeometry& g, const T* x) {
  const auto hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad, dp = g.d + 2 * g.pad;
  std::vector<T> out(static_cast<std::size_t>(g.cin * dp * hp * wp), T(0));
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t z = 0; z < g.d; ++z)
      for (std::int64_t y = 0; y < g.h; ++y)
        std::copy_n(x + ((c * g.d + z) * g.h + y) * g.w, g.w,
                    out.data() + ((c * dp + z + g.pad) * hp + y + g.pad) * wp + g.pad);
  return out;
}

// Column buffers for one volume.
template <class T>
class Patches {
 public:
  Patches(const ConvGeometry& g, const T* x) : g_(g), x_(x) {
    if (g_.stride == 1 && g_.pad > 0) {
      padded_ = pad_volume(g_, x);
      x_ = padded_.data();
    }
  }

  void fill(std::int64_t p0, std::int64_t p1, T* col) const {
    if (g_.stride != 1) return im2col(g_, x_, p0, p1, col);
    for_each_padded_row(g_, p0, p1, [&](std::int64_t src, std::int64_t j) { std::copy_n(x_ + src, g_.ow, col + j); });
  }

 private:
  ConvGeometry g_;
  const T* x_;
  std::vector<T> padded_;
};

// Scatter-adds column buffers back into a volume gradient.
template <class T>
class PatchGradient {
 public:
  PatchGradient(const ConvGeometry& g, T* dx) : g_(g), dx_(dx) {
    if (g_.stride == 1)
      padded_.assign(static_cast<std::size_t>(g.cin * (g.d + 2 * g.pad) * (g.h + 2 * g.pad) * (g.w + 2 * g.pad)), T(0));
  }

  void add(std::int64_t p0, std::int64_t p1, const T* col) {
    if (g_.stride != 1) return col2im_add(g_, col, p0, p1, dx_);
    T* gp = padded_.data();
    for_each_padded_row(g_, p0, p1, [&](std::int64_t dst, std::int64_t j) {
      for (std::int64_t i = 0; i < g_.ow; ++i) gp[dst + i] += col[j + i];
    });
  }

  void finish() {
    if (g_.stride != 1) return;
    const auto hp = g_.h + 2 * g_.pad, wp = g_.w + 2 * g_.pad, dp = g_.d + 2 * g_.pad;
    for (std::int64_t c = 0; c < g_.cin; ++c)
      for (std::int64_t z = 0; z < g_.d; ++z)
        for (std::int64_t y = 0; y < g_.h; ++y) {
          const T* s = padded_.data() + ((c * dp + z + g_.pad) * hp + y + g_.pad) * wp + g_.pad;
          T* d = dx_ + ((c * g_.d + z) * g_.h + y) * g_.w;
          for (std::int64_t x = 0; x < g_.w; ++x) d[x] += s[x];
        }
  }

 private:
  ConvGeometry g_;
  T* dx_;
  std::vector<T> padded_;
};

template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

}  // namespace detail

inline std::int64_t conv_output_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// 3D cross-correlation. input [B,Cin,D,H,W], kernel [Cout,Cin,k,k,k],
// bias [Cout] (may be undefined). Even kernels are accepted only with pad 0.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  const char* op = "conv3d";
  check_shape(input.ndim() == 5, op, "input must be [B,C,D,H,W], got " + to_string(input.shape()));
  check_shape(kernel.ndim() == 5, op, "kernel must be [Cout,Cin,k,k,k], got " + to_string(kernel.shape()));
  const auto k = kernel.dim(2);
  check_shape(kernel.dim(3) == k && kernel.dim(4) == k, op, "kernel must be cubic");
  check_shape(kernel.dim(1) == input.dim(1), op,
              "channel mismatch: input has " + std::to_string(input.dim(1)) + " channels, kernel expects " +
                  std::to_string(kernel.dim(1)) + " (input " + to_string(input.shape()) + ", kernel " +
                  to_string(kernel.shape()) + ")");
  check_shape(k % 2 == 1 || pad == 0, op, "even kernel size requires zero padding");
  check_shape(stride >= 1 && pad >= 0, op, "stride must be >= 1 and padding >= 0");
  const auto cout = kernel.dim(0);
  if (bias.defined()) check_shape(bias.numel() == cout, op, "bias length must equal Cout");

  detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), input.dim(4), k, stride, pad, 0, 0, 0};
  check_shape(g.d + 2 * pad >= k && g.h + 2 * pad >= k && g.w + 2 * pad >= k, op,
              "padded input smaller than kernel");
  g.od = conv_output_extent(g.d, k, stride, pad);
  g.oh = conv_output_extent(g.h, k, stride, pad);
  g.ow = conv_output_extent(g.w, k, stride, pad);

  const auto B = input.dim(0);
  const auto K = g.rows(), P = g.out_size(), chunk = detail::column_chunk(g);
  std::vector<T> out(static_cast<std::size_t>(B * cout * P));
  std::vector<T> col(static_cast<std::size_t>(K * chunk));
  detail::ConstMatMap<T> Wm(kernel.data().data(), cout, K);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* x = input.data().data() + b * g.cin * g.in_size();
    T* y = out.data() + b * cout * P;
    const detail::Patches<T> patches(g, x);
    for (std::int64_t p0 = 0; p0 < P; p0 += chunk) {
      const auto p1 = std::min(P, p0 + chunk), pc = p1 - p0;
      patches.fill(p0, p1, col.data());
      detail::ConstMatMap<T> C(col.data(), K, pc);
      detail::StridedMap<T> Y(y + p0, cout, pc, Eigen::OuterStride<>(P));
      Y.noalias() = Wm * C;
    }
    if (bias.defined())
      for (std::int64_t c = 0; c < cout; ++c) {
        const T bv = bias[c];
        T* row = y + c * P;
        for (std::int64_t p = 0; p < P; ++p) row[p] += bv;
      }
  }

  auto xi = input.impl(), wi = kernel.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  Shape out_shape{B, cout, g.od, g.oh, g.ow};
  auto backward = [xi, wi, bi, g, B, cout](TensorImpl<T>& self) {
    const auto K = g.rows(), P = g.out_size(), chunk = detail::column_chunk(g);
    std::vector<T> col(static_cast<std::size_t>(K * chunk));
    detail::ConstMatMap<T> Wm(wi->value.data(), cout, K);
    // Stride 1 with fewer output than input channels: the input gradient is a
    // correlation of dy with the flipped, channel-swapped kernel, which avoids
    // the col2im scatter.
    const bool flip_path = g.stride == 1 && cout < g.cin && xi->requires_grad;
    if (flip_path) {
      const auto kk = g.k * g.k * g.k, cin = g.cin;
      std::vector<T> wf(static_cast<std::size_t>(cin * cout * kk));
      for (std::int64_t co = 0; co < cout; ++co)
        for (std::int64_t ci = 0; ci < cin; ++ci)
          for (std::int64_t t = 0; t < kk; ++t)
            wf[static_cast<std::size_t>((ci * cout + co) * kk + (kk - 1 - t))] =
                wi->value[static_cast<std::size_t>((co * cin + ci) * kk + t)];
      const detail::ConvGeometry gb{cout, g.od, g.oh, g.ow, g.k, 1, g.k - 1 - g.pad, g.d, g.h, g.w};
      const auto KB = gb.rows(), PB = gb.out_size(), chunk_b = detail::column_chunk(gb);
      std::vector<T> colb(static_cast<std::size_t>(KB * chunk_b));
      detail::ConstMatMap<T> Wf(wf.data(), cin, KB);
      auto& gx = xi->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        const T* dy = self.grad.data() + b * cout * P;
        T* dx = gx.data() + b * cin * PB;
        const detail::Patches<T> patches(gb, dy);
        for (std::int64_t p0 = 0; p0 < PB; p0 += chunk_b) {
          const auto p1 = std::min(PB, p0 + chunk_b), pc = p1 - p0;
          patches.fill(p0, p1, colb.data());
          detail::ConstMatMap<T> C(colb.data(), KB, pc);
          detail::StridedMap<T> DX(dx + p0, cin, pc, Eigen::OuterStride<>(PB));
          DX.noalias() += Wf * C;
        }
      }
    }
    for (std::int64_t b = 0; b < B; ++b) {
      const T* x = xi->value.data() + b * g.cin * g.in_size();
      const T* dy = self.grad.data() + b * cout * P;
      if (bi && bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (std::int64_t c = 0; c < cout; ++c) {
          T acc = 0;
          for (std::int64_t p = 0; p < P; ++p) acc += dy[c * P + p];
          gb[static_cast<std::size_t>(c)] += acc;
        }
      }
      const bool scatter = xi->requires_grad && !flip_path;
      std::optional<detail::Patches<T>> patches;
      if (wi->requires_grad) patches.emplace(g, x);
      std::optional<detail::PatchGradient<T>> dx;
      if (scatter) dx.emplace(g, xi->ensure_grad().data() + b * g.cin * g.in_size());
      for (std::int64_t p0 = 0; p0 < P; p0 += chunk) {
        const auto p1 = std::min(P, p0 + chunk), pc = p1 - p0;
        detail::ConstStridedMap<T> DY(dy + p0, cout, pc, Eigen::OuterStride<>(P));
        if (patches) {
          patches->fill(p0, p1, col.data());
          detail::ConstMatMap<T> C(col.data(), K, pc);
          detail::MatMap<T> GW(wi->ensure_grad().data(), cout, K);
          GW.noalias() += DY * C.transpose();
        }
        if (dx) {
          detail::MatMap<T> DC(col.data(), K, pc);
          DC.noalias() = Wm.transpose() * DY;
          dx->add(p0, p1, col.data());
        }
      }
      if (dx) dx->finish();
    }
  };
  if (bias.defined()) return make_result<T>(std::move(out_shape), std::move(out), {&input, &kernel, &bias}, backward);
  return make_result<T>(std::move(out_shape), std::move(out), {&input, &kernel}, backward);
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, std::int64_t stride = 1, std::int64_t pad = 0) {
  return conv3d(input, kernel, Tensor<T>(), stride, pad);
}

// Transposed convolution for kernel == stride == 2 (non-overlapping scatter).
// input [B,Cin,D,H,W], kernel [Cin,Cout,2,2,2] -> [B,Cout,2D,2H,2W].
template <class T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::int64_t stride = 2) {
  const char* op = "conv3d_transpose";
  check_shape(input.ndim() == 5 && kernel.ndim() == 5, op, "expected 5-d input and kernel");
  const auto k = kernel.dim(2);
  if (!(k == 2 && stride == 2 && kernel.dim(3) == 2 && kernel.dim(4) == 2))
    throw std::invalid_argument("conv3d_transpose: only kernel 2 with stride 2 is supported (got k=" +
                                std::to_string(k) + ", stride=" + std::to_string(stride) + ")");
  check_shape(kernel.dim(0) == input.dim(1), op,
              "channel mismatch: input has " + std::to_string(input.dim(1)) + " channels, kernel expects " +
                  std::to_string(kernel.dim(0)));
  const auto B = input.dim(0), cin = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const auto cout = kernel.dim(1);
  if (bias.defined()) check_shape(bias.numel() == cout, op, "bias length must equal Cout");
  const auto P = D * H * W, R = cout * 8;
  const auto OD = 2 * D, OH = 2 * H, OW = 2 * W, OP = OD * OH * OW;

  // Visits (row r = co*8 + kd*4 + kh*2 + kw, input position p, output offset).
  auto for_each_tap = [=](auto&& f) {
    for (std::int64_t r = 0; r < R; ++r) {
      const auto co = r / 8, kd = (r >> 2) & 1, kh = (r >> 1) & 1, kw = r & 1;
      std::int64_t p = 0;
      for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y) {
          const auto base = ((co * OD + 2 * z + kd) * OH + 2 * y + kh) * OW + kw;
          for (std::int64_t x = 0; x < W; ++x, ++p) f(r, p, base + 2 * x);
        }
    }
  };

  std::vector<T> out(static_cast<std::size_t>(B * cout * OP));
  std::vector<T> tmp(static_cast<std::size_t>(R * P));
  detail::ConstMatMap<T> Wm(kernel.data().data(), cin, R);
  for (std::int64_t b = 0; b < B; ++b) {
    detail::ConstMatMap<T> X(input.data().data() + b * cin * P, cin, P);
    detail::MatMap<T> Tm(tmp.data(), R, P);
    Tm.noalias() = Wm.transpose() * X;
    T* y = out.data() + b * cout * OP;
    const T* bp = bias.defined() ? bias.data().data() : nullptr;
    for_each_tap([&](std::int64_t r, std::int64_t p, std::int64_t o) {
      y[o] = tmp[static_cast<std::size_t>(r * P + p)] + (bp ? bp[r / 8] : T(0));
    });
  }

  auto xi = input.impl(), wi = kernel.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  Shape out_shape{B, cout, OD, OH, OW};
  auto backward = [xi, wi, bi, B, cin, cout, P, R, OP, for_each_tap](TensorImpl<T>& self) {
    std::vector<T> dt(static_cast<std::size_t>(R * P));
    detail::ConstMatMap<T> Wm(wi->value.data(), cin, R);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* dy = self.grad.data() + b * cout * OP;
      for_each_tap([&](std::int64_t r, std::int64_t p, std::int64_t o) { dt[static_cast<std::size_t>(r * P + p)] = dy[o]; });
      detail::ConstMatMap<T> DT(dt.data(), R, P);
      if (bi && bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r) {
          T acc = 0;
          for (std::int64_t p = 0; p < P; ++p) acc += dt[static_cast<std::size_t>(r * P + p)];
          gb[static_cast<std::size_t>(r / 8)] += acc;
        }
      }
      if (xi->requires_grad) {
        detail::MatMap<T> DX(xi->ensure_grad().data() + b * cin * P, cin, P);
        DX.noalias() += Wm * DT;
      }
      if (wi->requires_grad) {
        detail::ConstMatMap<T> X(xi->value.data() + b * cin * P, cin, P);
        detail::MatMap<T> GW(wi->ensure_grad().data(), cin, R);
        GW.noalias() += X * DT.transpose();
      }
    }
  };
  if (bias.defined()) return make_result<T>(std::move(out_shape), std::move(out), {&input, &kernel, &bias}, backward);
  return make_result<T>(std::move(out_shape), std::move(out), {&input, &kernel}, backward);
}

template <class T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, std::int64_t stride = 2) {
  return conv3d_transpose(input, kernel, Tensor<T>(), stride);
}

}  // namespace gcaseg
