#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace gcaseg {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct AxisSplit {
  std::int64_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t ndim, const char* op) {
  if (axis < 0) axis += ndim;
  check_shape(axis >= 0 && axis < ndim, op, "axis out of range");
  return axis;
}

// Records the sign pattern of every rectifier input while active. The
// finite-difference harness uses it to skip coordinates whose perturbation
// crosses a kink.
struct KinkMonitor {
  bool active = false;
  std::uint64_t signature = 1469598103934665603ull;
  double min_abs = std::numeric_limits<double>::infinity();

  void reset() {
    signature = 1469598103934665603ull;
    min_abs = std::numeric_limits<double>::infinity();
  }
  template <class T>
  void observe(std::span<const T> xs) {
    for (T x : xs) {
      signature = (signature ^ static_cast<std::uint64_t>(x > T(0))) * 1099511628211ull;
      min_abs = std::min(min_abs, std::abs(static_cast<double>(x)));
    }
  }
};

inline thread_local KinkMonitor kink_monitor;

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(), "add",
              "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    for (auto* p : {ai.get(), bi.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(), "sub",
              "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(), "mul",
              "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bi->value[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ai->value[i];
    }
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(), "div",
              "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bi->value[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * self.value[i] / bi->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  auto ai = a.impl();
  return make_result<T>(a.shape(), std::move(out), {&a}, [ai, s](TensorImpl<T>& self) {
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += s;
  auto ai = a.impl();
  return make_result<T>(a.shape(), std::move(out), {&a}, [ai](TensorImpl<T>& self) {
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Multiplies every element by a 0-d (or single-element) tensor.
template <class T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  check_shape(s.numel() == 1, "scale_by", "scale must hold one value, got " + to_string(s.shape()));
  const T sv = s[0];
  std::vector<T> out(a.values());
  for (auto& v : out) v *= sv;
  auto ai = a.impl(), si = s.impl();
  return make_result<T>(a.shape(), std::move(out), {&a, &s}, [ai, si](TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto& g = ai->ensure_grad();
      const T sv = si->value[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
    }
    if (si->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * ai->value[i];
      si->ensure_grad()[0] += acc;
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  if (detail::kink_monitor.active) detail::kink_monitor.observe(x.data());
  std::vector<T> out(x.values());
  for (auto& v : out) v = v < T(0) ? T(0) : v;  // NaN passes through
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xi](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xi->value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (detail::kink_monitor.active) detail::kink_monitor.observe(x.data());
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : slope * v;
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xi, slope](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += xi->value[i] > T(0) ? self.grad[i] : slope * self.grad[i];
  });
}

// x [..., C] + bias [C] broadcast over all leading positions.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  check_shape(x.ndim() >= 1 && bias.ndim() == 1 && bias.dim(0) == x.dim(-1), "add_bias",
              "bias " + to_string(bias.shape()) + " does not match last axis of " + to_string(x.shape()));
  const auto c = bias.dim(0);
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[static_cast<std::int64_t>(i) % c];
  auto xi = x.impl(), bi = bias.impl();
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [xi, bi, c](TensorImpl<T>& self) {
    if (xi->requires_grad) {
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<std::size_t>(c)] += self.grad[i];
    }
  });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return make_result<T>(Shape{}, {acc}, {&x}, [xi](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  check_shape(x.numel() > 0, "mean", "empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Sums over the listed axes; reduced axes are dropped from the result shape.
template <class T>
Tensor<T> sum_dims(const Tensor<T>& x, std::vector<std::int64_t> axes) {
  const auto nd = x.ndim();
  std::vector<bool> reduce(static_cast<std::size_t>(nd), false);
  for (auto a : axes) reduce[static_cast<std::size_t>(detail::normalize_axis(a, nd, "sum_dims"))] = true;
  Shape out_shape;
  for (std::int64_t d = 0; d < nd; ++d)
    if (!reduce[static_cast<std::size_t>(d)]) out_shape.push_back(x.dim(d));
  // Map each input flat index to its output flat index.
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<std::int64_t> stride_out(static_cast<std::size_t>(nd), 0);
  {
    std::int64_t s = 1;
    for (std::int64_t d = nd - 1; d >= 0; --d)
      if (!reduce[static_cast<std::size_t>(d)]) {
        stride_out[static_cast<std::size_t>(d)] = s;
        s *= x.dim(d);
      }
  }
  auto target = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*target)[i] = o;
    for (std::int64_t d = nd - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      o += stride_out[du];
      if (idx[du] < x.dim(d)) break;
      o -= stride_out[du] * idx[du];
      idx[du] = 0;
    }
  }
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)), T(0));
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[static_cast<std::size_t>((*target)[i])] += xv[i];
  auto xi = x.impl();
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [xi, target](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[static_cast<std::size_t>((*target)[i])];
  });
}

// ------------------------------------------------------------------- softmax

namespace detail {
template <class T>
Eigen::Array<T, Eigen::Dynamic, 1>& softmax_scratch(std::int64_t n, int slot = 0) {
  thread_local Eigen::Array<T, Eigen::Dynamic, 1> bufs[2];
  auto& b = bufs[slot];
  if (b.size() != n) b.resize(n);
  return b;
}
}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  axis = detail::normalize_axis(axis, x.ndim(), "softmax");
  const auto sp = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  if (sp.inner == 1) {
    // Contiguous rows: vectorized path. Work happens in an aligned scratch row
    // so packet peeling (and hence rounding) never depends on the caller's
    // buffer address.
    auto& buf = detail::softmax_scratch<T>(sp.n);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      buf = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(xv.data() + o * sp.n, sp.n);
      buf = (buf - buf.maxCoeff()).exp();
      buf /= buf.sum();
      std::copy(buf.data(), buf.data() + sp.n, out.data() + o * sp.n);
    }
  } else {
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.n * sp.inner + in;
        T m = -std::numeric_limits<T>::infinity();
        for (std::int64_t k = 0; k < sp.n; ++k) m = std::max(m, xv[static_cast<std::size_t>(base + k * sp.inner)]);
        T z = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) {
          auto i = static_cast<std::size_t>(base + k * sp.inner);
          out[i] = std::exp(xv[i] - m);
          z += out[i];
        }
        for (std::int64_t k = 0; k < sp.n; ++k) out[static_cast<std::size_t>(base + k * sp.inner)] /= z;
      }
  }
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xi, sp](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    if (sp.inner == 1) {
      auto& y = detail::softmax_scratch<T>(sp.n);
      auto& gy = detail::softmax_scratch<T>(sp.n, 1);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        y = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(self.value.data() + o * sp.n, sp.n);
        gy = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(self.grad.data() + o * sp.n, sp.n);
        const T dot = (gy * y).sum();
        gy = y * (gy - dot);
        T* gx = g.data() + o * sp.n;
        for (std::int64_t k = 0; k < sp.n; ++k) gx[k] += gy[k];
      }
      return;
    }
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.n * sp.inner + in;
        T dot = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) {
          auto i = static_cast<std::size_t>(base + k * sp.inner);
          dot += self.grad[i] * self.value[i];
        }
        for (std::int64_t k = 0; k < sp.n; ++k) {
          auto i = static_cast<std::size_t>(base + k * sp.inner);
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::int64_t axis) {
  axis = detail::normalize_axis(axis, x.ndim(), "log_softmax");
  const auto sp = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.n * sp.inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < sp.n; ++k) m = std::max(m, xv[static_cast<std::size_t>(base + k * sp.inner)]);
      T z = 0;
      for (std::int64_t k = 0; k < sp.n; ++k) z += std::exp(xv[static_cast<std::size_t>(base + k * sp.inner)] - m);
      const T lse = m + std::log(z);
      for (std::int64_t k = 0; k < sp.n; ++k) {
        auto i = static_cast<std::size_t>(base + k * sp.inner);
        out[i] = xv[i] - lse;
      }
    }
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xi, sp](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.n * sp.inner + in;
        T gs = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) gs += self.grad[static_cast<std::size_t>(base + k * sp.inner)];
        for (std::int64_t k = 0; k < sp.n; ++k) {
          auto i = static_cast<std::size_t>(base + k * sp.inner);
          g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
        }
      }
  });
}

// -------------------------------------------------------------------- matmul

namespace detail {

struct MatmulDims {
  std::int64_t batch, m, n, p;
  bool b_batched;
  Shape out;
};

// a: [..., m, n]; b: [..., n, p] (or [..., p, n] when transposed). Leading
// axes of b must equal those of a, or b must be a plain matrix.
inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b, const char* op) {
  check_shape(a.size() >= 2 && b.size() >= 2, op, "operands need at least 2 dims");
  MatmulDims d{};
  d.m = a[a.size() - 2];
  d.n = a[a.size() - 1];
  const auto bn = transpose_b ? b[b.size() - 1] : b[b.size() - 2];
  d.p = transpose_b ? b[b.size() - 2] : b[b.size() - 1];
  check_shape(bn == d.n, op, "inner extents differ: " + to_string(a) + " x " + to_string(b));
  Shape lead_a(a.begin(), a.end() - 2), lead_b(b.begin(), b.end() - 2);
  d.b_batched = !lead_b.empty();
  check_shape(!d.b_batched || lead_a == lead_b, op,
              "batch axes differ: " + to_string(a) + " x " + to_string(b));
  d.batch = numel(lead_a);
  d.out = lead_a;
  d.out.push_back(d.m);
  d.out.push_back(d.p);
  return d;
}

template <class T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool tb, const char* name) {
  const auto d = matmul_dims(a.shape(), b.shape(), tb, name);
  std::vector<T> out(static_cast<std::size_t>(numel(d.out)));
  const auto bcols = tb ? d.n : d.p;
  const auto brows = tb ? d.p : d.n;
  for (std::int64_t s = 0; s < d.batch; ++s) {
    ConstMatMap<T> A(a.data().data() + s * d.m * d.n, d.m, d.n);
    ConstMatMap<T> B(b.data().data() + (d.b_batched ? s * d.n * d.p : 0), brows, bcols);
    MatMap<T> C(out.data() + s * d.m * d.p, d.m, d.p);
    if (tb)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  }
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(d.out, std::move(out), {&a, &b}, [ai, bi, d, tb, brows, bcols](TensorImpl<T>& self) {
    for (std::int64_t s = 0; s < d.batch; ++s) {
      ConstMatMap<T> G(self.grad.data() + s * d.m * d.p, d.m, d.p);
      ConstMatMap<T> A(ai->value.data() + s * d.m * d.n, d.m, d.n);
      const auto boff = d.b_batched ? s * d.n * d.p : 0;
      ConstMatMap<T> B(bi->value.data() + boff, brows, bcols);
      if (ai->requires_grad) {
        MatMap<T> GA(ai->ensure_grad().data() + s * d.m * d.n, d.m, d.n);
        if (tb)
          GA.noalias() += G * B;
        else
          GA.noalias() += G * B.transpose();
      }
      if (bi->requires_grad) {
        MatMap<T> GB(bi->ensure_grad().data() + boff, brows, bcols);
        if (tb)
          GB.noalias() += G.transpose() * A;
        else
          GB.noalias() += A.transpose() * G;
      }
    }
  });
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, false, "matmul");
}

// a · bᵀ over the last two axes.
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, true, "matmul_bt");
}

// ------------------------------------------------------------- shape plumbing

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(numel(shape) == x.numel(), "reshape",
              "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  auto xi = x.impl();
  return make_result<T>(std::move(shape), x.values(), {&x}, [xi](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  check_shape(x.ndim() >= 2, "transpose", "needs at least 2 dims");
  const auto r = x.dim(-2), c = x.dim(-1);
  const auto batch = x.numel() / std::max<std::int64_t>(1, r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(x.values().size());
  for (std::int64_t s = 0; s < batch; ++s) {
    detail::ConstMatMap<T> X(x.data().data() + s * r * c, r, c);
    detail::MatMap<T> Y(out.data() + s * r * c, c, r);
    Y = X.transpose();
  }
  auto xi = x.impl();
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [xi, r, c, batch](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::int64_t s = 0; s < batch; ++s) {
      detail::ConstMatMap<T> G(self.grad.data() + s * r * c, c, r);
      detail::MatMap<T> GX(g.data() + s * r * c, r, c);
      GX += G.transpose();
    }
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  check_shape(!parts.empty(), "concat", "no inputs");
  const auto nd = parts[0].ndim();
  axis = detail::normalize_axis(axis, nd, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    check_shape(p.ndim() == nd, "concat", "rank mismatch");
    for (std::int64_t d = 0; d < nd; ++d)
      if (d != axis)
        check_shape(p.dim(d) == parts[0].dim(d), "concat",
                    "extent mismatch " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  const auto sp = detail::split_axis(out_shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto chunk = p.dim(axis) * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * sp.n * sp.inner + off * sp.inner);
    off += p.dim(axis);
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result_n<T>(out_shape, std::move(out), parts, [impls, offsets, sp, axis](TensorImpl<T>& self) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      auto& p = *impls[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const auto chunk = p.shape[static_cast<std::size_t>(axis)] * sp.inner;
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + o * sp.n * sp.inner + offsets[k] * sp.inner;
        T* dst = g.data() + o * chunk;
        for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

// Slice [start, start+length) along an axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = detail::normalize_axis(axis, x.ndim(), "narrow");
  check_shape(start >= 0 && length >= 0 && start + length <= x.dim(axis), "narrow", "range out of bounds");
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  const auto chunk = length * sp.inner;
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + o * sp.n * sp.inner + start * sp.inner, chunk, out.data() + o * chunk);
  auto xi = x.impl();
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [xi, sp, start, chunk](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      T* dst = g.data() + o * sp.n * sp.inner + start * sp.inner;
      const T* src = self.grad.data() + o * chunk;
      for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

// out[b, d...] = x[b, index[b, d...], d...] for x of shape [B, C, rest...]
// and an index volume of shape [B, rest...].
template <class T>
Tensor<T> take_along_channels(const Tensor<T>& x, const std::vector<std::int32_t>& index) {
  check_shape(x.ndim() >= 2, "take_along_channels", "needs [B,C,...]");
  const auto B = x.dim(0), C = x.dim(1);
  const auto S = x.numel() / std::max<std::int64_t>(1, B * C);
  check_shape(static_cast<std::int64_t>(index.size()) == B * S, "take_along_channels",
              "index volume size mismatch");
  for (auto c : index)
    if (c < 0 || c >= C) throw std::out_of_range("take_along_channels: class index " + std::to_string(c) + " out of range");
  Shape out_shape{B};
  for (std::int64_t d = 2; d < x.ndim(); ++d) out_shape.push_back(x.dim(d));
  std::vector<T> out(static_cast<std::size_t>(B * S));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s)
      out[static_cast<std::size_t>(b * S + s)] =
          x[(b * C + index[static_cast<std::size_t>(b * S + s)]) * S + s];
  auto xi = x.impl();
  auto idx = std::make_shared<std::vector<std::int32_t>>(index);
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [xi, idx, B, C, S](TensorImpl<T>& self) {
    auto& g = xi->ensure_grad();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t s = 0; s < S; ++s)
        g[static_cast<std::size_t>((b * C + (*idx)[static_cast<std::size_t>(b * S + s)]) * S + s)] +=
            self.grad[static_cast<std::size_t>(b * S + s)];
  });
}

template <class U, class T>
Tensor<U> cast(const Tensor<T>& x) {
  std::vector<U> v(x.values().begin(), x.values().end());
  return Tensor<U>(x.shape(), std::move(v));
}

}  // namespace gcaseg
