#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#if defined(__SSE2__)
#include <pmmintrin.h>
#endif

namespace gcaseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void check_shape(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw ShapeError(op + ": " + what);
}

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

// Flushes subnormal floats to zero on the current thread for its lifetime.
// Saturated softmax rows otherwise produce subnormals that slow every
// following GEMM by several times.
class FlushDenormalsGuard {
 public:
#if defined(__SSE2__)
  FlushDenormalsGuard() : prev_(_mm_getcsr()) { _mm_setcsr(prev_ | 0x8040); }  // FTZ | DAZ
  ~FlushDenormalsGuard() { _mm_setcsr(prev_); }
#else
  FlushDenormalsGuard() = default;
#endif
  FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
  FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

#if defined(__SSE2__)
 private:
  unsigned prev_;
#endif
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Propagates this node's grad into its parents. Empty for leaves.
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Reference-counted handle to a dense row-major array. Copies share storage;
// use clone() for a deep copy. Operations producing a Tensor from inputs that
// require grad record a backward closure on the result.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    for (auto e : shape)
      if (e < 0) throw ShapeError("negative extent in " + gcaseg::to_string(shape));
    impl_->value.assign(static_cast<std::size_t>(gcaseg::numel(shape)), fill);
    impl_->shape = std::move(shape);
  }
  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    if (static_cast<std::int64_t>(values.size()) != gcaseg::numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + gcaseg::to_string(shape));
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += ndim();
    return impl_->shape.at(static_cast<std::size_t>(i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

  std::span<T> data() { return impl_->value; }
  std::span<const T> data() const { return impl_->value; }
  std::vector<T>& values() { return impl_->value; }
  const std::vector<T>& values() const { return impl_->value; }
  T& operator[](std::int64_t i) { return impl_->value[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return impl_->value[static_cast<std::size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + gcaseg::to_string(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  // Accumulated gradient (zeros if nothing has been accumulated yet).
  std::span<T> grad() { return impl_->ensure_grad(); }
  Tensor grad_tensor() const { return Tensor(shape(), impl_->ensure_grad()); }
  void zero_grad() {
    auto& g = impl_->ensure_grad();
    std::fill(g.begin(), g.end(), T(0));
  }

  Tensor clone() const { return Tensor(shape(), impl_->value); }
  Tensor detach() const { return clone(); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

  void backward() const;

 private:
  std::shared_ptr<Impl> impl_;
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;

  std::span<T> grad() { return value.grad(); }
  void zero_grad() { value.zero_grad(); }
};

template <class T>
using ParameterList = std::vector<Parameter<T>>;

template <class T>
Tensor<T> make_parameter(Shape shape) {
  Tensor<T> t(std::move(shape));
  t.set_requires_grad(true);
  t.zero_grad();
  return t;
}

// Builds the result of an op. The backward closure is attached only when
// recording is enabled and some input participates in differentiation.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  for (auto* in : inputs) impl.parents.push_back(in->impl());
  impl.backward_fn = std::forward<Fn>(backward);
  return out;
}

template <class T, class Fn>
Tensor<T> make_result_n(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                        Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  for (const auto& in : inputs) impl.parents.push_back(in.impl());
  impl.backward_fn = std::forward<Fn>(backward);
  return out;
}

// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
// intermediate grads are rebuilt on every sweep and released afterwards.
template <class T>
void Tensor<T>::backward() const {
  if (!impl_) throw std::invalid_argument("backward() on undefined tensor");
  if (numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + gcaseg::to_string(shape()));
  if (!impl_->requires_grad) return;
  FlushDenormalsGuard ftz;

  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Impl* node : order)
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
  impl_->ensure_grad()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->is_leaf()) continue;
    node->backward_fn(*node);
    std::vector<T>().swap(node->grad);
  }
}

}  // namespace gcaseg
