#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mxr/errors.hpp"

namespace mxr {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded primitive. `backward` reads the output's gradient and
// accumulates into the gradients of `inputs`.
template <typename T>
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  bool is_leaf() const { return grad_fn == nullptr; }

  // Zero-filled on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a handle: copies share storage and autograd state. Forward
/// ops never mutate their inputs; only leaves may be edited in place (for
/// initialization, optimizer updates and checkpoint loading).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Extent of axis `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  /// Gradient as a fresh constant tensor (zeros when none accumulated).
  Tensor grad_tensor() const;
  /// Drops the accumulated gradient; the next backward starts from zero.
  void zero_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  /// Reverse sweep from a single-element tensor. Gradients accumulate (+=).
  void backward() const;

  /// Constant copy outside any graph.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Global autograd / debug switches.

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When on, every op checks its output for NaN/Inf and throws NumericError.
void set_nan_guard(bool on);
bool nan_guard();

/// Worker threads used by the matrix kernels.
void set_num_threads(int threads);
int num_threads();

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void check_finite(const Tensor<T>& out, const char* op);

/// Records `fn` as the producer of `out` when any input needs a gradient.
template <typename T>
void attach(Tensor<T>& out, const char* name, std::initializer_list<const Tensor<T>*> inputs,
            std::function<void(const TensorImpl<T>&)> fn) {
  if (nan_guard()) check_finite(out, name);
  if (!grad_enabled() || !any_requires_grad<T>(inputs)) return;
  auto node = std::make_shared<Node<T>>();
  node->name = name;
  for (const auto* t : inputs)
    if (t && t->defined()) node->inputs.push_back(t->impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

/// Same as attach, for ops with a runtime-sized input list.
template <typename T>
void attach_many(Tensor<T>& out, const char* name, const std::vector<Tensor<T>>& inputs,
                 std::function<void(const TensorImpl<T>&)> fn) {
  if (nan_guard()) check_finite(out, name);
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  auto node = std::make_shared<Node<T>>();
  node->name = name;
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mxr
