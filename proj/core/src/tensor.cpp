#include "mxr/tensor.hpp"

#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mxr {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

thread_local bool tls_grad_enabled = true;
std::atomic<bool> g_nan_guard{false};
std::atomic<int> g_threads{1};

void validate_shape(const Shape& shape) {
  for (auto e : shape)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

void set_nan_guard(bool on) { g_nan_guard = on; }
bool nan_guard() { return g_nan_guard; }

void set_num_threads(int threads) {
  if (threads < 1) throw ContractError("thread count must be >= 1");
  g_threads = threads;
  Eigen::setNbThreads(threads);
}
int num_threads() { return g_threads; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  validate_shape(shape);
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_->is_leaf()) throw ContractError("in-place edit of a non-leaf tensor");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank())
    throw DimensionError("index rank does not match shape " + shape_str(shape()));
  std::int64_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    const auto extent = impl_->shape[axis++];
    if (i < 0 || i >= extent) throw DimensionError("index out of range for shape " + shape_str(shape()));
    offset = offset * extent + i;
  }
  return impl_->data[static_cast<std::size_t>(offset)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!impl_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!has_grad()) return Tensor(shape(), T(0));
  return Tensor(shape(), impl_->grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw ContractError("backward() needs a single-element loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS; reversed it lists every node after all of its consumers.
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      Impl* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->is_leaf() || node->grad.empty()) continue;
    node->grad_fn->backward(*node);
    // Intermediate gradients are not needed once propagated.
    if (node != impl_.get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& out, const char* op) {
  for (T v : out.data())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mxr
