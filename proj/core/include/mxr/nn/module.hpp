#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mxr/tensor.hpp"

namespace mxr::nn {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // whether decoupled weight decay applies
};

/// Owner of named parameters, buffers and child modules.
///
/// Parameters and buffers are stored as tensor handles, so the registry and
/// the layer fields refer to the same storage.
template <typename T>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void train(bool on = true) {
    training_ = on;
    for (auto& [_, child] : children_) child->train(on);
  }
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    collect(out, "", false);
    return out;
  }

  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> out;
    collect(out, "", true);
    return out;
  }

  /// Parameters followed by buffers: everything a checkpoint stores.
  std::vector<NamedTensor<T>> state() const {
    auto out = parameters();
    auto b = buffers();
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Stops gradient tracking for every parameter.
  void freeze() {
    for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  }

 protected:
  Tensor<T> register_parameter(std::string name, Tensor<T> t, bool decay = true) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), t, decay});
    return t;
  }

  Tensor<T> register_buffer(std::string name, Tensor<T> t) {
    buffers_.push_back({std::move(name), t, false});
    return t;
  }

  template <class M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> m) {
    children_.emplace_back(std::move(name), m);
    return m;
  }

 private:
  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix, bool want_buffers) const {
    for (const auto& p : want_buffers ? buffers_ : params_) out.push_back({prefix + p.name, p.tensor, p.decay});
    for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".", want_buffers);
  }

  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
  bool training_ = true;
};

}  // namespace mxr::nn
