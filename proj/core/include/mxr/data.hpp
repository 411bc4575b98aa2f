#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mxr/errors.hpp"
#include "mxr/tensor.hpp"

namespace mxr {

/// Channel-major float raster. The tag keeps RGB inputs and spectral cubes apart.
template <class Tag>
struct Planar {
  std::int64_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Planar() = default;
  Planar(std::int64_t c, std::int64_t h, std::int64_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c * h * w), fill) {}

  float& at(std::int64_t c, std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  std::int64_t numel() const { return channels * height * width; }
  Shape shape() const { return {channels, height, width}; }
  bool operator==(const Planar&) const = default;
};

struct RgbTag {};
struct CubeTag {};
using RgbImage = Planar<RgbTag>;   // 3 channels, values in [0, 1]
using HyperCube = Planar<CubeTag>; // 31 bands

struct Sample {
  std::string name;
  RgbImage rgb;
  HyperCube cube;
};

/// Stacks same-sized rasters into an [N, C, H, W] tensor.
template <typename T, class Tag>
Tensor<T> stack(const std::vector<const Planar<Tag>*>& items) {
  if (items.empty()) throw ContractError("stack: no items");
  const auto& f = *items.front();
  std::vector<T> out;
  out.reserve(items.size() * static_cast<std::size_t>(f.numel()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != f.shape())
      throw DimensionError("stack: item " + std::to_string(i) + " has shape " + shape_str(items[i]->shape()) +
                           ", expected " + shape_str(f.shape()));
    out.insert(out.end(), items[i]->data.begin(), items[i]->data.end());
  }
  return Tensor<T>({static_cast<std::int64_t>(items.size()), f.channels, f.height, f.width}, std::move(out));
}

template <typename T, class Tag>
Tensor<T> to_tensor(const Planar<Tag>& p) {
  return stack<T, Tag>({&p});
}

/// Batch entry `n` of an [N, C, H, W] tensor.
template <class Tag, typename T>
Planar<Tag> from_tensor(const Tensor<T>& t, std::int64_t n = 0) {
  if (t.rank() != 4 || n < 0 || n >= t.dim(0))
    throw DimensionError("from_tensor: cannot take entry " + std::to_string(n) + " of " + shape_str(t.shape()));
  Planar<Tag> p(t.dim(1), t.dim(2), t.dim(3));
  const T* src = t.data().data() + n * p.numel();
  for (std::int64_t i = 0; i < p.numel(); ++i) p.data[static_cast<std::size_t>(i)] = static_cast<float>(src[i]);
  return p;
}

}  // namespace mxr
