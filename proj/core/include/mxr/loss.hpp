#pragma once

#include <array>
#include <memory>

#include "mxr/model.hpp"
#include "mxr/nn/layers.hpp"

namespace mxr {

struct LossNetworkConfig {
  std::int64_t in_channels = 31;
  WidthMultiplier width;  // scales the 64..512 VGG16 widths; 1 for the standard network
  bool operator==(const LossNetworkConfig&) const = default;
};

/// Frozen VGG16-shaped feature extractor (13 conv + ReLU, 5 max-pools).
/// Features are tapped right before the second, third and fourth pool.
template <typename T>
class LossNetwork : public nn::Module<T> {
 public:
  /// Seeded random weights. The first layer is drawn with 3 input channels and
  /// widened by adapt_input_layer, as it would be for pretrained weights.
  LossNetwork(const LossNetworkConfig& cfg, nn::Rng& rng);

  /// Taps at H/2, H/4, H/8 with 128, 256, 512 channels (times the width multiplier).
  std::array<Tensor<T>, 3> extract_features(const Tensor<T>& x);

  const LossNetworkConfig& config() const { return config_; }
  static constexpr std::array<int, 13> kWidths{64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  /// A max-pool follows these conv indices.
  static constexpr std::array<int, 5> kPoolAfter{1, 3, 6, 9, 12};

  std::vector<std::shared_ptr<nn::Conv2d<T>>> convs;

 private:
  LossNetworkConfig config_;
};

/// Widens a 3-input-channel kernel to `channels` inputs: destination channel c
/// copies source channel c mod 3. No rescaling.
template <typename T>
Tensor<T> adapt_input_layer(const Tensor<T>& w3, std::int64_t channels = 31);

template <typename T>
std::shared_ptr<LossNetwork<T>> build_loss_network(const LossNetworkConfig& cfg, std::uint64_t seed);

/// Mean absolute difference of two feature maps.
template <typename T>
Tensor<T> feature_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// ψψᵀ / (C·H·W) per batch entry, ψ being the map reshaped to C × HW. Result [N, C, C].
template <typename T>
Tensor<T> gram(const Tensor<T>& phi);

/// Mean absolute difference of the Gram matrices.
template <typename T>
Tensor<T> style_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// Squared L2 distance divided by C·H·W, averaged over the batch.
template <typename T>
Tensor<T> pixel_loss(const Tensor<T>& pred, const Tensor<T>& target);

struct LossWeights {
  std::array<double, 3> alpha{1.0, 1.0, 1.0};
  std::array<double, 3> beta{5e3, 5e3, 5e3};
  double gamma = 1.0;

  static LossWeights pixel_only() { return {{0, 0, 0}, {0, 0, 0}, 1.0}; }
  void validate() const;
  bool needs_features() const;
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  std::array<double, 3> feature{};
  std::array<double, 3> style{};
  double pixel = 0;
};

/// Σ α_j·feature_j + Σ β_j·style_j + γ·pixel. Terms with zero weight are not
/// evaluated, and `net` may be null when no feature term is active.
template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, LossNetwork<T>* net, const LossWeights& w);

}  // namespace mxr
