#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>

#include "mxr/nn/layers.hpp"

namespace mxr {

/// Positive rational width multiplier, kept exact so it round-trips through files.
struct WidthMultiplier {
  std::uint32_t num = 1;
  std::uint32_t den = 1;

  std::int64_t apply(std::int64_t channels) const {
    return std::max<std::int64_t>(1, channels * num / den);
  }
  double value() const { return static_cast<double>(num) / den; }
  /// Parses "0.125", "1/8" or "1".
  static WidthMultiplier parse(const std::string& text);
  std::string str() const;
  bool operator==(const WidthMultiplier&) const = default;
};

struct ModelConfig {
  int encoder_depth = 18;
  std::int64_t in_channels = 3;
  std::int64_t out_channels = 31;
  WidthMultiplier width;
  bool self_attention = true;
  bool blur = true;

  /// Throws ConfigError on unsupported settings.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Input resolution must be a multiple of this.
inline constexpr std::int64_t kSpatialMultiple = 32;

/// Shapes observed during one forward pass.
struct ForwardTrace {
  std::array<Shape, 4> taps;  // encoder skips, shallowest first
  Shape bottleneck;
  std::array<Shape, 4> decoder;
  Shape head_input;
};

/// mxresnet encoder: three-conv stem, max-pool, four residual stages.
template <typename T>
class XResnetEncoder : public nn::Module<T> {
 public:
  XResnetEncoder(int depth, WidthMultiplier width, std::int64_t in_channels, nn::Rng& rng);

  struct Output {
    std::array<Tensor<T>, 4> taps;  // 1/2 (stem, before the pool), 1/4, 1/8, 1/16
    Tensor<T> features;             // 1/32
  };

  Output forward(const Tensor<T>& x);
  /// Stem only: three conv layers then the max-pool (resolution 1/4).
  Tensor<T> stem_forward(const Tensor<T>& x);

  std::array<std::int64_t, 4> tap_channels() const { return tap_channels_; }
  std::int64_t out_channels() const { return out_channels_; }
  nn::BlockKind block_kind() const { return kind_; }
  const std::array<int, 4>& blocks_per_stage() const { return blocks_; }

  std::vector<std::shared_ptr<nn::ConvBnAct<T>>> stem;
  std::array<std::vector<std::shared_ptr<nn::XResnetBlock<T>>>, 4> stages;

 private:
  std::array<std::int64_t, 4> tap_channels_{};
  std::int64_t out_channels_ = 0;
  nn::BlockKind kind_ = nn::BlockKind::Basic;
  std::array<int, 4> blocks_{};
};

/// U-Net with an mxresnet encoder, a two-conv bottleneck, four pixel-shuffle
/// decoder blocks (self-attention after the second), a final 2× upsampler and
/// a head that sees the raw input again.
template <typename T>
class MXRUNet : public nn::Module<T> {
 public:
  MXRUNet(const ModelConfig& cfg, nn::Rng& rng);

  /// rgb[N, in, H, W] with H, W multiples of 32 → [N, out, H, W].
  Tensor<T> forward(const Tensor<T>& rgb, ForwardTrace* trace = nullptr);

  const ModelConfig& config() const { return config_; }

  std::shared_ptr<XResnetEncoder<T>> encoder;
  std::shared_ptr<nn::ConvBnAct<T>> middle1, middle2;
  std::array<std::shared_ptr<nn::UnetDecoderBlock<T>>, 4> decoder;
  std::shared_ptr<nn::SelfAttention<T>> attention;  // null when disabled
  std::shared_ptr<nn::PixelShuffleUpsampler<T>> final_up;
  std::shared_ptr<nn::BasicResBlock<T>> head_block;
  std::shared_ptr<nn::Conv2d<T>> head_conv;

 private:
  ModelConfig config_;
};

template <typename T>
std::shared_ptr<XResnetEncoder<T>> build_mxresnet(int depth, WidthMultiplier width, std::uint64_t seed,
                                                  std::int64_t in_channels = 3);

template <typename T>
std::shared_ptr<MXRUNet<T>> build_unet(const ModelConfig& cfg, std::uint64_t seed);

/// Total trainable scalars: weights, biases, norm scales/shifts, attention gate.
template <typename T>
std::int64_t count_params(const nn::Module<T>& model) {
  return model.parameter_count();
}

}  // namespace mxr
