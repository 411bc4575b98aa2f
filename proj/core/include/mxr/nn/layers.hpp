#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <random>

#include "mxr/nn/module.hpp"
#include "mxr/ops.hpp"

namespace mxr::nn {

using Rng = std::mt19937_64;

template <typename T>
using WeightSampler = std::function<Tensor<T>(const Shape&, Rng&)>;

// --- functional layers -------------------------------------------------------

/// x · tanh(softplus(x)), elementwise.
template <typename T>
Tensor<T> mish(const Tensor<T>& x);

/// [N, C·r², H, W] → [N, C, r·H, r·W] with
/// out[n, c, h·r+i, w·r+j] = in[n, c·r² + i·r + j, h, w].
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);

/// Inverse rearrangement of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r);

/// Size-preserving 2×2 stride-1 mean after replicating one row on top and one
/// column on the left.
template <typename T>
Tensor<T> blur(const Tensor<T>& x);

/// He-normal weights for a conv kernel [Co, Ci, kh, kw] (fan-in mode).
template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, Rng& rng);

/// Sub-pixel conv weight [c_out·r², c_in, k, k]: a base kernel drawn from
/// `base_init` with every filter repeated in its r² consecutive slots, so that
/// pixel_shuffle(conv(x)) starts out as a nearest-neighbour upsampling.
template <typename T>
Tensor<T> icnr_init(std::int64_t c_out, std::int64_t c_in, int k, int r, const WeightSampler<T>& base_init, Rng& rng);

// --- modules -------------------------------------------------------------------

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int pad, bool bias, Rng& rng);
  /// Takes ownership of an explicit weight (e.g. ICNR); bias starts at zero.
  Conv2d(Tensor<T> weight, int stride, int pad, bool bias);

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer has no bias
  int stride;
  int pad;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::int64_t channels, T init_gamma = T(1));

  Tensor<T> forward(const Tensor<T>& x) { return batch_norm2d(x, gamma, beta, state, this->is_training()); }

  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;
};

enum class Activation { Mish, None };

struct ConvBnActSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = -1;  // -1: kernel / 2
  bool use_bn = true;
  Activation activation = Activation::Mish;
  bool zero_gamma = false;  // start the norm's scale at zero (residual branches)
};

template <typename T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct(const ConvBnActSpec& spec, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);

  std::shared_ptr<Conv2d<T>> conv;
  std::shared_ptr<BatchNorm2d<T>> bn;  // null when !use_bn
  Activation activation;
};

enum class BlockKind { Basic, Bottleneck };

struct XResnetBlockSpec {
  BlockKind kind = BlockKind::Basic;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int stride = 1;
};

/// Resnet-D residual block: stride on the 3×3 conv; the shortcut average-pools
/// before its 1×1 projection. Mish after the residual sum.
template <typename T>
class XResnetBlock : public Module<T> {
 public:
  XResnetBlock(const XResnetBlockSpec& spec, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);

  XResnetBlockSpec spec;
  std::vector<std::shared_ptr<ConvBnAct<T>>> main;
  std::shared_ptr<ConvBnAct<T>> projection;  // null for an identity channel path
};

/// Plain two-conv residual block with identity shortcut.
template <typename T>
class BasicResBlock : public Module<T> {
 public:
  BasicResBlock(std::int64_t channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);

  std::shared_ptr<ConvBnAct<T>> conv1, conv2;
};

/// 1×1 conv to out·r² channels (ICNR-initialized), pixel shuffle, optional blur.
template <typename T>
class PixelShuffleUpsampler : public Module<T> {
 public:
  PixelShuffleUpsampler(std::int64_t in, std::int64_t out, int scale, bool blur, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  /// Shuffle output before the blur.
  Tensor<T> upsample(const Tensor<T>& x);

  std::shared_ptr<Conv2d<T>> conv;
  int scale;
  bool use_blur;
};

/// Self-attention over spatial positions with a residual gate initialized to 0.
template <typename T>
class SelfAttention : public Module<T> {
 public:
  SelfAttention(std::int64_t channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  /// Attention weights [N, HW, HW]; row j holds the weights output position j
  /// assigns to every key position.
  Tensor<T> attention_map(const Tensor<T>& x);

  static std::int64_t key_width(std::int64_t channels) { return std::max<std::int64_t>(1, channels / 8); }

  std::shared_ptr<Conv2d<T>> query, key, value;
  Tensor<T> gamma;
};

/// Upsample the deeper input 2×, concatenate the skip tensor, two conv layers.
template <typename T>
class UnetDecoderBlock : public Module<T> {
 public:
  UnetDecoderBlock(std::int64_t up_in_channels, std::int64_t skip_channels, bool blur, Rng& rng);

  Tensor<T> forward(const Tensor<T>& up_in, const Tensor<T>& skip);

  std::int64_t out_channels() const { return out_channels_; }

  std::shared_ptr<PixelShuffleUpsampler<T>> upsampler;
  std::shared_ptr<ConvBnAct<T>> conv1, conv2;

 private:
  std::int64_t out_channels_;
};

}  // namespace mxr::nn
