#include "mxr/model.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

namespace mxr {

using nn::ConvBnAct;
using nn::ConvBnActSpec;

WidthMultiplier WidthMultiplier::parse(const std::string& text) {
  auto fail = [&] { return ConfigError("invalid width multiplier '" + text + "' (expected e.g. 1, 0.125 or 1/8)"); };
  if (text.empty()) throw fail();
  const auto slash = text.find('/');
  if (slash != std::string::npos) {
    std::uint32_t num = 0, den = 0;
    const char* b = text.data();
    auto r1 = std::from_chars(b, b + slash, num);
    auto r2 = std::from_chars(b + slash + 1, b + text.size(), den);
    if (r1.ec != std::errc{} || r1.ptr != b + slash || r2.ec != std::errc{} || r2.ptr != b + text.size() || !num || !den)
      throw fail();
    const auto g = std::gcd(num, den);
    return {num / g, den / g};
  }
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw fail();
  }
  if (used != text.size() || !(v > 0)) throw fail();
  // Decimal input: represent over a power-of-two denominator, exact for dyadic values.
  constexpr std::uint32_t kDen = 1u << 16;
  const auto num = static_cast<std::uint32_t>(std::llround(v * kDen));
  if (num == 0) throw fail();
  const auto g = std::gcd(num, kDen);
  return {num / g, kDen / g};
}

std::string WidthMultiplier::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

void ModelConfig::validate() const {
  if (encoder_depth != 18 && encoder_depth != 34 && encoder_depth != 50)
    throw ConfigError("unsupported encoder depth " + std::to_string(encoder_depth) + " (expected 18, 34 or 50)");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (out_channels < 1) throw ConfigError("out_channels must be >= 1");
  if (width.num == 0 || width.den == 0) throw ConfigError("width multiplier must be positive");
  if (64 * static_cast<std::int64_t>(width.num) < 8 * static_cast<std::int64_t>(width.den))
    throw ConfigError("width multiplier " + width.str() + " too small: 64 * multiplier must be >= 8");
}

// --- encoder ---------------------------------------------------------------------

template <typename T>
XResnetEncoder<T>::XResnetEncoder(int depth, WidthMultiplier width, std::int64_t in_channels, nn::Rng& rng) {
  switch (depth) {
    case 18: blocks_ = {2, 2, 2, 2}; kind_ = nn::BlockKind::Basic; break;
    case 34: blocks_ = {3, 4, 6, 3}; kind_ = nn::BlockKind::Basic; break;
    case 50: blocks_ = {3, 4, 6, 3}; kind_ = nn::BlockKind::Bottleneck; break;
    default: throw ConfigError("unsupported encoder depth " + std::to_string(depth) + " (expected 18, 34 or 50)");
  }
  const std::int64_t expansion = kind_ == nn::BlockKind::Bottleneck ? 4 : 1;
  const std::array<std::int64_t, 3> stem_widths{width.apply(32), width.apply(32), width.apply(64)};
  std::int64_t c = in_channels;
  for (std::size_t i = 0; i < stem_widths.size(); ++i) {
    stem.push_back(this->register_module(
        "stem." + std::to_string(i),
        std::make_shared<ConvBnAct<T>>(ConvBnActSpec{c, stem_widths[i], 3, i == 0 ? 2 : 1}, rng)));
    c = stem_widths[i];
  }
  tap_channels_[0] = c;
  const std::array<std::int64_t, 4> base{64, 128, 256, 512};
  for (std::size_t s = 0; s < 4; ++s) {
    const std::int64_t out = width.apply(base[s]) * expansion;
    for (int b = 0; b < blocks_[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      stages[s].push_back(this->register_module(
          "stages." + std::to_string(s) + "." + std::to_string(b),
          std::make_shared<nn::XResnetBlock<T>>(nn::XResnetBlockSpec{kind_, b == 0 ? c : out, out, stride}, rng)));
    }
    c = out;
    if (s < 3) tap_channels_[s + 1] = c;
  }
  out_channels_ = c;
}

template <typename T>
Tensor<T> XResnetEncoder<T>::stem_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& layer : stem) y = layer->forward(y);
  return max_pool2d(y, 3, 2, 1);
}

template <typename T>
typename XResnetEncoder<T>::Output XResnetEncoder<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("encoder: expected an NCHW input, got " + shape_str(x.shape()));
  if (x.dim(2) < 8 || x.dim(3) < 8)
    throw DimensionError("encoder: spatial size of " + shape_str(x.shape()) + " is below the 8x8 minimum");
  Output out;
  Tensor<T> y = x;
  for (auto& layer : stem) y = layer->forward(y);
  out.taps[0] = y;
  y = max_pool2d(y, 3, 2, 1);
  for (std::size_t s = 0; s < 4; ++s) {
    for (auto& block : stages[s]) y = block->forward(y);
    if (s < 3) out.taps[s + 1] = y;
  }
  out.features = y;
  return out;
}

// --- U-Net ---------------------------------------------------------------------------

template <typename T>
MXRUNet<T>::MXRUNet(const ModelConfig& cfg, nn::Rng& rng) : config_(cfg) {
  cfg.validate();
  encoder = this->register_module(
      "encoder", std::make_shared<XResnetEncoder<T>>(cfg.encoder_depth, cfg.width, cfg.in_channels, rng));
  const std::int64_t c = encoder->out_channels();
  middle1 = this->register_module("middle.0", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{c, 2 * c, 3, 1}, rng));
  middle2 = this->register_module("middle.1", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{2 * c, c, 3, 1}, rng));
  std::int64_t width = c;
  const auto taps = encoder->tap_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    decoder[i] = this->register_module(
        "decoder." + std::to_string(i),
        std::make_shared<nn::UnetDecoderBlock<T>>(width, taps[3 - i], cfg.blur, rng));
    width = decoder[i]->out_channels();
    if (i == 1 && cfg.self_attention)
      attention = this->register_module("attention", std::make_shared<nn::SelfAttention<T>>(width, rng));
  }
  const std::int64_t up = std::max<std::int64_t>(1, width / 2);
  final_up = this->register_module("final_up", std::make_shared<nn::PixelShuffleUpsampler<T>>(width, up, 2, cfg.blur, rng));
  head_block = this->register_module("head.res", std::make_shared<nn::BasicResBlock<T>>(up + cfg.in_channels, rng));
  head_conv = this->register_module(
      "head.conv", std::make_shared<nn::Conv2d<T>>(up + cfg.in_channels, cfg.out_channels, 1, 1, 0, true, rng));
}

template <typename T>
Tensor<T> MXRUNet<T>::forward(const Tensor<T>& rgb, ForwardTrace* trace) {
  if (rgb.rank() != 4 || rgb.dim(1) != config_.in_channels)
    throw DimensionError("MXRUNet: expected input [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                         shape_str(rgb.shape()));
  if (rgb.dim(2) % kSpatialMultiple != 0 || rgb.dim(3) % kSpatialMultiple != 0)
    throw DimensionError("MXRUNet: spatial size " + std::to_string(rgb.dim(2)) + "x" + std::to_string(rgb.dim(3)) +
                         " is not a multiple of 32; pad the image (e.g. reflect) to the next multiple of 32 and "
                         "crop the output back");
  auto enc = encoder->forward(rgb);
  Tensor<T> y = middle2->forward(middle1->forward(enc.features));
  if (trace) {
    for (std::size_t i = 0; i < 4; ++i) trace->taps[i] = enc.taps[i].shape();
    trace->bottleneck = y.shape();
  }
  enc.features = Tensor<T>();
  for (std::size_t i = 0; i < 4; ++i) {
    y = decoder[i]->forward(y, enc.taps[3 - i]);
    enc.taps[3 - i] = Tensor<T>();
    if (i == 1 && attention) y = attention->forward(y);
    if (trace) trace->decoder[i] = y.shape();
  }
  y = concat_channels<T>({final_up->forward(y), rgb});
  if (trace) trace->head_input = y.shape();
  return head_conv->forward(head_block->forward(y));
}

template <typename T>
std::shared_ptr<XResnetEncoder<T>> build_mxresnet(int depth, WidthMultiplier width, std::uint64_t seed,
                                                  std::int64_t in_channels) {
  nn::Rng rng(seed);
  return std::make_shared<XResnetEncoder<T>>(depth, width, in_channels, rng);
}

template <typename T>
std::shared_ptr<MXRUNet<T>> build_unet(const ModelConfig& cfg, std::uint64_t seed) {
  nn::Rng rng(seed);
  return std::make_shared<MXRUNet<T>>(cfg, rng);
}

template class XResnetEncoder<float>;
template class XResnetEncoder<double>;
template class MXRUNet<float>;
template class MXRUNet<double>;
template std::shared_ptr<XResnetEncoder<float>> build_mxresnet<float>(int, WidthMultiplier, std::uint64_t, std::int64_t);
template std::shared_ptr<XResnetEncoder<double>> build_mxresnet<double>(int, WidthMultiplier, std::uint64_t, std::int64_t);
template std::shared_ptr<MXRUNet<float>> build_unet<float>(const ModelConfig&, std::uint64_t);
template std::shared_ptr<MXRUNet<double>> build_unet<double>(const ModelConfig&, std::uint64_t);

}  // namespace mxr
