#include "mxr/nn/layers.hpp"

#include <cmath>

#include "mxr/gradcheck.hpp"

namespace mxr::nn {

namespace {

template <typename T>
using TI = detail::TensorImpl<T>;

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2); saturates to 1 above 20.
template <typename T>
T tanh_softplus(T x) {
  if (x > T(20)) return T(1);
  const T e = std::exp(x);
  const T n = e * (e + T(2));
  return n / (n + T(2));
}

void require_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected an NCHW tensor, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> mish(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * tanh_softplus(xd[i]);
  auto xi = x.impl();
  detail::attach<T>(out, "mish", {&x}, [xi](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xi->data[i];
      const T t = tanh_softplus(v);
      const T sig = T(1) / (T(1) + std::exp(-v));
      gx[i] += o.grad[i] * (t + v * (T(1) - t * t) * sig);
    }
  });
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  require_nchw(x.shape(), "pixel_shuffle");
  if (r < 1) throw ContractError("pixel_shuffle: scale must be >= 1");
  const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), rr = std::int64_t{r} * r;
  if (Cin % rr != 0)
    throw DimensionError("pixel_shuffle: " + std::to_string(Cin) + " channels not divisible by r^2 = " +
                         std::to_string(rr));
  const std::int64_t C = Cin / rr, Ho = H * r, Wo = W * r;
  Tensor<T> out({N, C, Ho, Wo});
  // Flat source index for every output element.
  std::vector<std::int64_t> src(static_cast<std::size_t>(out.numel()));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          const std::int64_t i = oy % r, j = ox % r;
          src[((n * C + c) * Ho + oy) * Wo + ox] = ((n * Cin + c * rr + i * r + j) * H + oy / r) * W + ox / r;
        }
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t k = 0; k < src.size(); ++k) od[k] = xd[static_cast<std::size_t>(src[k])];
  auto xi = x.impl();
  detail::attach<T>(out, "pixel_shuffle", {&x}, [xi, src = std::move(src)](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::size_t k = 0; k < src.size(); ++k) gx[static_cast<std::size_t>(src[k])] += o.grad[k];
  });
  return out;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  require_nchw(x.shape(), "pixel_unshuffle");
  if (r < 1) throw ContractError("pixel_unshuffle: scale must be >= 1");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), rr = std::int64_t{r} * r;
  if (H % r != 0 || W % r != 0)
    throw DimensionError("pixel_unshuffle: spatial size of " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(r));
  const std::int64_t Ho = H / r, Wo = W / r, Co = C * rr;
  Tensor<T> out({N, Co, Ho, Wo});
  std::vector<std::int64_t> src(static_cast<std::size_t>(out.numel()));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Co; ++co)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx) {
          const std::int64_t c = co / rr, i = (co % rr) / r, j = co % r;
          src[((n * Co + co) * Ho + y) * Wo + xx] = ((n * C + c) * H + y * r + i) * W + xx * r + j;
        }
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t k = 0; k < src.size(); ++k) od[k] = xd[static_cast<std::size_t>(src[k])];
  auto xi = x.impl();
  detail::attach<T>(out, "pixel_unshuffle", {&x}, [xi, src = std::move(src)](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::size_t k = 0; k < src.size(); ++k) gx[static_cast<std::size_t>(src[k])] += o.grad[k];
  });
  return out;
}

template <typename T>
Tensor<T> blur(const Tensor<T>& x) {
  require_nchw(x.shape(), "blur");
  return avg_pool2d(x, 2, 1, PadMode::Replicate, Padding2d{1, 1, 0, 0});
}

template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, Rng& rng) {
  if (shape.size() != 4) throw DimensionError("kaiming_normal: expected a conv kernel shape, got " + shape_str(shape));
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  return randn<T>(shape, rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

template <typename T>
Tensor<T> icnr_init(std::int64_t c_out, std::int64_t c_in, int k, int r, const WeightSampler<T>& base_init, Rng& rng) {
  if (c_out < 1 || c_in < 1 || k < 1 || r < 1) throw ContractError("icnr_init: sizes must be positive");
  const Tensor<T> base = base_init(Shape{c_out, c_in, k, k}, rng);
  if (base.shape() != Shape{c_out, c_in, k, k})
    throw DimensionError("icnr_init: base sampler returned " + shape_str(base.shape()));
  const std::int64_t rr = std::int64_t{r} * r, filter = c_in * k * k;
  std::vector<T> w(static_cast<std::size_t>(c_out * rr * filter));
  for (std::int64_t c = 0; c < c_out; ++c)
    for (std::int64_t s = 0; s < rr; ++s)
      std::copy_n(base.data().data() + c * filter, filter, w.data() + (c * rr + s) * filter);
  return Tensor<T>({c_out * rr, c_in, k, k}, std::move(w));
}

// --- Conv2d / BatchNorm2d ----------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride_, int pad_, bool with_bias, Rng& rng)
    : Conv2d(kaiming_normal<T>({out, in, kernel, kernel}, rng), stride_, pad_, with_bias) {}

template <typename T>
Conv2d<T>::Conv2d(Tensor<T> w, int stride_, int pad_, bool with_bias) : stride(stride_), pad(pad_) {
  if (w.rank() != 4) throw DimensionError("Conv2d: weight must be rank 4, got " + shape_str(w.shape()));
  weight = this->register_parameter("weight", std::move(w));
  if (with_bias) bias = this->register_parameter("bias", Tensor<T>({weight.dim(0)}, T(0)));
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, T init_gamma) : state(BatchNormState<T>::make(channels)) {
  gamma = this->register_parameter("weight", Tensor<T>({channels}, init_gamma), false);
  beta = this->register_parameter("bias", Tensor<T>({channels}, T(0)), false);
  this->register_buffer("running_mean", state.running_mean);
  this->register_buffer("running_var", state.running_var);
}

// --- ConvBnAct -----------------------------------------------------------------

template <typename T>
ConvBnAct<T>::ConvBnAct(const ConvBnActSpec& spec, Rng& rng) : activation(spec.activation) {
  const int pad = spec.padding < 0 ? spec.kernel / 2 : spec.padding;
  conv = this->register_module(
      "conv", std::make_shared<Conv2d<T>>(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, pad,
                                          !spec.use_bn, rng));
  if (spec.use_bn)
    bn = this->register_module("bn", std::make_shared<BatchNorm2d<T>>(spec.out_channels, spec.zero_gamma ? T(0) : T(1)));
}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = conv->forward(x);
  if (bn) y = bn->forward(y);
  if (activation == Activation::Mish) y = mish(y);
  return y;
}

// --- residual blocks -----------------------------------------------------------

template <typename T>
XResnetBlock<T>::XResnetBlock(const XResnetBlockSpec& s, Rng& rng) : spec(s) {
  if (s.stride != 1 && s.stride != 2) throw ConfigError("XResnetBlock: stride must be 1 or 2");
  const auto in = s.in_channels, out = s.out_channels;
  if (s.kind == BlockKind::Basic) {
    main.push_back(std::make_shared<ConvBnAct<T>>(ConvBnActSpec{in, out, 3, s.stride}, rng));
    main.push_back(std::make_shared<ConvBnAct<T>>(
        ConvBnActSpec{out, out, 3, 1, -1, true, Activation::None, true}, rng));
  } else {
    const std::int64_t mid = std::max<std::int64_t>(1, out / 4);
    main.push_back(std::make_shared<ConvBnAct<T>>(ConvBnActSpec{in, mid, 1, 1}, rng));
    main.push_back(std::make_shared<ConvBnAct<T>>(ConvBnActSpec{mid, mid, 3, s.stride}, rng));
    main.push_back(std::make_shared<ConvBnAct<T>>(
        ConvBnActSpec{mid, out, 1, 1, -1, true, Activation::None, true}, rng));
  }
  for (std::size_t i = 0; i < main.size(); ++i) this->register_module("convs." + std::to_string(i), main[i]);
  if (in != out)
    projection = this->register_module(
        "idconv", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{in, out, 1, 1, -1, true, Activation::None}, rng));
}

template <typename T>
Tensor<T> XResnetBlock<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != spec.in_channels)
    throw DimensionError("XResnetBlock: expected " + std::to_string(spec.in_channels) + " input channels, got " +
                         shape_str(x.shape()));
  Tensor<T> y = x;
  for (auto& layer : main) y = layer->forward(y);
  Tensor<T> shortcut = x;
  if (spec.stride != 1) shortcut = avg_pool2d(shortcut, 2, 2);
  if (projection) shortcut = projection->forward(shortcut);
  if (y.shape() != shortcut.shape())
    throw DimensionError("XResnetBlock: residual paths disagree: " + shape_str(y.shape()) + " vs " +
                         shape_str(shortcut.shape()));
  return mish(add(y, shortcut));
}

template <typename T>
BasicResBlock<T>::BasicResBlock(std::int64_t channels, Rng& rng) {
  conv1 = this->register_module("conv1", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{channels, channels, 3, 1}, rng));
  conv2 = this->register_module(
      "conv2", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{channels, channels, 3, 1, -1, true, Activation::None}, rng));
}

template <typename T>
Tensor<T> BasicResBlock<T>::forward(const Tensor<T>& x) {
  return mish(add(conv2->forward(conv1->forward(x)), x));
}

// --- upsampling ------------------------------------------------------------------

template <typename T>
PixelShuffleUpsampler<T>::PixelShuffleUpsampler(std::int64_t in, std::int64_t out, int scale_, bool blur_, Rng& rng)
    : scale(scale_), use_blur(blur_) {
  WeightSampler<T> he = [](const Shape& s, Rng& g) { return kaiming_normal<T>(s, g); };
  conv = this->register_module("conv", std::make_shared<Conv2d<T>>(icnr_init<T>(out, in, 1, scale, he, rng), 1, 0, true));
}

template <typename T>
Tensor<T> PixelShuffleUpsampler<T>::upsample(const Tensor<T>& x) {
  return pixel_shuffle(conv->forward(x), scale);
}

template <typename T>
Tensor<T> PixelShuffleUpsampler<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = upsample(x);
  return use_blur ? blur(y) : y;
}

// --- attention -------------------------------------------------------------------

template <typename T>
SelfAttention<T>::SelfAttention(std::int64_t channels, Rng& rng) {
  const auto kw = key_width(channels);
  query = this->register_module("query", std::make_shared<Conv2d<T>>(channels, kw, 1, 1, 0, false, rng));
  key = this->register_module("key", std::make_shared<Conv2d<T>>(channels, kw, 1, 1, 0, false, rng));
  value = this->register_module("value", std::make_shared<Conv2d<T>>(channels, channels, 1, 1, 0, false, rng));
  gamma = this->register_parameter("gamma", Tensor<T>({1}, T(0)), false);
}

template <typename T>
Tensor<T> SelfAttention<T>::attention_map(const Tensor<T>& x) {
  require_nchw(x.shape(), "SelfAttention");
  const std::int64_t N = x.dim(0), HW = x.dim(2) * x.dim(3), kw = query->weight.dim(0);
  Tensor<T> q = reshape(query->forward(x), {N, kw, HW});
  Tensor<T> k = reshape(key->forward(x), {N, kw, HW});
  return softmax(matmul(transpose_last2(q), k), -1);
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& x) {
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> attn = attention_map(x);
  Tensor<T> v = reshape(value->forward(x), {N, C, HW});
  Tensor<T> o = reshape(matmul(v, transpose_last2(attn)), x.shape());
  return add(scale(o, gamma), x);
}

// --- decoder -----------------------------------------------------------------------

template <typename T>
UnetDecoderBlock<T>::UnetDecoderBlock(std::int64_t up_in_channels, std::int64_t skip_channels, bool blur_, Rng& rng) {
  const std::int64_t up_out = std::max<std::int64_t>(1, up_in_channels / 2);
  out_channels_ = up_out + skip_channels;
  upsampler = this->register_module("shuf", std::make_shared<PixelShuffleUpsampler<T>>(up_in_channels, up_out, 2, blur_, rng));
  conv1 = this->register_module("conv1", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{out_channels_, out_channels_, 3, 1}, rng));
  conv2 = this->register_module("conv2", std::make_shared<ConvBnAct<T>>(ConvBnActSpec{out_channels_, out_channels_, 3, 1}, rng));
}

template <typename T>
Tensor<T> UnetDecoderBlock<T>::forward(const Tensor<T>& up_in, const Tensor<T>& skip) {
  require_nchw(up_in.shape(), "UnetDecoderBlock up input");
  require_nchw(skip.shape(), "UnetDecoderBlock skip");
  if (up_in.dim(2) * 2 != skip.dim(2) || up_in.dim(3) * 2 != skip.dim(3) || up_in.dim(0) != skip.dim(0))
    throw DimensionError("UnetDecoderBlock: skip " + shape_str(skip.shape()) + " must be exactly twice the size of " +
                         shape_str(up_in.shape()));
  Tensor<T> up = upsampler->forward(up_in);
  return conv2->forward(conv1->forward(concat_channels<T>({up, skip})));
}

#define MXR_INSTANTIATE_LAYERS(T)                                                                             \
  template Tensor<T> mish<T>(const Tensor<T>&);                                                               \
  template Tensor<T> pixel_shuffle<T>(const Tensor<T>&, int);                                                 \
  template Tensor<T> pixel_unshuffle<T>(const Tensor<T>&, int);                                               \
  template Tensor<T> blur<T>(const Tensor<T>&);                                                               \
  template Tensor<T> kaiming_normal<T>(const Shape&, Rng&);                                                   \
  template Tensor<T> icnr_init<T>(std::int64_t, std::int64_t, int, int, const WeightSampler<T>&, Rng&);       \
  template class Conv2d<T>;                                                                                   \
  template class BatchNorm2d<T>;                                                                              \
  template class ConvBnAct<T>;                                                                                \
  template class XResnetBlock<T>;                                                                             \
  template class BasicResBlock<T>;                                                                            \
  template class PixelShuffleUpsampler<T>;                                                                    \
  template class SelfAttention<T>;                                                                            \
  template class UnetDecoderBlock<T>;

MXR_INSTANTIATE_LAYERS(float)
MXR_INSTANTIATE_LAYERS(double)

}  // namespace mxr::nn
