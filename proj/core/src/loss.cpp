#include "mxr/loss.hpp"

namespace mxr {

template <typename T>
Tensor<T> adapt_input_layer(const Tensor<T>& w3, std::int64_t channels) {
  if (w3.rank() != 4 || w3.dim(1) != 3)
    throw DimensionError("adapt_input_layer: expected a [Co,3,kh,kw] kernel, got " + shape_str(w3.shape()));
  if (channels < 1) throw ContractError("adapt_input_layer: channel count must be positive");
  const std::int64_t co = w3.dim(0), plane = w3.dim(2) * w3.dim(3);
  std::vector<T> w(static_cast<std::size_t>(co * channels * plane));
  const T* src = w3.data().data();
  for (std::int64_t o = 0; o < co; ++o)
    for (std::int64_t c = 0; c < channels; ++c)
      std::copy_n(src + (o * 3 + c % 3) * plane, plane, w.data() + (o * channels + c) * plane);
  return Tensor<T>({co, channels, w3.dim(2), w3.dim(3)}, std::move(w));
}

template <typename T>
LossNetwork<T>::LossNetwork(const LossNetworkConfig& cfg, nn::Rng& rng) : config_(cfg) {
  if (cfg.in_channels < 1) throw ConfigError("loss network needs at least one input channel");
  std::int64_t c = cfg.in_channels;
  for (std::size_t i = 0; i < kWidths.size(); ++i) {
    const std::int64_t out = cfg.width.apply(kWidths[i]);
    Tensor<T> w = i == 0 ? adapt_input_layer(nn::kaiming_normal<T>({out, 3, 3, 3}, rng), c)
                         : nn::kaiming_normal<T>({out, c, 3, 3}, rng);
    convs.push_back(this->register_module("features." + std::to_string(i),
                                          std::make_shared<nn::Conv2d<T>>(std::move(w), 1, 1, true)));
    c = out;
  }
  this->freeze();
  this->eval();
}

template <typename T>
std::array<Tensor<T>, 3> LossNetwork<T>::extract_features(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels)
    throw DimensionError("loss network: expected [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                         shape_str(x.shape()));
  if (x.dim(2) < 8 || x.dim(3) < 8)
    throw DimensionError("loss network: input " + shape_str(x.shape()) + " is smaller than 8x8");
  std::array<Tensor<T>, 3> taps;
  Tensor<T> y = x;
  std::size_t pool = 0;
  for (std::size_t i = 0; i < convs.size() && pool < 4; ++i) {
    y = relu(convs[i]->forward(y));
    if (static_cast<int>(i) == kPoolAfter[pool]) {
      if (pool >= 1) taps[pool - 1] = y;
      if (++pool == 4) break;
      y = max_pool2d(y, 2, 2);
    }
  }
  return taps;
}

template <typename T>
std::shared_ptr<LossNetwork<T>> build_loss_network(const LossNetworkConfig& cfg, std::uint64_t seed) {
  nn::Rng rng(seed);
  return std::make_shared<LossNetwork<T>>(cfg, rng);
}

template <typename T>
Tensor<T> feature_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean(abs(sub(pred, target)));
}

template <typename T>
Tensor<T> gram(const Tensor<T>& phi) {
  if (phi.rank() != 4) throw DimensionError("gram: expected an NCHW feature map, got " + shape_str(phi.shape()));
  const std::int64_t N = phi.dim(0), C = phi.dim(1), HW = phi.dim(2) * phi.dim(3);
  Tensor<T> psi = reshape(phi, {N, C, HW});
  return mul_scalar(matmul(psi, transpose_last2(psi)), T(1) / static_cast<T>(C * HW));
}

template <typename T>
Tensor<T> style_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("style_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  return mean(abs(sub(gram(pred), gram(target))));
}

template <typename T>
Tensor<T> pixel_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean(square(sub(pred, target)));
}

void LossWeights::validate() const {
  bool positive = gamma > 0;
  if (gamma < 0) throw ConfigError("loss weight gamma must be non-negative");
  for (int j = 0; j < 3; ++j) {
    if (alpha[j] < 0 || beta[j] < 0) throw ConfigError("loss weights alpha/beta must be non-negative");
    positive = positive || alpha[j] > 0 || beta[j] > 0;
  }
  if (!positive) throw ConfigError("at least one loss weight must be positive");
}

bool LossWeights::needs_features() const {
  for (int j = 0; j < 3; ++j)
    if (alpha[j] > 0 || beta[j] > 0) return true;
  return false;
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, LossNetwork<T>* net, const LossWeights& w) {
  w.validate();
  if (pred.shape() != target.shape())
    throw DimensionError("total_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  LossTerms<T> terms;
  std::vector<Tensor<T>> parts;
  if (w.needs_features()) {
    if (!net) throw ContractError("total_loss: feature/style weights set but no loss network given");
    auto fp = net->extract_features(pred);
    std::array<Tensor<T>, 3> ft;
    {
      NoGradGuard no_grad;
      ft = net->extract_features(target.detach());
    }
    for (std::size_t j = 0; j < 3; ++j) {
      if (w.alpha[j] > 0) {
        Tensor<T> f = feature_loss(fp[j], ft[j]);
        terms.feature[j] = f.item();
        parts.push_back(mul_scalar(f, static_cast<T>(w.alpha[j])));
      }
      if (w.beta[j] > 0) {
        Tensor<T> s = style_loss(fp[j], ft[j]);
        terms.style[j] = s.item();
        parts.push_back(mul_scalar(s, static_cast<T>(w.beta[j])));
      }
    }
  }
  if (w.gamma > 0) {
    Tensor<T> p = pixel_loss(pred, target);
    terms.pixel = p.item();
    parts.push_back(w.gamma == 1.0 ? p : mul_scalar(p, static_cast<T>(w.gamma)));
  }
  Tensor<T> total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  terms.total = total;
  return terms;
}

#define MXR_INSTANTIATE_LOSS(T)                                                                   \
  template Tensor<T> adapt_input_layer<T>(const Tensor<T>&, std::int64_t);                        \
  template class LossNetwork<T>;                                                                  \
  template std::shared_ptr<LossNetwork<T>> build_loss_network<T>(const LossNetworkConfig&, std::uint64_t); \
  template Tensor<T> feature_loss<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> gram<T>(const Tensor<T>&);                                                   \
  template Tensor<T> style_loss<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> pixel_loss<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template LossTerms<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&, LossNetwork<T>*, const LossWeights&);

MXR_INSTANTIATE_LOSS(float)
MXR_INSTANTIATE_LOSS(double)

}  // namespace mxr
