#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mxr/gradcheck.hpp"
#include "mxr/nn/layers.hpp"

using namespace mxr;
using namespace mxr::nn;
using D = double;

TEST(Mish, MatchesClosedForm) {
  Tensor<D> x({7}, std::vector<D>{-30, -3, -0.5, 0, 0.5, 3, 30});
  const auto y = mish(x);
  for (int i = 0; i < 7; ++i) {
    const D v = x.data()[i];
    EXPECT_NEAR(y.data()[i], v * std::tanh(std::log1p(std::exp(v))), 1e-12) << v;
  }
}

TEST(PixelShuffle, IndexFormula) {
  const int r = 3;
  std::vector<D> v(2 * 2 * 9 * 2 * 3);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<D>(i);
  Tensor<D> x({2, 2 * 9, 2, 3}, v);
  const auto y = pixel_shuffle(x, r);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 9}));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t h = 0; h < 2; ++h)
        for (std::int64_t w = 0; w < 3; ++w)
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < r; ++j)
              EXPECT_EQ(y.at({n, c, h * r + i, w * r + j}), x.at({n, c * r * r + i * r + j, h, w}));
  EXPECT_THROW(pixel_shuffle(Tensor<D>({1, 5, 2, 2}), 2), DimensionError);
}

TEST(PixelShuffle, UnshuffleIsExactInverse) {
  std::mt19937_64 rng(1);
  const auto x = randn<D>({1, 8, 3, 5}, rng);
  const auto back = pixel_unshuffle(pixel_shuffle(x, 2), 2);
  ASSERT_EQ(back.shape(), x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(Blur, HandValues) {
  Tensor<D> x({1, 1, 2, 2}, std::vector<D>{1, 2, 3, 4});
  const auto y = blur(x);
  const std::vector<D> want{1.0, 1.5, 2.0, 2.5};
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.data()[i], want[i]);
}

TEST(Icnr, RepeatsBaseFilterInEachGroup) {
  Rng rng(2);
  WeightSampler<D> he = [](const Shape& s, Rng& g) { return kaiming_normal<D>(s, g); };
  const auto w = icnr_init<D>(3, 4, 1, 2, he, rng);
  ASSERT_EQ(w.shape(), (Shape{12, 4, 1, 1}));
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t s = 1; s < 4; ++s)
      for (std::int64_t i = 0; i < 4; ++i) EXPECT_EQ(w.at({c * 4 + s, i, 0, 0}), w.at({c * 4, i, 0, 0}));
}

TEST(Icnr, UpsamplerStartsAsNearestNeighbour) {
  Rng rng(3);
  PixelShuffleUpsampler<D> up(4, 2, 2, false, rng);
  auto x = randn<D>({1, 4, 3, 3}, rng);
  const auto y = up.forward(x);
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t h = 0; h < 6; ++h)
      for (std::int64_t w = 0; w < 6; ++w) EXPECT_EQ(y.at({0, c, h, w}), y.at({0, c, h - h % 2, w - w % 2}));
}

TEST(KaimingNormal, StandardDeviation) {
  Rng rng(4);
  const auto w = kaiming_normal<D>({256, 64, 3, 3}, rng);
  D s = 0, ss = 0;
  for (D v : w.data()) {
    s += v;
    ss += v * v;
  }
  const D n = static_cast<D>(w.numel());
  const D sd = std::sqrt(ss / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, std::sqrt(2.0 / (64 * 9)), 0.01 * std::sqrt(2.0 / (64 * 9)));
}

TEST(SelfAttention, ZeroGateIsIdentity) {
  Rng rng(5);
  SelfAttention<float> att(16, rng);
  std::mt19937_64 g(6);
  const auto x = randn<float>({2, 16, 4, 3}, g);
  const auto y = att.forward(x);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(SelfAttention, MatchesDenseReference) {
  Rng rng(7);
  const std::int64_t C = 16, H = 3, W = 2, N = H * W;
  SelfAttention<D> att(C, rng);
  att.gamma.mutable_data()[0] = 0.7;
  std::mt19937_64 g(8);
  const auto x = randn<D>({1, C, H, W}, g);
  const auto y = att.forward(x);

  Eigen::MatrixXd X(C, N);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < N; ++p) X(c, p) = x.data()[c * N + p];
  auto mat = [](const Tensor<D>& w) {
    Eigen::MatrixXd m(w.dim(0), w.dim(1));
    for (std::int64_t i = 0; i < m.rows(); ++i)
      for (std::int64_t j = 0; j < m.cols(); ++j) m(i, j) = w.at({i, j, 0, 0});
    return m;
  };
  const Eigen::MatrixXd Q = mat(att.query->weight) * X, K = mat(att.key->weight) * X, V = mat(att.value->weight) * X;
  Eigen::MatrixXd S = Q.transpose() * K;  // S(j, i): query position j, key position i
  for (Eigen::Index j = 0; j < S.rows(); ++j) {
    S.row(j).array() = (S.row(j).array() - S.row(j).maxCoeff()).exp();
    S.row(j) /= S.row(j).sum();
  }
  const Eigen::MatrixXd O = V * S.transpose();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < N; ++p) EXPECT_NEAR(y.data()[c * N + p], X(c, p) + 0.7 * O(c, p), 1e-12);
  EXPECT_EQ(SelfAttention<D>::key_width(16), 2);
  EXPECT_EQ(SelfAttention<D>::key_width(4), 1);
}

TEST(XResnetBlock, FreshIdentityBlockIsMishOfInput) {
  Rng rng(9);
  XResnetBlock<D> block({BlockKind::Basic, 8, 8, 1}, rng);
  block.eval();
  std::mt19937_64 g(10);
  const auto x = randn<D>({1, 8, 4, 4}, g);
  const auto y = block.forward(x), m = mish(x);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], m.data()[i]);
}

TEST(XResnetBlock, StridedShapesAndParameterCount) {
  Rng rng(11);
  XResnetBlock<D> basic({BlockKind::Basic, 8, 16, 2}, rng);
  XResnetBlock<D> bottle({BlockKind::Bottleneck, 16, 64, 2}, rng);
  std::mt19937_64 g(12);
  EXPECT_EQ(basic.forward(randn<D>({2, 8, 6, 6}, g)).shape(), (Shape{2, 16, 3, 3}));
  EXPECT_EQ(bottle.forward(randn<D>({1, 16, 4, 4}, g)).shape(), (Shape{1, 64, 2, 2}));
  // conv weights plus two BN vectors per conv; 1x1 projection with BN
  EXPECT_EQ(basic.parameter_count(), (8 * 16 * 9 + 32) + (16 * 16 * 9 + 32) + (8 * 16 + 32));
  EXPECT_EQ(bottle.parameter_count(), (16 * 16 + 32) + (16 * 16 * 9 + 32) + (16 * 64 + 128) + (16 * 64 + 128));
  EXPECT_THROW(basic.forward(randn<D>({1, 4, 4, 4}, g)), DimensionError);
}

TEST(XResnetBlock, LastNormOfResidualBranchStartsAtZero) {
  Rng rng(13);
  XResnetBlock<D> block({BlockKind::Bottleneck, 16, 64, 1}, rng);
  for (D v : block.main.back()->bn->gamma.data()) EXPECT_EQ(v, 0.0);
  for (D v : block.main.front()->bn->gamma.data()) EXPECT_EQ(v, 1.0);
  for (D v : block.projection->bn->gamma.data()) EXPECT_EQ(v, 1.0);
}

TEST(DecoderBlock, ShapesAndSkipCheck) {
  Rng rng(14);
  UnetDecoderBlock<D> dec(16, 6, true, rng);
  EXPECT_EQ(dec.out_channels(), 14);
  std::mt19937_64 g(15);
  EXPECT_EQ(dec.forward(randn<D>({1, 16, 2, 3}, g), randn<D>({1, 6, 4, 6}, g)).shape(), (Shape{1, 14, 4, 6}));
  EXPECT_THROW(dec.forward(randn<D>({1, 16, 2, 3}, g), randn<D>({1, 6, 4, 5}, g)), DimensionError);
}

TEST(Module, NamesAndDecayFlags) {
  Rng rng(16);
  ConvBnAct<D> layer({4, 8, 3, 1}, rng);
  const auto params = layer.parameters();
  ASSERT_EQ(params.size(), 3u);
  EXPECT_EQ(params[0].name, "conv.weight");
  EXPECT_TRUE(params[0].decay);
  EXPECT_EQ(params[1].name, "bn.weight");
  EXPECT_FALSE(params[1].decay);
  const auto bufs = layer.buffers();
  ASSERT_EQ(bufs.size(), 2u);
  EXPECT_EQ(bufs[1].name, "bn.running_var");
  layer.freeze();
  for (const auto& p : layer.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
}

TEST(LayerGrad, MishShuffleBlur) {
  std::mt19937_64 g(17);
  for (auto f : std::vector<std::function<Tensor<D>(const Tensor<D>&)>>{
           [](const Tensor<D>& v) { return mish(v); }, [](const Tensor<D>& v) { return pixel_shuffle(v, 2); },
           [](const Tensor<D>& v) { return blur(v); }}) {
    const auto x = randn<D>({1, 4, 3, 3}, g);
    const auto probe = randn<D>(f(x).shape(), g);
    const auto r = check_gradient([&](const Tensor<D>& v) { return sum(mul(f(v), probe)); }, x);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " " << r.max_abs_error;
  }
}
