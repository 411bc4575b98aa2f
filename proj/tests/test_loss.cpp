#include <gtest/gtest.h>

#include <cmath>

#include "mxr/gradcheck.hpp"
#include "mxr/loss.hpp"

using namespace mxr;
using D = double;

TEST(Gram, HandValues) {
  // one sample, C=2, 1x2 pixels: psi = [[1, 2], [3, 4]]
  Tensor<D> phi({1, 2, 1, 2}, std::vector<D>{1, 2, 3, 4});
  const auto g = gram(phi);
  ASSERT_EQ(g.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(g.at({0, 0, 0}), 5.0 / 4);
  EXPECT_DOUBLE_EQ(g.at({0, 0, 1}), 11.0 / 4);
  EXPECT_DOUBLE_EQ(g.at({0, 1, 0}), 11.0 / 4);
  EXPECT_DOUBLE_EQ(g.at({0, 1, 1}), 25.0 / 4);
}

TEST(Gram, MatchesLoopAndIgnoresPixelOrder) {
  std::mt19937_64 rng(1);
  const std::int64_t N = 2, C = 3, H = 4, W = 5, P = H * W;
  const auto phi = randn<D>({N, C, H, W}, rng);
  const auto g = gram(phi);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < C; ++i)
      for (std::int64_t j = 0; j < C; ++j) {
        D s = 0;
        for (std::int64_t p = 0; p < P; ++p) s += phi.data()[(n * C + i) * P + p] * phi.data()[(n * C + j) * P + p];
        EXPECT_NEAR(g.at({n, i, j}), s / (C * P), 1e-14);
      }
  // reversing pixel order in every channel leaves the Gram matrix unchanged
  std::vector<D> rev(phi.data().begin(), phi.data().end());
  for (std::int64_t nc = 0; nc < N * C; ++nc) std::reverse(rev.begin() + nc * P, rev.begin() + (nc + 1) * P);
  const auto gr = gram(Tensor<D>({N, C, H, W}, rev));
  for (std::int64_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(gr.data()[i], g.data()[i], 1e-14);
}

TEST(Losses, HandValues) {
  Tensor<D> a({1, 1, 2, 2}, std::vector<D>{1, 2, 3, 4}), b({1, 1, 2, 2}, std::vector<D>{0, 2, 5, 3});
  EXPECT_DOUBLE_EQ(feature_loss(a, b).item(), (1 + 0 + 2 + 1) / 4.0);
  EXPECT_DOUBLE_EQ(pixel_loss(a, b).item(), (1 + 0 + 4 + 1) / 4.0);
  // Gram of a single channel is mean of squares
  EXPECT_DOUBLE_EQ(style_loss(a, b).item(), std::abs(30.0 / 4 - 38.0 / 4));
  EXPECT_THROW(feature_loss(a, Tensor<D>({1, 1, 2, 3})), DimensionError);
  EXPECT_THROW(style_loss(a, Tensor<D>({1, 2, 2, 2})), DimensionError);
}

TEST(AdaptInputLayer, CyclesSourceChannels) {
  std::mt19937_64 rng(2);
  const auto w3 = randn<D>({4, 3, 3, 3}, rng);
  const auto w = adapt_input_layer(w3, 31);
  ASSERT_EQ(w.shape(), (Shape{4, 31, 3, 3}));
  for (std::int64_t o = 0; o < 4; ++o)
    for (std::int64_t c = 0; c < 31; ++c)
      for (std::int64_t k = 0; k < 9; ++k) EXPECT_EQ(w.at({o, c, k / 3, k % 3}), w3.at({o, c % 3, k / 3, k % 3}));
  EXPECT_THROW(adapt_input_layer(randn<D>({4, 2, 3, 3}, rng)), DimensionError);
}

TEST(LossNetwork, FeatureShapesAndFrozen) {
  auto net = build_loss_network<float>({31, {1, 8}}, 3);
  EXPECT_EQ(net->convs.size(), 13u);
  for (const auto& p : net->parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
  EXPECT_FALSE(net->is_training());
  std::mt19937_64 rng(4);
  const auto f = net->extract_features(randn<float>({2, 31, 32, 48}, rng));
  EXPECT_EQ(f[0].shape(), (Shape{2, 16, 16, 24}));
  EXPECT_EQ(f[1].shape(), (Shape{2, 32, 8, 12}));
  EXPECT_EQ(f[2].shape(), (Shape{2, 64, 4, 6}));
  for (float v : f[1].data()) EXPECT_GE(v, 0.0f);
  EXPECT_THROW(net->extract_features(randn<float>({1, 3, 32, 32}, rng)), DimensionError);
  EXPECT_THROW(net->extract_features(randn<float>({1, 31, 4, 4}, rng)), DimensionError);
}

TEST(LossNetwork, FullWidthParameterCount) {
  auto net = build_loss_network<float>({31, {1, 1}}, 0);
  std::int64_t n = 64 * 31 * 9 + 64, prev = 64;
  for (std::size_t i = 1; i < 13; ++i) {
    const std::int64_t c = LossNetwork<float>::kWidths[i];
    n += c * prev * 9 + c;
    prev = c;
  }
  EXPECT_EQ(count_params(*net), n);
}

TEST(TotalLoss, Identities) {
  auto net = build_loss_network<D>({31, {1, 8}}, 5);
  std::mt19937_64 rng(6);
  const auto y = randn<D>({1, 31, 16, 16}, rng), p = randn<D>({1, 31, 16, 16}, rng);
  EXPECT_EQ(total_loss(y, y, net.get(), LossWeights{}).total.item(), 0.0);

  const auto po = total_loss<D>(p, y, nullptr, LossWeights::pixel_only());
  EXPECT_EQ(po.total.item(), pixel_loss(p, y).item());
  EXPECT_EQ(po.feature[0], 0.0);

  LossWeights w;
  w.alpha = {0.5, 2, 0};
  w.beta = {10, 0, 3};
  w.gamma = 0.25;
  const auto t = total_loss(p, y, net.get(), w);
  const auto fp = net->extract_features(p), fy = net->extract_features(y);
  D want = 0.25 * pixel_loss(p, y).item();
  for (int j = 0; j < 3; ++j) {
    want += w.alpha[j] * feature_loss(fp[j], fy[j]).item() + w.beta[j] * style_loss(fp[j], fy[j]).item();
    if (w.alpha[j] != 0) EXPECT_NEAR(t.feature[j], feature_loss(fp[j], fy[j]).item(), 1e-12);
  }
  EXPECT_NEAR(t.total.item(), want, 1e-10 * std::abs(want));
  EXPECT_EQ(t.feature[2], 0.0);
  EXPECT_EQ(t.style[1], 0.0);
}

TEST(TotalLoss, WeightValidation) {
  LossWeights w;
  w.beta[1] = -1;
  EXPECT_THROW(w.validate(), ConfigError);
  EXPECT_FALSE(LossWeights::pixel_only().needs_features());
  EXPECT_TRUE(LossWeights{}.needs_features());
  std::mt19937_64 rng(7);
  const auto y = randn<D>({1, 31, 8, 8}, rng);
  EXPECT_THROW(total_loss<D>(y, y, nullptr, LossWeights{}), ContractError);
}

TEST(TotalLoss, GradientAgainstCentralDifferences) {
  auto net = build_loss_network<D>({31, {1, 8}}, 8);
  std::mt19937_64 rng(9);
  const auto target = randn<D>({1, 31, 8, 8}, rng), pred = randn<D>({1, 31, 8, 8}, rng);
  const auto r = check_gradient([&](const Tensor<D>& v) { return total_loss(v, target, net.get(), LossWeights{}).total; }, pred);
  EXPECT_TRUE(r.passed()) << r.max_rel_error << " " << r.max_abs_error;
}
