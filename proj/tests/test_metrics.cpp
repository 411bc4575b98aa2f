#include <gtest/gtest.h>

#include <cmath>

#include "mxr/gradcheck.hpp"
#include "mxr/metrics.hpp"
#include "mxr/training.hpp"

using namespace mxr;

namespace {

std::int64_t mirror(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

ModelConfig small() {
  ModelConfig c;
  c.width = {1, 8};
  return c;
}

}  // namespace

TEST(Mrae, HandCases) {
  EXPECT_EQ(mrae(std::vector<float>{1, 3}, std::vector<float>{2, 2}, 0.0), 0.5);
  EXPECT_NEAR(mrae(std::vector<float>{2}, std::vector<float>{1}), 1.0 / (1 + 1e-6), 1e-15);
  EXPECT_NEAR(mrae(std::vector<float>{0.5f}, std::vector<float>{0}), 0.5 / 1e-6, 1e-3);
  EXPECT_THROW(mrae(std::vector<float>{1}, std::vector<float>{1, 2}), DimensionError);
  EXPECT_THROW(mrae(std::vector<float>{}, std::vector<float>{}), DimensionError);
  EXPECT_THROW(mrae(std::vector<float>{1}, std::vector<float>{1}, -1), ContractError);
}

TEST(Mrae, ScaledPrediction) {
  HyperCube t(31, 4, 4), p(31, 4, 4);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.1f, 1.0f);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    t.data[i] = u(rng);
    p.data[i] = 1.1f * t.data[i];
  }
  EXPECT_NEAR(mrae(p, t), 0.1, 1e-6);
  EXPECT_THROW(mrae(p, HyperCube(31, 4, 5)), DimensionError);
}

TEST(Rmse, HandCases) {
  EXPECT_DOUBLE_EQ(rmse(std::vector<float>{3, 4}, std::vector<float>{0, 0}), std::sqrt(12.5));
  EXPECT_EQ(rmse(std::vector<float>{1, 2}, std::vector<float>{1, 2}), 0.0);
}

TEST(PadToMultiple, ReflectsBottomAndRight) {
  std::vector<float> v(33 * 40);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  Tensor<float> x({1, 1, 33, 40}, v);
  const auto y = pad_to_multiple(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 64, 64}));
  for (std::int64_t r = 0; r < 64; ++r)
    for (std::int64_t c = 0; c < 64; ++c) ASSERT_EQ(y.at({0, 0, r, c}), x.at({0, 0, mirror(r, 33), mirror(c, 40)})) << r << "," << c;
  const auto same = pad_to_multiple(Tensor<float>({1, 2, 32, 64}, 1.0f));
  EXPECT_EQ(same.shape(), (Shape{1, 2, 32, 64}));
}

TEST(Reconstruct, KeepsInputSize) {
  auto model = build_unet<float>(small(), 1);
  RgbImage rgb(3, 40, 50, 0.5f);
  const auto cube = reconstruct(*model, rgb, NormalizationStats::identity());
  EXPECT_EQ(cube.shape(), (Shape{31, 40, 50}));
  EXPECT_FALSE(model->is_training());
  // matches a manual pad / forward / crop
  NoGradGuard ng;
  const auto full = model->forward(pad_to_multiple(to_tensor<float>(rgb)));
  const auto manual = from_tensor<CubeTag>(crop2d(full, 0, 0, 40, 50));
  EXPECT_EQ(cube, manual);
}

TEST(Evaluate, MeanOfPerImageValues) {
  auto model = build_unet<float>(small(), 2);
  std::vector<Sample> set;
  for (int i = 0; i < 2; ++i) set.push_back({"img" + std::to_string(i), RgbImage(3, 32, 32, 0.2f * (i + 1)), HyperCube(31, 32, 32, 0.5f)});
  const auto stats = NormalizationStats::identity();
  const auto r = evaluate_dataset(*model, set, stats);
  ASSERT_EQ(r.count(), 2u);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(r.per_image_mrae[i], mrae(reconstruct(*model, set[i].rgb, stats), set[i].cube));
  EXPECT_DOUBLE_EQ(r.mrae, (r.per_image_mrae[0] + r.per_image_mrae[1]) / 2);
  EXPECT_EQ(r.names[1], "img1");
  const auto text = format_report(r);
  EXPECT_NE(text.find("image name=img0"), std::string::npos);
  EXPECT_NE(text.find("summary images=2"), std::string::npos);
}

TEST(Latency, ReportAndContracts) {
  auto model = build_unet<float>(small(), 3);
  const auto r = benchmark_latency(*model, 32, 3, 10, 1, "tiny");
  ASSERT_EQ(r.seconds.size(), 10u);
  auto sorted = r.seconds;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_DOUBLE_EQ(r.median, (sorted[4] + sorted[5]) / 2);
  EXPECT_GT(r.mean, 0.0);
  EXPECT_NE(format_report(r).find("latency model=tiny size=32"), std::string::npos);
  EXPECT_THROW(benchmark_latency(*model, 32, 2, 10), ContractError);
  EXPECT_THROW(benchmark_latency(*model, 32, 3, 9), ContractError);
  EXPECT_THROW(benchmark_latency(*model, 40, 3, 10), DimensionError);
}
