#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mxr/gradcheck.hpp"
#include "mxr/training.hpp"

using namespace mxr;
using D = double;

namespace {

// Half-cosine interpolation from a to b over [0, 1].
double cos_interp(double a, double b, double f) { return b + (a - b) * (1 + std::cos(std::numbers::pi * f)) / 2; }

RgbImage ramp_rgb(std::int64_t h, std::int64_t w) {
  RgbImage img(3, h, w);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 100.0f;
  return img;
}

std::vector<Sample> tiny_set(int n, std::int64_t size) {
  std::vector<Sample> out;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  for (int i = 0; i < n; ++i) {
    Sample s{"s" + std::to_string(i), RgbImage(3, size, size), HyperCube(31, size, size)};
    for (auto& v : s.rgb.data) v = u(rng);
    for (std::int64_t b = 0; b < 31; ++b)
      for (std::int64_t p = 0; p < size * size; ++p)
        s.cube.data[b * size * size + p] = 0.1f + 0.8f * s.rgb.data[(b % 3) * size * size + p];
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Schedule, AgreesWithCosineFormula) {
  const OneCycleSchedule s;
  for (int i = 0; i <= 400; ++i) {
    const double t = 0.5 * i;
    const double lr = t <= 60 ? cos_interp(1e-5, 1e-3, t / 60) : cos_interp(1e-3, 1e-9, (t - 60) / 140);
    const double mom = t <= 60 ? cos_interp(0.95, 0.85, t / 60) : cos_interp(0.85, 0.95, (t - 60) / 140);
    EXPECT_NEAR(s.lr_at(t), lr, 1e-12 * lr) << t;
    EXPECT_NEAR(s.mom_at(t), mom, 1e-12 * mom) << t;
  }
  EXPECT_EQ(s.lr_at(0), 1e-5);
  EXPECT_EQ(s.lr_at(60), 1e-3);
  EXPECT_EQ(s.lr_at(200), 1e-9);
  EXPECT_EQ(s.lr_warmup(60), s.lr_anneal(60));
  EXPECT_EQ(s.mom_warmup(60), s.mom_anneal(60));
  EXPECT_THROW(s.lr_at(-0.1), ContractError);
  EXPECT_THROW(s.mom_at(200.5), ContractError);
}

TEST(Schedule, ForEpochs) {
  const auto s = OneCycleSchedule::for_epochs(10, 3);
  EXPECT_DOUBLE_EQ(s.phase1, 3.0);
  EXPECT_DOUBLE_EQ(s.phase2, 7.0);
  EXPECT_DOUBLE_EQ(s.time_of(4), 4.0 / 3);
  EXPECT_EQ(s.lr_at(3), s.lr_peak);
  OneCycleSchedule bad;
  bad.mom_trough = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(OneCycleSchedule::for_epochs(0, 1), ConfigError);
}

TEST(AdamW, SingleStepHandValue) {
  Tensor<D> p({1}, 1.0);
  AdamW<D> opt({{"p", p.set_requires_grad(true), true}}, {0.99, 1e-8, 0.1});
  p.mutable_grad()[0] = 0.5;
  opt.step(0.1, 0.9);
  // decay 1 - 0.1*0.1, then m̂ = 0.5, v̂ = 0.25
  EXPECT_NEAR(p.data()[0], 0.99 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, MatchesReferenceOverSeveralSteps) {
  const std::vector<D> init{0.3, -1.2, 2.0}, decay_flags{1, 1, 0};
  Tensor<D> a({2}, std::vector<D>{init[0], init[1]}), b({1}, init[2]);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  const AdamWConfig cfg{0.99, 1e-8, 1e-2};
  AdamW<D> opt({{"a", a, true}, {"b", b, false}}, cfg);
  std::vector<D> x = init, m(3, 0), v(3, 0);
  const std::vector<std::array<D, 3>> grads{{0.1, -0.3, 0.7}, {-0.2, 0.05, 0.4}, {0.3, 0.3, -1.0}};
  const std::array<D, 3> lrs{1e-3, 5e-3, 2e-3}, b1s{0.95, 0.9, 0.85};
  for (int k = 0; k < 3; ++k) {
    a.mutable_grad()[0] = grads[k][0];
    a.mutable_grad()[1] = grads[k][1];
    b.mutable_grad()[0] = grads[k][2];
    opt.step(lrs[k], b1s[k]);
    for (int i = 0; i < 3; ++i) {
      m[i] = b1s[k] * m[i] + (1 - b1s[k]) * grads[k][i];
      v[i] = 0.99 * v[i] + 0.01 * grads[k][i] * grads[k][i];
      const D mh = m[i] / (1 - std::pow(b1s[k], k + 1)), vh = v[i] / (1 - std::pow(0.99, k + 1));
      x[i] = x[i] * (1 - lrs[k] * cfg.weight_decay * decay_flags[i]) - lrs[k] * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(a.data()[0], x[0], 1e-14);
    EXPECT_NEAR(a.data()[1], x[1], 1e-14);
    EXPECT_NEAR(b.data()[0], x[2], 1e-14);
  }
}

TEST(AdamW, RequiresGradientAndValidArguments) {
  Tensor<D> p({2}, 1.0, true);
  AdamW<D> opt({{"p", p, true}});
  EXPECT_THROW(opt.step(1e-3, 0.9), ContractError);
  p.mutable_grad()[0] = 1;
  EXPECT_THROW(opt.step(0, 0.9), ContractError);
  EXPECT_THROW(opt.step(1e-3, 1.0), ContractError);
  EXPECT_THROW(AdamW<D>({}, {1.0, 1e-8, 0}), ConfigError);
}

TEST(Augment, Rot90AndFlipsByHand) {
  RgbImage img(1, 2, 3);
  img.data = {1, 2, 3, 4, 5, 6};  // rows [1 2 3] [4 5 6]
  const auto r = rot90(img, 1);
  EXPECT_EQ(r.height, 3);
  EXPECT_EQ(r.width, 2);
  EXPECT_EQ(r.data, (std::vector<float>{3, 6, 2, 5, 1, 4}));
  EXPECT_EQ(flip_horizontal(img).data, (std::vector<float>{3, 2, 1, 6, 5, 4}));
  EXPECT_EQ(flip_vertical(img).data, (std::vector<float>{4, 5, 6, 1, 2, 3}));
  EXPECT_EQ(rot90(img, 2).data, flip_vertical(flip_horizontal(img)).data);
  EXPECT_EQ(rot90(rot90(r, 2), 1), img);
  EXPECT_EQ(rot90(img, -1), rot90(img, 3));
}

TEST(Augment, NoneIsIdentityAndCropSizes) {
  const auto rgb = ramp_rgb(6, 8);
  HyperCube cube(31, 6, 8, 0.5f);
  AugmentRng rng(1);
  auto [a, b] = augment(rgb, cube, AugmentConfig::none(), rng);
  EXPECT_EQ(a, rgb);
  EXPECT_EQ(b, cube);
  auto cfg = AugmentConfig::none();
  cfg.crop = 4;
  auto [c, d] = augment(rgb, cube, cfg, rng);
  EXPECT_EQ(c.shape(), (Shape{3, 4, 4}));
  EXPECT_EQ(d.shape(), (Shape{31, 4, 4}));
  cfg.crop = 7;
  EXPECT_THROW(augment(rgb, cube, cfg, rng), DimensionError);
}

TEST(Augment, GeometryIsSharedAndContrastOnlyTouchesRgb) {
  const auto rgb = ramp_rgb(5, 5);
  HyperCube cube(31, 5, 5);
  for (std::int64_t b = 0; b < 31; ++b)
    for (std::int64_t p = 0; p < 25; ++p) cube.data[b * 25 + p] = rgb.data[(b % 3) * 25 + p];
  AugmentConfig geo;
  geo.brightness = {1, 1};
  geo.contrast = {1, 1};
  geo.crop = 4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    AugmentRng rng(seed);
    auto [a, b] = augment(rgb, cube, geo, rng);
    for (std::int64_t band = 0; band < 31; ++band)
      for (std::int64_t p = 0; p < 16; ++p) ASSERT_EQ(b.data[band * 16 + p], a.data[(band % 3) * 16 + p]);
  }
  auto con = AugmentConfig::none();
  con.contrast = {1.5, 1.5};
  AugmentRng rng(3);
  auto [a, b] = augment(rgb, cube, con, rng);
  EXPECT_EQ(b, cube);
  double mu = 0;
  for (float v : rgb.data) mu += v;
  mu /= static_cast<double>(rgb.data.size());
  EXPECT_NEAR(a.data[7], mu + 1.5 * (rgb.data[7] - mu), 1e-5);
}

TEST(Normalization, ComputeAndRoundTrip) {
  auto set = tiny_set(2, 4);
  const auto st = NormalizationStats::compute(set);
  double s = 0, ss = 0;
  for (const auto& x : set)
    for (std::int64_t p = 0; p < 16; ++p) s += x.rgb.data[16 + p];
  const double mu = s / 32;
  for (const auto& x : set)
    for (std::int64_t p = 0; p < 16; ++p) ss += std::pow(x.rgb.data[16 + p] - mu, 2);
  EXPECT_NEAR(st.rgb_mean[1], mu, 1e-6);
  EXPECT_NEAR(st.rgb_std[1], std::sqrt(ss / 32), 1e-6);
  const auto t = to_tensor<D>(set[0].cube);
  const auto back = denormalize(normalize(t, st.cube_mean, st.cube_std), st.cube_mean, st.cube_std);
  for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_NEAR(back.data()[i], t.data()[i], 1e-6);

  std::vector<Sample> flat{{"c", RgbImage(3, 2, 2, 0.5f), HyperCube(31, 2, 2, 0.25f)}};
  const auto fs = NormalizationStats::compute(flat);
  EXPECT_GT(fs.rgb_std[0], 0.0f);
  EXPECT_NO_THROW(fs.validate());
}

TEST(Records, Format) {
  IterationRecord r;
  r.epoch = 2;
  r.iter = 17;
  r.lr = 1e-3;
  r.momentum = 0.9;
  r.total = 1.5;
  r.pixel = 0.5;
  r.feature = {0.25, 0.125, 0};
  const auto line = format_record(r);
  EXPECT_EQ(line.rfind("iter epoch=2 iter=17 lr=1.000000000e-03 mom=0.900000000", 0), 0u) << line;
  EXPECT_NE(line.find("feat="), std::string::npos);
  EXPECT_NE(line.find("style="), std::string::npos);
  EXPECT_NE(format_record(EpochRecord{3, 0.5, std::nullopt}).find("val_mrae=-"), std::string::npos);
}

TEST(Fit, RunsRecordsAndIsDeterministic) {
  const auto train = tiny_set(3, 32), val = tiny_set(1, 32);
  const auto stats = NormalizationStats::compute(train);
  ModelConfig mc;
  mc.width = {1, 8};
  FitOptions o;
  o.epochs = 2;
  o.batch_size = 2;
  o.loss = LossWeights::pixel_only();
  o.seed = 5;
  std::ostringstream log;
  o.log = &log;
  int called = 0;
  o.on_epoch = [&](const EpochRecord&) { ++called; };
  auto run = [&] {
    auto m = build_unet<float>(mc, 1);
    return fit<float>(*m, train, val, nullptr, stats, o);
  };
  const auto l1 = run();
  ASSERT_EQ(l1.iterations.size(), 4u);
  ASSERT_EQ(l1.epochs.size(), 2u);
  EXPECT_TRUE(l1.epochs[1].val_mrae.has_value());
  EXPECT_EQ(called, 2);
  EXPECT_NE(log.str().find("epoch epoch=1"), std::string::npos);
  const auto l2 = run();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(l1.iterations[i].total, l2.iterations[i].total);
  // warm-up start of a 2-epoch one-cycle
  EXPECT_DOUBLE_EQ(l1.iterations[0].lr, 1e-5);
}

TEST(Fit, Contracts) {
  const auto train = tiny_set(3, 32);
  const auto stats = NormalizationStats::compute(train);
  ModelConfig mc;
  mc.width = {1, 8};
  auto m = build_unet<float>(mc, 1);
  FitOptions o;
  o.loss = LossWeights::pixel_only();
  EXPECT_TRUE(fit<float>(*m, train, {}, nullptr, stats, o).iterations.empty());
  o.epochs = 1;
  o.batch_size = 2;
  o.schedule = OneCycleSchedule::for_epochs(1, 5);
  EXPECT_THROW(fit<float>(*m, train, {}, nullptr, stats, o), ConfigError);
  o.schedule.reset();
  EXPECT_THROW(fit<float>(*m, {}, {}, nullptr, stats, o), ContractError);
  o.loss = LossWeights{};
  EXPECT_THROW(fit<float>(*m, train, {}, nullptr, stats, o), ContractError);
}
