#include <gtest/gtest.h>

#include "mxr/gradcheck.hpp"
#include "mxr/model.hpp"

using namespace mxr;

namespace {

// Closed-form parameter count, written from the layer list rather than the modules.
struct Counter {
  WidthMultiplier w;
  bool attention = true;

  std::int64_t s(std::int64_t c) const { return std::max<std::int64_t>(1, c * w.num / w.den); }
  static std::int64_t cba(std::int64_t i, std::int64_t o, std::int64_t k) { return i * o * k * k + 2 * o; }

  std::int64_t total(int depth, std::int64_t in = 3, std::int64_t out = 31) const {
    const bool bottleneck = depth == 50;
    const std::array<int, 4> blocks = depth == 18 ? std::array<int, 4>{2, 2, 2, 2} : std::array<int, 4>{3, 4, 6, 3};
    const std::int64_t e = bottleneck ? 4 : 1;
    std::int64_t n = cba(in, s(32), 3) + cba(s(32), s(32), 3) + cba(s(32), s(64), 3);
    std::array<std::int64_t, 4> taps{s(64), 0, 0, 0};
    std::int64_t c = s(64);
    const std::array<std::int64_t, 4> base{64, 128, 256, 512};
    for (int st = 0; st < 4; ++st) {
      const std::int64_t o = s(base[st]) * e;
      for (int b = 0; b < blocks[st]; ++b) {
        const std::int64_t i = b == 0 ? c : o;
        if (bottleneck) {
          const std::int64_t m = o / 4;
          n += cba(i, m, 1) + cba(m, m, 3) + cba(m, o, 1);
        } else {
          n += cba(i, o, 3) + cba(o, o, 3);
        }
        if (i != o) n += cba(i, o, 1);
      }
      c = o;
      if (st < 3) taps[st + 1] = c;
    }
    n += cba(c, 2 * c, 3) + cba(2 * c, c, 3);
    std::int64_t width = c;
    for (int d = 0; d < 4; ++d) {
      const std::int64_t up = width / 2, o = up + taps[3 - d];
      n += width * up * 4 + up * 4 + 2 * cba(o, o, 3);
      width = o;
      if (d == 1 && attention) {
        const std::int64_t kw = std::max<std::int64_t>(1, width / 8);
        n += 2 * width * kw + width * width + 1;
      }
    }
    const std::int64_t u = width / 2;
    n += width * u * 4 + u * 4;
    n += 2 * cba(u + in, u + in, 3) + (u + in) * out + out;
    return n;
  }
};

ModelConfig config(int depth, WidthMultiplier w) {
  ModelConfig c;
  c.encoder_depth = depth;
  c.width = w;
  return c;
}

}  // namespace

TEST(WidthMultiplier, Parse) {
  EXPECT_EQ(WidthMultiplier::parse("1/8"), (WidthMultiplier{1, 8}));
  EXPECT_EQ(WidthMultiplier::parse("2/16"), (WidthMultiplier{1, 8}));
  EXPECT_EQ(WidthMultiplier::parse("0.125"), (WidthMultiplier{1, 8}));
  EXPECT_EQ(WidthMultiplier::parse("1"), (WidthMultiplier{1, 1}));
  EXPECT_EQ(WidthMultiplier::parse("1.5").str(), "3/2");
  for (const char* bad : {"", "0", "-1", "abc", "1/0", "1/", "0.5x"}) EXPECT_THROW(WidthMultiplier::parse(bad), ConfigError) << bad;
}

TEST(ModelConfig, Validate) {
  EXPECT_NO_THROW(config(34, {1, 8}).validate());
  EXPECT_THROW(config(20, {1, 1}).validate(), ConfigError);
  EXPECT_THROW(config(18, {1, 16}).validate(), ConfigError);
  EXPECT_THROW(build_unet<float>(config(101, {1, 1}), 0), ConfigError);
}

TEST(ParameterCount, MatchesClosedFormAtFullWidth) {
  const Counter full{{1, 1}};
  EXPECT_EQ(count_params(*build_unet<float>(config(18, {1, 1}), 0)), full.total(18));
  EXPECT_EQ(count_params(*build_unet<float>(config(34, {1, 1}), 0)), full.total(34));
  EXPECT_EQ(full.total(18), 31773611);
  EXPECT_EQ(full.total(34), 41881771);
}

TEST(ParameterCount, MatchesClosedFormReducedWidths) {
  for (int depth : {18, 34, 50})
    for (WidthMultiplier w : {WidthMultiplier{1, 8}, WidthMultiplier{1, 4}, WidthMultiplier{3, 8}}) {
      EXPECT_EQ(count_params(*build_unet<float>(config(depth, w), 1)), (Counter{w}.total(depth))) << depth << " " << w.str();
    }
  auto c = config(18, {1, 8});
  c.self_attention = false;
  c.blur = false;
  EXPECT_EQ(count_params(*build_unet<float>(c, 0)), (Counter{{1, 8}, false}.total(18)));
}

TEST(Forward, TraceShapes) {
  auto model = build_unet<float>(config(34, {1, 8}), 2);
  model->eval();
  std::mt19937_64 rng(3);
  ForwardTrace t;
  const auto y = model->forward(rand_uniform<float>({2, 3, 64, 96}, rng, 0.0f, 1.0f), &t);
  EXPECT_EQ(y.shape(), (Shape{2, 31, 64, 96}));
  EXPECT_EQ(t.taps[0], (Shape{2, 8, 32, 48}));
  EXPECT_EQ(t.taps[1], (Shape{2, 8, 16, 24}));
  EXPECT_EQ(t.taps[2], (Shape{2, 16, 8, 12}));
  EXPECT_EQ(t.taps[3], (Shape{2, 32, 4, 6}));
  EXPECT_EQ(t.bottleneck, (Shape{2, 64, 2, 3}));
  EXPECT_EQ(t.decoder[0], (Shape{2, 64, 4, 6}));
  EXPECT_EQ(t.head_input.at(1), t.decoder[3][1] / 2 + 3);
}

TEST(Forward, RejectsBadInputs) {
  auto model = build_unet<float>(config(18, {1, 8}), 0);
  EXPECT_THROW(model->forward(Tensor<float>({1, 3, 48, 64})), DimensionError);
  EXPECT_THROW(model->forward(Tensor<float>({1, 4, 32, 32})), DimensionError);
  EXPECT_THROW(model->forward(Tensor<float>({3, 32, 32})), DimensionError);
}

TEST(Forward, EvalModeIsPerSample) {
  auto model = build_unet<float>(config(18, {1, 8}), 4);
  model->eval();
  std::mt19937_64 rng(5);
  const auto a = rand_uniform<float>({1, 3, 32, 32}, rng, 0.0f, 1.0f);
  const auto b = rand_uniform<float>({1, 3, 32, 32}, rng, 0.0f, 1.0f);
  NoGradGuard ng;
  const auto alone = model->forward(a);
  std::vector<float> ab(a.data().begin(), a.data().end());
  ab.insert(ab.end(), b.data().begin(), b.data().end());
  const auto both = model->forward(Tensor<float>({2, 3, 32, 32}, std::move(ab)));
  for (std::int64_t i = 0; i < alone.numel(); ++i) EXPECT_NEAR(both.data()[i], alone.data()[i], 1e-5f);
}

TEST(Build, SeedDeterminism) {
  auto a = build_unet<float>(config(18, {1, 8}), 7), b = build_unet<float>(config(18, {1, 8}), 7),
       c = build_unet<float>(config(18, {1, 8}), 8);
  const auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j) {
      EXPECT_EQ(pa[i].tensor.data()[j], pb[i].tensor.data()[j]);
      differs = differs || pa[i].tensor.data()[j] != pc[i].tensor.data()[j];
    }
  }
  EXPECT_TRUE(differs);
}
