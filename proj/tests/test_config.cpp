#include <gtest/gtest.h>

#include <fstream>

#include "mxr/config.hpp"
#include "test_util.hpp"

using namespace mxr;

TEST(Track, Parse) {
  EXPECT_EQ(parse_track("clean"), Track::Clean);
  EXPECT_EQ(parse_track("real"), Track::Real);
  EXPECT_EQ(parse_track("real-world"), Track::Real);
  EXPECT_EQ(track_name(Track::Real), "real");
  EXPECT_THROW(parse_track("noisy"), ConfigError);
}

TEST(RunConfig, Defaults) {
  const auto c = parse_run_config(R"({"train": "data"})");
  EXPECT_EQ(c.train_root, "data");
  EXPECT_FALSE(c.val_root.has_value());
  EXPECT_EQ(c.model.encoder_depth, 18);
  EXPECT_EQ(c.epochs, 200);
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.loss.beta[2], 5e3);
  const auto s = c.schedule(4);
  EXPECT_EQ(s.phase1, 60);
  EXPECT_EQ(s.phase2, 140);
  EXPECT_EQ(s.iterations_per_epoch, 4);
}

TEST(RunConfig, FullDocument) {
  const auto c = parse_run_config(R"({
    "train": "t", "val": "v", "track": "real",
    "model": {"depth": 50, "width": "1/4", "self_attention": false, "blur": false},
    "loss": {"alpha": [1, 2, 3], "beta": 0, "gamma": 0.5},
    "loss_net": {"width": 0.125, "seed": 9},
    "schedule": {"lr_peak": 0.002, "mom_trough": 0.8},
    "epochs": 10, "batch_size": 2, "augment": false, "crop": 64, "seed": 3, "threads": 2, "out": "o"})");
  EXPECT_EQ(c.track, Track::Real);
  EXPECT_EQ(c.model.encoder_depth, 50);
  EXPECT_EQ(c.model.width, (WidthMultiplier{1, 4}));
  EXPECT_FALSE(c.model.blur);
  EXPECT_EQ(c.loss.alpha[2], 3.0);
  EXPECT_EQ(c.loss.beta[0], 0.0);
  EXPECT_EQ(c.loss_net_width, (WidthMultiplier{1, 8}));
  const auto s = c.schedule(5);
  EXPECT_EQ(s.lr_peak, 0.002);
  EXPECT_EQ(s.mom_trough, 0.8);
  EXPECT_DOUBLE_EQ(s.phase1, 3.0);
  EXPECT_EQ(c.crop, 64);
  EXPECT_EQ(c.out_dir, "o");

  const auto again = parse_run_config(to_json(c));
  EXPECT_EQ(again.model, c.model);
  EXPECT_EQ(again.loss.alpha, c.loss.alpha);
  EXPECT_EQ(again.val_root, c.val_root);
  EXPECT_EQ(again.seed, 3u);
}

TEST(RunConfig, Rejections) {
  EXPECT_THROW(parse_run_config("{"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": "t", "lr": 1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": "t", "model": {"depht": 18}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": 5})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": "t", "loss": {"alpha": [1, 2]}})"), ConfigError);
  EXPECT_THROW(parse_run_config("[1]"), ConfigError);
}

TEST(RunConfig, LoadRebasesAndValidates) {
  mxr::test::TempDir dir("cfg");
  std::filesystem::create_directories(dir / "data");
  {
    std::ofstream(dir / "run.json") << R"({"train": "data", "crop": 48})";
  }
  auto c = load_run_config(dir / "run.json");
  EXPECT_EQ(c.train_root, dir / "data");
  EXPECT_THROW(c.validate(), ConfigError);  // crop not a multiple of 32
  c.crop = 64;
  EXPECT_NO_THROW(c.validate());
  c.val_root = dir / "missing";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(load_run_config(dir / "nope.json"), ConfigError);
}
