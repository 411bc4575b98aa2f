#include <gtest/gtest.h>

#include <cstring>

#include "mxr/gradcheck.hpp"
#include "mxr/io.hpp"
#include "test_util.hpp"

using namespace mxr;
using mxr::test::load_hex;
using mxr::test::TempDir;

namespace {

std::uint64_t offset_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return ~0ull;
}

ModelConfig small() {
  ModelConfig c;
  c.width = {1, 8};
  return c;
}

io::Bytes text_bytes(const std::string& s) { return io::Bytes(s.begin(), s.end()); }

}  // namespace

TEST(Cube, GoldenParseAndEncode) {
  const auto bytes = load_hex("cube_2x2x3.hsc.hex");
  ASSERT_EQ(bytes.size(), io::kCubeHeaderBytes + 12 * 4);
  const auto cube = io::parse_cube(bytes);
  EXPECT_EQ(cube.shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(cube.at(0, 1, 2), 3.5f);
  EXPECT_EQ(cube.at(1, 0, 1), -0.125f);
  EXPECT_EQ(cube.at(1, 0, 2), 1e-3f);
  EXPECT_EQ(cube.at(1, 1, 0), 100.0f);
  EXPECT_EQ(io::encode_cube(cube), bytes);
}

TEST(Cube, Errors) {
  auto bytes = load_hex("cube_2x2x3.hsc.hex");
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(offset_of([&] { io::parse_cube(bad); }), 0u);
  bad = bytes;
  bad[16] = 2;
  EXPECT_EQ(offset_of([&] { io::parse_cube(bad); }), 16u);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(io::parse_cube(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(io::parse_cube(bad), FormatError);
  EXPECT_THROW(io::parse_cube(io::Bytes(5, 0)), FormatError);
}

TEST(Ppm, GoldenParseAndEncode) {
  const auto bytes = load_hex("rgb_3x2.ppm.hex");
  const auto img = io::parse_rgb(bytes);
  EXPECT_EQ(img.shape(), (Shape{3, 2, 3}));
  EXPECT_EQ(img.at(0, 0, 1), 1.0f);        // pixel (0,1) red 255
  EXPECT_EQ(img.at(2, 0, 1), 1.0f / 255);  // blue 1
  EXPECT_EQ(img.at(1, 1, 0), 102.0f / 255);
  EXPECT_EQ(img.at(2, 1, 2), 252.0f / 255);
  // the encoder writes no comment line
  auto plain = text_bytes("P6\n3 2\n255\n");
  plain.insert(plain.end(), bytes.end() - 18, bytes.end());
  EXPECT_EQ(io::encode_rgb(img), plain);
  EXPECT_EQ(io::parse_rgb(plain), img);
}

TEST(Ppm, Errors) {
  EXPECT_THROW(io::parse_rgb(text_bytes("P3\n1 1\n255\n0 0 0\n")), FormatError);
  auto wide = text_bytes("P6\n1 1\n65535\n");
  wide.resize(wide.size() + 6, 0);
  EXPECT_THROW(io::parse_rgb(wide), FormatError);
  auto short_payload = text_bytes("P6\n2 1\n255\n");
  short_payload.resize(short_payload.size() + 5, 0);
  EXPECT_THROW(io::parse_rgb(short_payload), FormatError);
  auto trailing = text_bytes("P6\n1 1\n255\n");
  trailing.resize(trailing.size() + 4, 0);
  EXPECT_THROW(io::parse_rgb(trailing), FormatError);
  EXPECT_THROW(io::parse_rgb(text_bytes("P6\n0 1\n255\n")), FormatError);
}

TEST(Ppm, EncodeClampsAndRounds) {
  RgbImage img(3, 1, 1);
  img.data = {-0.5f, 0.5f, 2.0f};
  const auto b = io::encode_rgb(img);
  EXPECT_EQ(b[b.size() - 3], 0);
  EXPECT_EQ(b[b.size() - 2], 128);
  EXPECT_EQ(b[b.size() - 1], 255);
}

TEST(Checkpoint, GoldenParseAndEncode) {
  const auto bytes = load_hex("checkpoint_small.mxrw.hex");
  const auto ck = io::parse_checkpoint(bytes);
  EXPECT_EQ(ck.version, 1u);
  EXPECT_EQ(ck.kind, io::ArtifactKind::UNet);
  EXPECT_EQ(ck.model.encoder_depth, 34);
  EXPECT_EQ(ck.model.width, (WidthMultiplier{1, 8}));
  EXPECT_TRUE(ck.model.self_attention);
  EXPECT_FALSE(ck.model.blur);
  ASSERT_EQ(ck.tensors.size(), 2u);
  EXPECT_EQ(ck.tensors[0].shape, (Shape{2, 1}));
  EXPECT_EQ(ck.tensors[0].data, (std::vector<float>{1.0f, -2.5f}));
  ASSERT_NE(ck.find("norm.rgb_std"), nullptr);
  EXPECT_EQ(ck.find("norm.rgb_std")->data[2], 2.0f);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 7);
  EXPECT_EQ(ck.optimizer->config.beta2, 0.99);
  EXPECT_EQ(ck.optimizer->config.eps, 1e-8);
  EXPECT_EQ(ck.optimizer->config.weight_decay, 1e-3);
  ASSERT_EQ(ck.optimizer->slots.size(), 1u);
  EXPECT_EQ(ck.optimizer->slots[0].v, (std::vector<float>{1.0f, 2.0f}));
  EXPECT_EQ(io::encode_checkpoint(ck), bytes);
}

TEST(Checkpoint, Errors) {
  const auto bytes = load_hex("checkpoint_small.mxrw.hex");
  auto bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(io::parse_checkpoint(bad), VersionError);
  bad = bytes;
  bad[1] = 'Y';
  EXPECT_EQ(offset_of([&] { io::parse_checkpoint(bad); }), 0u);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(io::parse_checkpoint(bad), FormatError);
  bad = bytes;
  bad.resize(100);
  EXPECT_THROW(io::parse_checkpoint(bad), FormatError);
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
  TempDir dir("ckpt");
  auto model = build_unet<float>(small(), 1);
  // move BN statistics away from their defaults
  {
    std::mt19937_64 rng(2);
    model->forward(rand_uniform<float>({2, 3, 32, 32}, rng, 0.0f, 1.0f));
  }
  model->eval();
  auto stats = NormalizationStats::identity();
  stats.cube_mean[4] = 0.25f;
  AdamW<float> opt(model->parameters());
  io::save_checkpoint(*model, dir / "m.mxrw", &stats, &opt);

  const auto loaded = io::load_checkpoint(dir / "m.mxrw");
  EXPECT_EQ(loaded.model->config(), model->config());
  EXPECT_EQ(loaded.stats.cube_mean[4], 0.25f);
  ASSERT_TRUE(loaded.optimizer.has_value());
  const auto sa = model->state(), sb = loaded.model->state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    ASSERT_EQ(sa[i].name, sb[i].name);
    ASSERT_EQ(0, std::memcmp(sa[i].tensor.data().data(), sb[i].tensor.data().data(), sa[i].tensor.numel() * sizeof(float)));
  }
  io::save_checkpoint(*loaded.model, dir / "n.mxrw", &loaded.stats, &opt);
  EXPECT_EQ(io::read_file(dir / "m.mxrw"), io::read_file(dir / "n.mxrw"));

  std::mt19937_64 rng(3);
  const auto x = rand_uniform<float>({1, 3, 32, 32}, rng, 0.0f, 1.0f);
  NoGradGuard ng;
  const auto ya = model->forward(x), yb = loaded.model->forward(x);
  for (std::int64_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya.data()[i], yb.data()[i]);

  ModelConfig other = small();
  other.encoder_depth = 34;
  EXPECT_THROW(io::load_checkpoint(dir / "m.mxrw", &other), IntegrityError);
}

TEST(Checkpoint, ApplyRejectsInconsistentContent) {
  auto model = build_unet<float>(small(), 1);
  const auto good = io::capture(*model);
  auto missing = good;
  missing.tensors.pop_back();
  EXPECT_THROW(io::apply(missing, *model), IntegrityError);
  auto dup = good;
  dup.tensors.push_back(dup.tensors.front());
  EXPECT_THROW(io::apply(dup, *model), IntegrityError);
  auto shape = good;
  shape.tensors[0].shape[0] += 1;
  shape.tensors[0].data.resize(static_cast<std::size_t>(shape_numel(shape.tensors[0].shape)));
  EXPECT_THROW(io::apply(shape, *model), IntegrityError);
  auto extra = good;
  extra.tensors.push_back({"bogus", {1}, {0.0f}});
  EXPECT_THROW(io::apply(extra, *model), IntegrityError);
  EXPECT_NO_THROW(io::apply(good, *model));
}

TEST(Checkpoint, LossNetworkWidensThreeChannelInput) {
  TempDir dir("lossnet");
  auto net3 = build_loss_network<float>({3, {1, 8}}, 4);
  io::save_loss_network(*net3, dir / "vgg.mxrw");
  const auto net = io::load_loss_network(dir / "vgg.mxrw", 31);
  EXPECT_EQ(net->config().in_channels, 31);
  const auto& w3 = net3->convs[0]->weight;
  const auto& w = net->convs[0]->weight;
  ASSERT_EQ(w.dim(1), 31);
  for (std::int64_t c = 0; c < 31; ++c) EXPECT_EQ(w.at({1, c, 2, 0}), w3.at({1, c % 3, 2, 0}));
  EXPECT_EQ(net->convs[5]->weight.data()[7], net3->convs[5]->weight.data()[7]);
}

TEST(Dataset, PairsByStemAndWarns) {
  TempDir dir("data");
  RgbImage rgb(3, 2, 2, 0.5f);
  HyperCube cube(31, 2, 2, 0.25f);
  for (const char* n : {"b", "a"}) {
    io::write_rgb(rgb, dir / (std::string("rgb/") + n + ".ppm"));
    io::write_cube(cube, dir / (std::string("cubes/") + n + ".hsc"));
  }
  io::write_rgb(rgb, dir / "rgb/lonely.ppm");
  io::write_cube(cube, dir / "cubes/orphan.hsc");
  const auto pairs = io::pair_dataset(dir.path());
  ASSERT_EQ(pairs.pairs.size(), 2u);
  EXPECT_EQ(pairs.pairs[0].name, "a");
  EXPECT_EQ(pairs.warnings.size(), 2u);
  std::vector<std::string> warnings;
  const auto samples = io::load_dataset(dir.path(), &warnings);
  ASSERT_EQ(samples.size(), 2u);
  EXPECT_EQ(samples[1].cube, cube);
  EXPECT_EQ(warnings.size(), 2u);
  TempDir empty("empty");
  EXPECT_THROW(io::pair_dataset(empty.path()), ConfigError);
}

TEST(Files, ReadMissingFails) {
  EXPECT_THROW(io::read_file("/nonexistent/dir/x.hsc"), Error);
}
