#include "mxr/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <climits>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace mxr::io {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void floats(std::span<const float> v) {
    out_.reserve(out_.size() + 4 * v.size());
    for (float x : v) f32(x);
  }
  void name(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::size_t size() const { return out_.size(); }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::string what) : b_(b), what_(std::move(what)) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n)
      throw FormatError(what_ + ": truncated while reading " + field + ": expected " + std::to_string(n) +
                            " more bytes, only " + std::to_string(remaining()) + " left",
                        pos_);
  }
  std::uint8_t u8(const std::string& field) {
    need(1, field);
    return b_[pos_++];
  }
  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const std::string& field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const std::string& field) { return std::bit_cast<double>(u64(field)); }
  std::string str(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::uint64_t n, const std::string& field) {
    if (n > remaining() / 4) need(static_cast<std::size_t>(std::min<std::uint64_t>(n, SIZE_MAX / 4) * 4), field);
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = std::bit_cast<float>(u32(field));
    return v;
  }
  void end() const {
    if (remaining() != 0)
      throw FormatError(what_ + ": " + std::to_string(remaining()) + " unexpected trailing bytes", pos_);
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const { throw FormatError(what_ + ": " + msg, at); }

 private:
  std::span<const std::uint8_t> b_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::int64_t v, const char* what) {
  if (v < 0 || v > static_cast<std::int64_t>(UINT32_MAX)) throw ContractError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

// --- cubes -----------------------------------------------------------------------------

HyperCube parse_cube(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "hsc");
  if (r.remaining() < 4 || std::memcmp(bytes.data(), "HSC1", 4) != 0) r.fail("bad magic (expected \"HSC1\")", 0);
  r.str(4, "magic");
  const std::uint32_t C = r.u32("channel count"), H = r.u32("height"), W = r.u32("width");
  if (!C || !H || !W) r.fail("empty cube " + std::to_string(C) + "x" + std::to_string(H) + "x" + std::to_string(W), 4);
  const std::size_t dtype_at = r.pos();
  const std::uint8_t dtype = r.u8("dtype tag");
  if (dtype != 1) r.fail("unsupported dtype tag " + std::to_string(dtype) + " (only 1 = float32)", dtype_at);
  const std::uint64_t n = static_cast<std::uint64_t>(C) * H * W;
  const std::uint64_t expected = kCubeHeaderBytes + 4 * n;
  if (bytes.size() != expected) {
    const std::string msg = "payload size mismatch for " + std::to_string(C) + "x" + std::to_string(H) + "x" +
                            std::to_string(W) + ": expected " + std::to_string(expected) + " bytes, file has " +
                            std::to_string(bytes.size());
    r.fail(bytes.size() < expected ? "truncated " + msg : msg, std::min<std::size_t>(bytes.size(), expected));
  }
  HyperCube cube;
  cube.channels = C;
  cube.height = H;
  cube.width = W;
  cube.data = r.floats(n, "payload");
  return cube;
}

Bytes encode_cube(const HyperCube& cube) {
  if (static_cast<std::int64_t>(cube.data.size()) != cube.numel()) throw ContractError("encode_cube: data size mismatch");
  Writer w;
  w.raw("HSC1");
  w.u32(checked_u32(cube.channels, "channel count"));
  w.u32(checked_u32(cube.height, "height"));
  w.u32(checked_u32(cube.width, "width"));
  w.u8(1);
  w.floats(cube.data);
  return w.take();
}

HyperCube read_cube(const fs::path& path) {
  try {
    return parse_cube(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

void write_cube(const HyperCube& cube, const fs::path& path) { write_file(path, encode_cube(cube)); }

// --- PPM -----------------------------------------------------------------------------------

RgbImage parse_rgb(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "ppm");
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '3')
    r.fail("ASCII PPM (P3) is not supported; re-save the image as binary PPM (P6)", 0);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') r.fail("not a binary PPM (expected magic \"P6\")", 0);
  std::size_t pos = 2;
  auto header_int = [&](const char* field) -> std::uint64_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && pos - start < 10) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) r.fail(std::string("expected ") + field + " in header", start);
    return v;
  };
  const std::uint64_t W = header_int("width");
  const std::uint64_t H = header_int("height");
  if (!W || !H) r.fail("image has zero width or height", pos);
  const std::size_t maxval_at = pos;
  const std::uint64_t maxval = header_int("maxval");
  if (maxval != 255) r.fail("maxval " + std::to_string(maxval) + " is not supported (only 255)", maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) r.fail("missing whitespace after maxval", pos);
  ++pos;
  const std::uint64_t expected = pos + 3 * W * H;
  if (bytes.size() < expected)
    r.fail("truncated payload for " + std::to_string(W) + "x" + std::to_string(H) + ": expected " +
               std::to_string(expected) + " bytes, file has " + std::to_string(bytes.size()),
           bytes.size());
  if (bytes.size() > expected)
    r.fail(std::to_string(bytes.size() - expected) + " unexpected trailing bytes", expected);
  RgbImage img(3, static_cast<std::int64_t>(H), static_cast<std::int64_t>(W));
  for (std::uint64_t y = 0; y < H; ++y)
    for (std::uint64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, static_cast<std::int64_t>(y), static_cast<std::int64_t>(x)) =
            static_cast<float>(bytes[pos + 3 * (y * W + x) + c]) / 255.0f;
  return img;
}

Bytes encode_rgb(const RgbImage& img) {
  if (img.channels != 3) throw DimensionError("encode_rgb: expected 3 channels, got " + std::to_string(img.channels));
  Writer w;
  w.raw("P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n");
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f)));
  return w.take();
}

RgbImage read_rgb(const fs::path& path) {
  try {
    return parse_rgb(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

void write_rgb(const RgbImage& img, const fs::path& path) { write_file(path, encode_rgb(img)); }

// --- datasets ------------------------------------------------------------------------------

namespace {

std::map<std::string, fs::path> stems(const fs::path& dir, const std::string& ext) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out[e.path().stem().string()] = e.path();
  return out;
}

}  // namespace

DatasetPairs pair_dataset(const fs::path& root) {
  const auto rgb = stems(root / "rgb", ".ppm");
  const auto cubes = stems(root / "cubes", ".hsc");
  DatasetPairs out;
  for (const auto& [name, path] : rgb) {
    auto it = cubes.find(name);
    if (it == cubes.end())
      out.warnings.push_back("rgb image '" + name + "' has no matching cube");
    else
      out.pairs.push_back({name, path, it->second});
  }
  for (const auto& [name, _] : cubes)
    if (!rgb.count(name)) out.warnings.push_back("cube '" + name + "' has no matching rgb image");
  if (out.pairs.empty())
    throw ConfigError("no rgb/NAME.ppm and cubes/NAME.hsc pairs found under '" + root.string() + "'");
  return out;
}

std::vector<Sample> load_dataset(const fs::path& root, std::vector<std::string>* warnings) {
  auto pairs = pair_dataset(root);
  if (warnings) warnings->insert(warnings->end(), pairs.warnings.begin(), pairs.warnings.end());
  std::vector<Sample> out;
  for (const auto& p : pairs.pairs) {
    Sample s{p.name, read_rgb(p.rgb), read_cube(p.cube)};
    if (s.rgb.height != s.cube.height || s.rgb.width != s.cube.width)
      throw DimensionError("sample '" + p.name + "': rgb " + shape_str(s.rgb.shape()) + " and cube " +
                           shape_str(s.cube.shape()) + " differ in size");
    out.push_back(std::move(s));
  }
  return out;
}

// --- checkpoints -----------------------------------------------------------------------------

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::optional<NormalizationStats> Checkpoint::normalization() const {
  const auto* a = find("norm.rgb_mean");
  const auto* b = find("norm.rgb_std");
  const auto* c = find("norm.cube_mean");
  const auto* d = find("norm.cube_std");
  if (!a && !b && !c && !d) return std::nullopt;
  if (!a || !b || !c || !d) throw IntegrityError("checkpoint carries incomplete normalization statistics");
  NormalizationStats s{a->data, b->data, c->data, d->data};
  s.validate();
  return s;
}

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw("MXRW");
  w.u32(ckpt.version);
  w.u32(static_cast<std::uint32_t>(ckpt.kind));
  if (ckpt.kind == ArtifactKind::UNet) {
    const auto& m = ckpt.model;
    w.u32(22);
    w.u32(checked_u32(m.encoder_depth, "depth"));
    w.u32(checked_u32(m.in_channels, "in_channels"));
    w.u32(checked_u32(m.out_channels, "out_channels"));
    w.u32(m.width.num);
    w.u32(m.width.den);
    w.u8(m.self_attention ? 1 : 0);
    w.u8(m.blur ? 1 : 0);
  } else {
    w.u32(12);
    w.u32(checked_u32(ckpt.loss_net.in_channels, "in_channels"));
    w.u32(ckpt.loss_net.width.num);
    w.u32(ckpt.loss_net.width.den);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != shape_numel(t.shape))
      throw ContractError("checkpoint tensor '" + t.name + "' has inconsistent size");
    w.name(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) w.u32(checked_u32(e, "extent"));
    w.floats(t.data);
  }
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    w.u64(static_cast<std::uint64_t>(o.step));
    w.f64(o.config.beta2);
    w.f64(o.config.eps);
    w.f64(o.config.weight_decay);
    w.u32(static_cast<std::uint32_t>(o.slots.size()));
    for (const auto& s : o.slots) {
      w.name(s.name);
      w.u64(s.m.size());
      w.floats(s.m);
      w.floats(s.v);
    }
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  if (r.remaining() < 4 || std::memcmp(bytes.data(), "MXRW", 4) != 0) r.fail("bad magic (expected \"MXRW\")", 0);
  r.str(4, "magic");
  Checkpoint ck;
  ck.version = r.u32("version");
  if (ck.version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(ck.version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const std::size_t kind_at = r.pos();
  const std::uint32_t kind = r.u32("kind");
  if (kind != 1 && kind != 2) r.fail("unknown artifact kind " + std::to_string(kind), kind_at);
  ck.kind = static_cast<ArtifactKind>(kind);
  const std::size_t cfg_at = r.pos();
  const std::uint32_t cfg_bytes = r.u32("config size");
  const std::size_t cfg_start = r.pos();
  if (ck.kind == ArtifactKind::UNet) {
    if (cfg_bytes != 22) r.fail("config block of " + std::to_string(cfg_bytes) + " bytes, expected 22", cfg_at);
    ck.model.encoder_depth = static_cast<int>(r.u32("depth"));
    ck.model.in_channels = r.u32("in_channels");
    ck.model.out_channels = r.u32("out_channels");
    ck.model.width.num = r.u32("width numerator");
    ck.model.width.den = r.u32("width denominator");
    ck.model.self_attention = r.u8("attention flag") != 0;
    ck.model.blur = r.u8("blur flag") != 0;
    try {
      ck.model.validate();
    } catch (const ConfigError& e) {
      r.fail(std::string("invalid model config: ") + e.what(), cfg_start);
    }
  } else {
    if (cfg_bytes != 12) r.fail("config block of " + std::to_string(cfg_bytes) + " bytes, expected 12", cfg_at);
    ck.loss_net.in_channels = r.u32("in_channels");
    ck.loss_net.width.num = r.u32("width numerator");
    ck.loss_net.width.den = r.u32("width denominator");
    if (ck.loss_net.in_channels < 1 || !ck.loss_net.width.num || !ck.loss_net.width.den)
      r.fail("invalid loss network config", cfg_start);
  }
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray t;
    const std::uint32_t len = r.u32("name length");
    t.name = r.str(len, "tensor name");
    const std::uint32_t rank = r.u32("rank of '" + t.name + "'");
    if (rank > 8) r.fail("tensor '" + t.name + "' has implausible rank " + std::to_string(rank), r.pos() - 4);
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t e = r.u32("extents of '" + t.name + "'");
      t.shape.push_back(e);
      n *= e;
    }
    t.data = r.floats(n, "payload of '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }
  const std::uint8_t has_opt = r.u8("optimizer flag");
  if (has_opt > 1) r.fail("bad optimizer flag " + std::to_string(has_opt), r.pos() - 1);
  if (has_opt) {
    OptimizerBlock o;
    o.step = static_cast<std::int64_t>(r.u64("optimizer step"));
    o.config.beta2 = r.f64("beta2");
    o.config.eps = r.f64("eps");
    o.config.weight_decay = r.f64("weight decay");
    const std::uint32_t slots = r.u32("slot count");
    for (std::uint32_t i = 0; i < slots; ++i) {
      AdamW<float>::Slot s;
      const std::uint32_t len = r.u32("slot name length");
      s.name = r.str(len, "slot name");
      const std::uint64_t n = r.u64("slot size");
      s.m = r.floats(n, "first moment of '" + s.name + "'");
      s.v = r.floats(n, "second moment of '" + s.name + "'");
      o.slots.push_back(std::move(s));
    }
    ck.optimizer = std::move(o);
  }
  r.end();
  return ck;
}

namespace {

void add_state(Checkpoint& ck, const nn::Module<float>& m) {
  for (const auto& p : m.state()) {
    const auto d = p.tensor.data();
    ck.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
  }
}

}  // namespace

Checkpoint capture(const MXRUNet<float>& model, const NormalizationStats* stats, const AdamW<float>* optimizer) {
  Checkpoint ck;
  ck.kind = ArtifactKind::UNet;
  ck.model = model.config();
  add_state(ck, model);
  if (stats) {
    stats->validate();
    auto add = [&](const char* name, const std::vector<float>& v) {
      ck.tensors.push_back({name, {static_cast<std::int64_t>(v.size())}, v});
    };
    add("norm.rgb_mean", stats->rgb_mean);
    add("norm.rgb_std", stats->rgb_std);
    add("norm.cube_mean", stats->cube_mean);
    add("norm.cube_std", stats->cube_std);
  }
  if (optimizer) ck.optimizer = OptimizerBlock{optimizer->steps(), optimizer->config(), optimizer->slots()};
  return ck;
}

Checkpoint capture(const LossNetwork<float>& net) {
  Checkpoint ck;
  ck.kind = ArtifactKind::LossNetwork;
  ck.loss_net = net.config();
  add_state(ck, net);
  return ck;
}

void apply(const Checkpoint& ckpt, nn::Module<float>& module) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& t : ckpt.tensors) {
    if (!by_name.emplace(t.name, &t).second) throw IntegrityError("checkpoint lists '" + t.name + "' more than once");
  }
  std::set<std::string> used;
  for (auto& p : module.state()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IntegrityError("checkpoint is missing parameter '" + p.name + "'");
    const NamedArray& src = *it->second;
    if (src.shape != p.tensor.shape())
      throw IntegrityError("parameter '" + p.name + "' has shape " + shape_str(src.shape) + " in the checkpoint, " +
                           shape_str(p.tensor.shape()) + " in the model");
    Tensor<float> t = p.tensor;
    std::copy(src.data.begin(), src.data.end(), t.mutable_data().begin());
    used.insert(p.name);
  }
  for (const auto& t : ckpt.tensors)
    if (!used.count(t.name) && t.name.rfind("norm.", 0) != 0)
      throw IntegrityError("checkpoint holds unexpected parameter '" + t.name + "'");
}

void save_checkpoint(const MXRUNet<float>& model, const fs::path& path, const NormalizationStats* stats,
                     const AdamW<float>* optimizer) {
  write_file(path, encode_checkpoint(capture(model, stats, optimizer)));
}

namespace {

Checkpoint read_checkpoint(const fs::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace

LoadedModel load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.kind != ArtifactKind::UNet) throw IntegrityError(path.string() + " does not hold an MXR-U-Net model");
  if (expected && !(ck.model == *expected)) {
    const auto& m = ck.model;
    throw IntegrityError("checkpoint holds a depth-" + std::to_string(m.encoder_depth) + " model at width " +
                         m.width.str() + ", requested depth-" + std::to_string(expected->encoder_depth) +
                         " at width " + expected->width.str() + " (or other flags differ)");
  }
  LoadedModel out;
  out.model = build_unet<float>(ck.model, 0);
  apply(ck, *out.model);
  out.model->eval();
  out.stats = ck.normalization().value_or(NormalizationStats::identity(ck.model.in_channels, ck.model.out_channels));
  out.optimizer = ck.optimizer;
  return out;
}

void save_loss_network(const LossNetwork<float>& net, const fs::path& path) {
  write_file(path, encode_checkpoint(capture(net)));
}

std::shared_ptr<LossNetwork<float>> load_loss_network(const fs::path& path, std::int64_t in_channels) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.kind != ArtifactKind::LossNetwork) throw IntegrityError(path.string() + " does not hold loss network weights");
  if (ck.loss_net.in_channels != in_channels) {
    if (ck.loss_net.in_channels != 3)
      throw IntegrityError("loss network expects " + std::to_string(ck.loss_net.in_channels) +
                           " input channels, requested " + std::to_string(in_channels));
    for (auto& t : ck.tensors)
      if (t.name == "features.0.weight") {
        const Tensor<float> wide = adapt_input_layer(Tensor<float>(t.shape, t.data), in_channels);
        t.shape = wide.shape();
        t.data.assign(wide.data().begin(), wide.data().end());
      }
    ck.loss_net.in_channels = in_channels;
  }
  auto net = build_loss_network<float>(ck.loss_net, 0);
  apply(ck, *net);
  return net;
}

}  // namespace mxr::io
