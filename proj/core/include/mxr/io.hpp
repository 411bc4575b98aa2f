#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mxr/data.hpp"
#include "mxr/loss.hpp"
#include "mxr/model.hpp"
#include "mxr/training.hpp"

namespace mxr::io {

namespace fs = std::filesystem;
using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const fs::path& path);
void write_file(const fs::path& path, std::span<const std::uint8_t> bytes);

// .hsc layout (little-endian):
//   0  "HSC1"
//   4  u32 C, u32 H, u32 W
//  16  u8 dtype (1 = float32)
//  17  C·H·W float32, channel-major, rows top to bottom
inline constexpr std::size_t kCubeHeaderBytes = 17;

HyperCube parse_cube(std::span<const std::uint8_t> bytes);
Bytes encode_cube(const HyperCube& cube);
HyperCube read_cube(const fs::path& path);
void write_cube(const HyperCube& cube, const fs::path& path);

/// Binary PPM (P6), maxval 255. Samples map to v / 255.
RgbImage parse_rgb(std::span<const std::uint8_t> bytes);
/// Values are clamped to [0, 1] and rounded to 8 bits.
Bytes encode_rgb(const RgbImage& img);
RgbImage read_rgb(const fs::path& path);
void write_rgb(const RgbImage& img, const fs::path& path);

struct DatasetPairs {
  struct Pair {
    std::string name;
    fs::path rgb, cube;
  };
  std::vector<Pair> pairs;            // sorted by name
  std::vector<std::string> warnings;  // unmatched stems
};

/// Matches root/rgb/NAME.ppm with root/cubes/NAME.hsc.
DatasetPairs pair_dataset(const fs::path& root);
/// Loads every pair; warnings from pairing are appended to `warnings` when given.
std::vector<Sample> load_dataset(const fs::path& root, std::vector<std::string>* warnings = nullptr);

// Checkpoint layout (little-endian):
//   "MXRW", u32 version, u32 kind (1 = MXR-U-Net, 2 = loss network)
//   u32 config_bytes, config block
//     kind 1: u32 depth, u32 in, u32 out, u32 width_num, u32 width_den, u8 attention, u8 blur
//     kind 2: u32 in, u32 width_num, u32 width_den
//   u32 tensor count, then per tensor: u32 name_len, name, u32 rank, u32 extents[rank], f32 payload
//   u8 has_optimizer; if 1: u64 step, f64 beta2, f64 eps, f64 weight_decay, u32 slots,
//     per slot: u32 name_len, name, u64 numel, f32 m[numel], f32 v[numel]
// Normalization statistics travel as tensors named norm.{rgb,cube}_{mean,std}.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ArtifactKind : std::uint32_t { UNet = 1, LossNetwork = 2 };

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct OptimizerBlock {
  std::int64_t step = 0;
  AdamWConfig config;
  std::vector<AdamW<float>::Slot> slots;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ArtifactKind kind = ArtifactKind::UNet;
  ModelConfig model;
  LossNetworkConfig loss_net;
  std::vector<NamedArray> tensors;
  std::optional<OptimizerBlock> optimizer;

  const NamedArray* find(const std::string& name) const;
  std::optional<NormalizationStats> normalization() const;
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

/// Snapshot of all parameters and buffers, plus optional stats and optimizer state.
Checkpoint capture(const MXRUNet<float>& model, const NormalizationStats* stats = nullptr,
                   const AdamW<float>* optimizer = nullptr);
Checkpoint capture(const LossNetwork<float>& net);

/// Copies every parameter and buffer of `module` from the checkpoint. Missing,
/// duplicated, misshapen or unexpected entries raise IntegrityError.
void apply(const Checkpoint& ckpt, nn::Module<float>& module);

void save_checkpoint(const MXRUNet<float>& model, const fs::path& path, const NormalizationStats* stats = nullptr,
                     const AdamW<float>* optimizer = nullptr);

struct LoadedModel {
  std::shared_ptr<MXRUNet<float>> model;
  NormalizationStats stats;  // identity when the file carries none
  std::optional<OptimizerBlock> optimizer;
};

/// Rebuilds the model described by the file. When `expected` is given the
/// stored configuration must match it.
LoadedModel load_checkpoint(const fs::path& path, const ModelConfig* expected = nullptr);

void save_loss_network(const LossNetwork<float>& net, const fs::path& path);
/// A 3-input-channel first layer is widened to the configured channel count.
std::shared_ptr<LossNetwork<float>> load_loss_network(const fs::path& path, std::int64_t in_channels = 31);

}  // namespace mxr::io
