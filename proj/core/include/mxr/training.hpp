#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mxr/data.hpp"
#include "mxr/loss.hpp"
#include "mxr/model.hpp"

namespace mxr {

/// Cosine warmup then cosine anneal for the learning rate, with momentum
/// moving the opposite way. Time is measured in (fractional) epochs.
struct OneCycleSchedule {
  double lr_start = 1e-5, lr_peak = 1e-3, lr_end = 1e-9;
  double mom_start = 0.95, mom_trough = 0.85;
  double phase1 = 60, phase2 = 140;
  std::int64_t iterations_per_epoch = 1;

  double total_epochs() const { return phase1 + phase2; }
  double lr_at(double t) const;
  double mom_at(double t) const;
  /// The two half-cosine pieces, each valid on its own phase; lr_at/mom_at pick one.
  double lr_warmup(double t) const;
  double lr_anneal(double t) const;
  double mom_warmup(double t) const;
  double mom_anneal(double t) const;
  /// Epoch position of iteration `iter` counted from the start of training.
  double time_of(std::int64_t iter) const { return static_cast<double>(iter) / static_cast<double>(iterations_per_epoch); }

  /// Same shape squeezed into `epochs` (30% warmup, 70% anneal).
  static OneCycleSchedule for_epochs(double epochs, std::int64_t iterations_per_epoch);
  void validate() const;
};

struct AdamWConfig {
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

/// AdamW with decoupled weight decay. Decay is applied before the adaptive
/// step; parameters registered with decay=false are never decayed.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<nn::NamedTensor<T>> params, AdamWConfig cfg = {});

  /// One update using the gradients currently stored on the parameters.
  /// beta1 is the momentum for this step; bias correction uses 1 − beta1^step.
  void step(double lr, double beta1);

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }

  struct Slot {
    std::string name;
    std::vector<T> m, v;
  };
  const std::vector<Slot>& slots() const { return slots_; }
  /// Restores moments and step count; slot names and sizes must match.
  void restore(std::int64_t step, const std::vector<Slot>& slots);

 private:
  std::vector<nn::NamedTensor<T>> params_;
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
};

struct AugmentConfig {
  double flip_h = 0.5, flip_v = 0.5;
  bool rotate = true;  // uniform over 0°, 90°, 180°, 270°
  std::array<double, 2> brightness{0.9, 1.1};
  std::array<double, 2> contrast{0.9, 1.1};
  std::int64_t crop = 0;  // square random crop side; 0 keeps the full image

  static AugmentConfig none() { return {0.0, 0.0, false, {1.0, 1.0}, {1.0, 1.0}, 0}; }
  void validate() const;
};

using AugmentRng = std::mt19937_64;

/// Rotates each channel by k·90° counter-clockwise.
template <class Tag>
Planar<Tag> rot90(const Planar<Tag>& p, int k);
template <class Tag>
Planar<Tag> flip_horizontal(const Planar<Tag>& p);
template <class Tag>
Planar<Tag> flip_vertical(const Planar<Tag>& p);

/// Geometric transforms and brightness act on both images; contrast only on rgb.
/// Draw order per call: crop offsets, flip h, flip v, rotation, brightness, contrast.
std::pair<RgbImage, HyperCube> augment(const RgbImage& rgb, const HyperCube& cube, const AugmentConfig& cfg,
                                       AugmentRng& rng);

struct NormalizationStats {
  std::vector<float> rgb_mean, rgb_std, cube_mean, cube_std;

  static NormalizationStats identity(std::int64_t rgb_channels = 3, std::int64_t cube_channels = 31);
  static NormalizationStats compute(const std::vector<Sample>& samples);
  void validate() const;
};

/// (x − mean) / std per channel of an [N, C, H, W] tensor.
template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const std::vector<float>& mean, const std::vector<float>& std);
template <typename T>
Tensor<T> denormalize(const Tensor<T>& x, const std::vector<float>& mean, const std::vector<float>& std);

struct IterationRecord {
  std::int64_t epoch = 0, iter = 0;  // iter counts from the start of training
  double lr = 0, momentum = 0;
  double total = 0, pixel = 0;
  std::array<double, 3> feature{}, style{};
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double mean_loss = 0;
  std::optional<double> val_mrae;
};

struct TrainingLog {
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
};

/// One line per record:
///   iter epoch=E iter=I lr=.. mom=.. total=.. pixel=.. feat=a,b,c style=a,b,c
///   epoch epoch=E loss=.. val_mrae=..|-
std::string format_record(const IterationRecord& r);
std::string format_record(const EpochRecord& r);

struct FitOptions {
  std::int64_t epochs = 0;
  std::int64_t batch_size = 8;
  LossWeights loss;
  std::optional<AugmentConfig> augment = AugmentConfig{};
  AdamWConfig adamw;
  std::optional<OneCycleSchedule> schedule;  // default: for_epochs(epochs, iterations per epoch)
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // receives each record as it is produced
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains `model` on `train` and reports per-epoch validation MRAE when `val` is non-empty.
/// `loss_net` is needed only when feature or style weights are active.
template <typename T>
TrainingLog fit(MXRUNet<T>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                LossNetwork<T>* loss_net, const NormalizationStats& stats, const FitOptions& opts,
                AdamW<T>* optimizer = nullptr);

}  // namespace mxr
