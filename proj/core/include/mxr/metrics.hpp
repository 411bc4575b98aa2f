#pragma once

#include <span>
#include <string>
#include <vector>

#include "mxr/data.hpp"
#include "mxr/model.hpp"

namespace mxr {

struct NormalizationStats;

inline constexpr double kMraeEps = 1e-6;

/// Mean over voxels of |pred − truth| / (truth + eps).
double mrae(std::span<const float> pred, std::span<const float> truth, double eps = kMraeEps);
double mrae(const HyperCube& pred, const HyperCube& truth, double eps = kMraeEps);
/// sqrt(mean squared voxel difference).
double rmse(std::span<const float> pred, std::span<const float> truth);
double rmse(const HyperCube& pred, const HyperCube& truth);

/// Pads bottom/right by reflection up to the next multiple of `multiple`.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, std::int64_t multiple = kSpatialMultiple);

/// Eval-mode, no-grad reconstruction of one image: pad, normalize, forward,
/// crop back and denormalize.
template <typename T>
HyperCube reconstruct(MXRUNet<T>& model, const RgbImage& rgb, const NormalizationStats& stats);

struct MetricReport {
  double mrae = 0, rmse = 0;
  std::vector<std::string> names;
  std::vector<double> per_image_mrae, per_image_rmse;
  std::size_t count() const { return per_image_mrae.size(); }
};

/// Per-image metrics on reconstructed cubes; the aggregate is the plain mean.
/// `clamp_unit` clips outputs to [0, 1] first, for unit-range datasets.
template <typename T>
MetricReport evaluate_dataset(MXRUNet<T>& model, const std::vector<Sample>& samples, const NormalizationStats& stats,
                              bool clamp_unit = false);

/// Builds a report from precomputed per-image values.
MetricReport aggregate(std::vector<std::string> names, std::vector<double> mrae_values, std::vector<double> rmse_values);

struct LatencyReport {
  std::string model_id;
  std::int64_t size = 0;
  int warmup = 0;
  int threads = 1;
  std::vector<double> seconds;  // in run order
  double median = 0, mean = 0;
};

/// Times forward passes only, on one seeded random image of size × size.
template <typename T>
LatencyReport benchmark_latency(MXRUNet<T>& model, std::int64_t size, int warmup = 3, int runs = 10, int threads = 1,
                                std::string model_id = {});

std::string format_report(const MetricReport& r);
std::string format_report(const LatencyReport& r);

}  // namespace mxr
