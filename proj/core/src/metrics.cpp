#include "mxr/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "mxr/training.hpp"

namespace mxr {

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw DimensionError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  if (a == 0) throw DimensionError(std::string(what) + ": empty input");
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double mrae(std::span<const float> pred, std::span<const float> truth, double eps) {
  check_sizes(pred.size(), truth.size(), "mrae");
  if (eps < 0) throw ContractError("mrae: eps must be non-negative");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double y = truth[i];
    s += std::abs(static_cast<double>(pred[i]) - y) / (y + eps);
  }
  return s / static_cast<double>(pred.size());
}

double mrae(const HyperCube& pred, const HyperCube& truth, double eps) {
  if (pred.shape() != truth.shape())
    throw DimensionError("mrae: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  return mrae(pred.data, truth.data, eps);
}

double rmse(std::span<const float> pred, std::span<const float> truth) {
  check_sizes(pred.size(), truth.size(), "rmse");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - truth[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double rmse(const HyperCube& pred, const HyperCube& truth) {
  if (pred.shape() != truth.shape())
    throw DimensionError("rmse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  return rmse(pred.data, truth.data);
}

template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, std::int64_t multiple) {
  if (x.rank() != 4) throw DimensionError("pad_to_multiple: expected NCHW, got " + shape_str(x.shape()));
  const std::int64_t bottom = (multiple - x.dim(2) % multiple) % multiple;
  const std::int64_t right = (multiple - x.dim(3) % multiple) % multiple;
  if (bottom == 0 && right == 0) return x;
  return pad2d(x, PadMode::Reflect, Padding2d{0, 0, static_cast<int>(bottom), static_cast<int>(right)});
}

template <typename T>
HyperCube reconstruct(MXRUNet<T>& model, const RgbImage& rgb, const NormalizationStats& stats) {
  NoGradGuard no_grad;
  model.eval();
  Tensor<T> x = pad_to_multiple(normalize(to_tensor<T>(rgb), stats.rgb_mean, stats.rgb_std));
  Tensor<T> y = model.forward(x);
  if (y.dim(2) != rgb.height || y.dim(3) != rgb.width) y = crop2d(y, 0, 0, rgb.height, rgb.width);
  return from_tensor<CubeTag>(denormalize(y, stats.cube_mean, stats.cube_std));
}

MetricReport aggregate(std::vector<std::string> names, std::vector<double> mrae_values, std::vector<double> rmse_values) {
  if (mrae_values.size() != rmse_values.size()) throw ContractError("aggregate: per-image value counts differ");
  MetricReport r;
  r.names = std::move(names);
  r.names.resize(mrae_values.size());
  r.per_image_mrae = std::move(mrae_values);
  r.per_image_rmse = std::move(rmse_values);
  r.mrae = mean_of(r.per_image_mrae);
  r.rmse = mean_of(r.per_image_rmse);
  return r;
}

template <typename T>
MetricReport evaluate_dataset(MXRUNet<T>& model, const std::vector<Sample>& samples, const NormalizationStats& stats,
                              bool clamp_unit) {
  if (samples.empty()) throw ContractError("evaluate_dataset: no samples");
  std::vector<std::string> names;
  std::vector<double> m, r;
  for (const auto& s : samples) {
    HyperCube pred = reconstruct(model, s.rgb, stats);
    if (clamp_unit)
      for (auto& v : pred.data) v = std::clamp(v, 0.0f, 1.0f);
    names.push_back(s.name);
    m.push_back(mrae(pred, s.cube));
    r.push_back(rmse(pred, s.cube));
  }
  return aggregate(std::move(names), std::move(m), std::move(r));
}

template <typename T>
LatencyReport benchmark_latency(MXRUNet<T>& model, std::int64_t size, int warmup, int runs, int threads,
                                std::string model_id) {
  if (warmup < 3) throw ContractError("benchmark_latency: warmup must be >= 3");
  if (runs < 10) throw ContractError("benchmark_latency: runs must be >= 10");
  if (threads < 1) throw ContractError("benchmark_latency: threads must be >= 1");
  const int previous = num_threads();
  set_num_threads(threads);
  NoGradGuard no_grad;
  model.eval();
  std::mt19937_64 rng(size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> buf(static_cast<std::size_t>(model.config().in_channels * size * size));
  for (auto& v : buf) v = static_cast<T>(u(rng));
  const Tensor<T> x({1, model.config().in_channels, size, size}, std::move(buf));

  LatencyReport rep;
  rep.model_id = std::move(model_id);
  rep.size = size;
  rep.warmup = warmup;
  rep.threads = threads;
  for (int i = 0; i < warmup; ++i) model.forward(x);
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<T> y = model.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    rep.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  set_num_threads(previous);
  std::vector<double> sorted = rep.seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  rep.median = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
  rep.mean = mean_of(rep.seconds);
  return rep;
}

std::string format_report(const MetricReport& r) {
  std::string out;
  char buf[256];
  for (std::size_t i = 0; i < r.count(); ++i) {
    std::snprintf(buf, sizeof buf, "image name=%s mrae=%.6f rmse=%.6f\n", r.names[i].c_str(), r.per_image_mrae[i],
                  r.per_image_rmse[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "summary images=%zu mrae=%.6f rmse=%.6f\n", r.count(), r.mrae, r.rmse);
  return out + buf;
}

std::string format_report(const LatencyReport& r) {
  std::string out;
  char buf[256];
  for (std::size_t i = 0; i < r.seconds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "run index=%zu seconds=%.6f\n", i, r.seconds[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "latency model=%s size=%lld threads=%d warmup=%d runs=%zu median=%.6f mean=%.6f\n",
                r.model_id.c_str(), static_cast<long long>(r.size), r.threads, r.warmup, r.seconds.size(), r.median,
                r.mean);
  return out + buf;
}

#define MXR_INSTANTIATE_METRICS(T)                                                                           \
  template Tensor<T> pad_to_multiple<T>(const Tensor<T>&, std::int64_t);                                     \
  template HyperCube reconstruct<T>(MXRUNet<T>&, const RgbImage&, const NormalizationStats&);                \
  template MetricReport evaluate_dataset<T>(MXRUNet<T>&, const std::vector<Sample>&, const NormalizationStats&, bool); \
  template LatencyReport benchmark_latency<T>(MXRUNet<T>&, std::int64_t, int, int, int, std::string);

MXR_INSTANTIATE_METRICS(float)
MXR_INSTANTIATE_METRICS(double)

}  // namespace mxr
