#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mxr/loss.hpp"
#include "mxr/model.hpp"
#include "mxr/training.hpp"

namespace mxr {

enum class Track { Clean, Real };

Track parse_track(const std::string& s);
std::string track_name(Track t);

/// Everything a `train` run needs. Loaded from JSON; every key is optional
/// except the training root.
struct RunConfig {
  std::filesystem::path train_root;
  std::optional<std::filesystem::path> val_root;
  Track track = Track::Clean;
  ModelConfig model;
  LossWeights loss;
  std::optional<std::filesystem::path> loss_net_weights;
  WidthMultiplier loss_net_width;
  std::uint64_t loss_net_seed = 0;
  double lr_start = 1e-5, lr_peak = 1e-3, lr_end = 1e-9;
  double mom_start = 0.95, mom_trough = 0.85;
  std::int64_t epochs = 200;
  std::int64_t batch_size = 8;
  bool augment = true;
  std::int64_t crop = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  std::filesystem::path out_dir = "runs";

  /// Schedule shape for a run with the given iterations per epoch.
  OneCycleSchedule schedule(std::int64_t iterations_per_epoch) const;
  /// Checks values and that referenced paths exist.
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string to_json(const RunConfig& cfg);

}  // namespace mxr
