#include "mxr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <ostream>

#include "mxr/metrics.hpp"

namespace mxr {

namespace {

// Half-cosine from a (f = 0) to b (f = 1). Each half is evaluated from its own
// endpoint so both ends come out exact.
double cosine_ramp(double a, double b, double f) {
  const double c = std::cos(std::numbers::pi * f);
  return f <= 0.5 ? a + (b - a) * (1.0 - c) / 2.0 : b - (b - a) * (1.0 + c) / 2.0;
}

}  // namespace

// --- schedule -------------------------------------------------------------------------

void OneCycleSchedule::validate() const {
  if (!(phase1 > 0) || !(phase2 > 0)) throw ConfigError("one-cycle phases must be positive");
  if (iterations_per_epoch < 1) throw ConfigError("iterations_per_epoch must be >= 1");
  if (!(lr_start > 0) || !(lr_peak > 0) || !(lr_end > 0)) throw ConfigError("learning rates must be positive");
  if (mom_start <= 0 || mom_start >= 1 || mom_trough <= 0 || mom_trough >= 1)
    throw ConfigError("momentum values must lie in (0, 1)");
}

double OneCycleSchedule::lr_warmup(double t) const { return cosine_ramp(lr_start, lr_peak, t / phase1); }
double OneCycleSchedule::lr_anneal(double t) const { return cosine_ramp(lr_peak, lr_end, (t - phase1) / phase2); }
double OneCycleSchedule::mom_warmup(double t) const { return cosine_ramp(mom_start, mom_trough, t / phase1); }
double OneCycleSchedule::mom_anneal(double t) const { return cosine_ramp(mom_trough, mom_start, (t - phase1) / phase2); }

namespace {

void check_time(const OneCycleSchedule& s, double t, const char* fn) {
  if (!(t >= 0 && t <= s.total_epochs()))
    throw ContractError(std::string(fn) + ": t = " + std::to_string(t) + " outside [0, " +
                        std::to_string(s.total_epochs()) + "]");
}

}  // namespace

double OneCycleSchedule::lr_at(double t) const {
  check_time(*this, t, "lr_at");
  return t <= phase1 ? lr_warmup(t) : lr_anneal(t);
}

double OneCycleSchedule::mom_at(double t) const {
  check_time(*this, t, "mom_at");
  return t <= phase1 ? mom_warmup(t) : mom_anneal(t);
}

OneCycleSchedule OneCycleSchedule::for_epochs(double epochs, std::int64_t iterations_per_epoch) {
  if (!(epochs > 0)) throw ConfigError("one-cycle schedule needs a positive epoch count");
  OneCycleSchedule s;
  s.phase1 = 0.3 * epochs;
  s.phase2 = epochs - s.phase1;
  s.iterations_per_epoch = iterations_per_epoch;
  return s;
}

// --- AdamW ----------------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(std::vector<nn::NamedTensor<T>> params, AdamWConfig cfg) : cfg_(cfg) {
  if (!(cfg.beta2 > 0 && cfg.beta2 < 1)) throw ConfigError("AdamW: beta2 must lie in (0, 1)");
  if (!(cfg.eps > 0)) throw ConfigError("AdamW: eps must be positive");
  if (cfg.weight_decay < 0) throw ConfigError("AdamW: weight decay must be non-negative");
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    const auto n = static_cast<std::size_t>(p.tensor.numel());
    slots_.push_back({p.name, std::vector<T>(n, T(0)), std::vector<T>(n, T(0))});
    params_.push_back(std::move(p));
  }
}

template <typename T>
void AdamW<T>::step(double lr, double beta1) {
  if (!(lr > 0)) throw ContractError("AdamW: learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ContractError("AdamW: beta1 must lie in [0, 1)");
  for (const auto& p : params_)
    if (!p.tensor.has_grad()) throw ContractError("AdamW: parameter '" + p.name + "' has no gradient");
  ++step_;
  const double b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> w = params_[i].tensor;
    auto data = w.mutable_data();
    auto grad = w.grad();
    auto& m = slots_[i].m;
    auto& v = slots_[i].v;
    const double decay = params_[i].decay ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = static_cast<T>(beta1 * m[j] + (1.0 - beta1) * g);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g * g);
      double x = data[j];
      x -= decay * x;
      x -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      data[j] = static_cast<T>(x);
    }
  }
}

template <typename T>
void AdamW<T>::restore(std::int64_t step, const std::vector<Slot>& slots) {
  if (step < 0) throw IntegrityError("optimizer state: negative step count");
  if (slots.size() != slots_.size())
    throw IntegrityError("optimizer state holds " + std::to_string(slots.size()) + " slots, expected " +
                         std::to_string(slots_.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != slots_[i].name) throw IntegrityError("optimizer state: unexpected slot '" + slots[i].name + "'");
    if (slots[i].m.size() != slots_[i].m.size() || slots[i].v.size() != slots_[i].v.size())
      throw IntegrityError("optimizer state: size mismatch for '" + slots[i].name + "'");
  }
  slots_ = slots;
  step_ = step;
}

// --- augmentation ----------------------------------------------------------------------

template <class Tag>
Planar<Tag> rot90(const Planar<Tag>& p, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return p;
  const bool swap = k % 2 == 1;
  Planar<Tag> out(p.channels, swap ? p.width : p.height, swap ? p.height : p.width);
  for (std::int64_t c = 0; c < p.channels; ++c)
    for (std::int64_t y = 0; y < out.height; ++y)
      for (std::int64_t x = 0; x < out.width; ++x) {
        std::int64_t sy = y, sx = x;
        switch (k) {
          case 1: sy = x; sx = p.width - 1 - y; break;
          case 2: sy = p.height - 1 - y; sx = p.width - 1 - x; break;
          case 3: sy = p.height - 1 - x; sx = y; break;
        }
        out.at(c, y, x) = p.at(c, sy, sx);
      }
  return out;
}

template <class Tag>
Planar<Tag> flip_horizontal(const Planar<Tag>& p) {
  Planar<Tag> out = p;
  for (std::int64_t c = 0; c < p.channels; ++c)
    for (std::int64_t y = 0; y < p.height; ++y)
      for (std::int64_t x = 0; x < p.width; ++x) out.at(c, y, x) = p.at(c, y, p.width - 1 - x);
  return out;
}

template <class Tag>
Planar<Tag> flip_vertical(const Planar<Tag>& p) {
  Planar<Tag> out = p;
  for (std::int64_t c = 0; c < p.channels; ++c)
    for (std::int64_t y = 0; y < p.height; ++y)
      for (std::int64_t x = 0; x < p.width; ++x) out.at(c, y, x) = p.at(c, p.height - 1 - y, x);
  return out;
}

template <class Tag>
static Planar<Tag> crop(const Planar<Tag>& p, std::int64_t top, std::int64_t left, std::int64_t size) {
  Planar<Tag> out(p.channels, size, size);
  for (std::int64_t c = 0; c < p.channels; ++c)
    for (std::int64_t y = 0; y < size; ++y)
      std::copy_n(p.data.begin() + ((c * p.height + top + y) * p.width + left), size, &out.at(c, y, 0));
  return out;
}

void AugmentConfig::validate() const {
  if (flip_h < 0 || flip_h > 1 || flip_v < 0 || flip_v > 1) throw ConfigError("flip probabilities must lie in [0, 1]");
  for (const auto* r : {&brightness, &contrast})
    if (!((*r)[0] > 0) || (*r)[1] < (*r)[0]) throw ConfigError("jitter factor ranges must be positive and ordered");
  if (crop < 0) throw ConfigError("crop size must be non-negative");
}

std::pair<RgbImage, HyperCube> augment(const RgbImage& rgb, const HyperCube& cube, const AugmentConfig& cfg,
                                       AugmentRng& rng) {
  cfg.validate();
  if (rgb.height != cube.height || rgb.width != cube.width)
    throw DimensionError("augment: rgb " + shape_str(rgb.shape()) + " and cube " + shape_str(cube.shape()) +
                         " are not spatially aligned");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RgbImage a = rgb;
  HyperCube b = cube;
  if (cfg.crop > 0) {
    if (cfg.crop > rgb.height || cfg.crop > rgb.width)
      throw DimensionError("augment: crop " + std::to_string(cfg.crop) + " exceeds image " + shape_str(rgb.shape()));
    const auto top = std::uniform_int_distribution<std::int64_t>(0, rgb.height - cfg.crop)(rng);
    const auto left = std::uniform_int_distribution<std::int64_t>(0, rgb.width - cfg.crop)(rng);
    a = crop(a, top, left, cfg.crop);
    b = crop(b, top, left, cfg.crop);
  }
  if (unit(rng) < cfg.flip_h) {
    a = flip_horizontal(a);
    b = flip_horizontal(b);
  }
  if (unit(rng) < cfg.flip_v) {
    a = flip_vertical(a);
    b = flip_vertical(b);
  }
  if (cfg.rotate) {
    const int k = std::uniform_int_distribution<int>(0, 3)(rng);
    a = rot90(a, k);
    b = rot90(b, k);
  }
  const double bright = std::uniform_real_distribution<double>(cfg.brightness[0], cfg.brightness[1])(rng);
  const double contrast = std::uniform_real_distribution<double>(cfg.contrast[0], cfg.contrast[1])(rng);
  if (bright != 1.0) {
    for (auto& v : a.data) v = static_cast<float>(v * bright);
    for (auto& v : b.data) v = static_cast<float>(v * bright);
  }
  if (contrast != 1.0 && !a.data.empty()) {
    const double mu = std::accumulate(a.data.begin(), a.data.end(), 0.0) / static_cast<double>(a.data.size());
    for (auto& v : a.data) v = static_cast<float>(mu + contrast * (v - mu));
  }
  return {std::move(a), std::move(b)};
}

// --- normalization -----------------------------------------------------------------------

NormalizationStats NormalizationStats::identity(std::int64_t rgb_channels, std::int64_t cube_channels) {
  NormalizationStats s;
  s.rgb_mean.assign(static_cast<std::size_t>(rgb_channels), 0.0f);
  s.rgb_std.assign(static_cast<std::size_t>(rgb_channels), 1.0f);
  s.cube_mean.assign(static_cast<std::size_t>(cube_channels), 0.0f);
  s.cube_std.assign(static_cast<std::size_t>(cube_channels), 1.0f);
  return s;
}

namespace {

template <class Tag>
void channel_stats(const std::vector<const Planar<Tag>*>& items, std::vector<float>& mean, std::vector<float>& std) {
  const std::int64_t C = items.front()->channels;
  std::vector<double> s(static_cast<std::size_t>(C), 0.0), s2(static_cast<std::size_t>(C), 0.0);
  std::vector<double> n(static_cast<std::size_t>(C), 0.0);
  for (const auto* p : items) {
    if (p->channels != C) throw DimensionError("normalization stats: channel counts differ across samples");
    const std::int64_t plane = p->height * p->width;
    for (std::int64_t c = 0; c < C; ++c) {
      double a = 0;
      for (std::int64_t i = 0; i < plane; ++i) a += p->data[static_cast<std::size_t>(c * plane + i)];
      s[c] += a;
      n[c] += static_cast<double>(plane);
    }
  }
  mean.resize(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) mean[c] = static_cast<float>(s[c] / n[c]);
  for (const auto* p : items) {
    const std::int64_t plane = p->height * p->width;
    for (std::int64_t c = 0; c < C; ++c) {
      double a = 0;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = p->data[static_cast<std::size_t>(c * plane + i)] - static_cast<double>(mean[c]);
        a += d * d;
      }
      s2[c] += a;
    }
  }
  std.resize(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) std[c] = static_cast<float>(std::max(std::sqrt(s2[c] / n[c]), 1e-6));
}

}  // namespace

NormalizationStats NormalizationStats::compute(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("normalization stats: no samples");
  std::vector<const RgbImage*> rgb;
  std::vector<const HyperCube*> cube;
  for (const auto& s : samples) {
    rgb.push_back(&s.rgb);
    cube.push_back(&s.cube);
  }
  NormalizationStats out;
  channel_stats(rgb, out.rgb_mean, out.rgb_std);
  channel_stats(cube, out.cube_mean, out.cube_std);
  return out;
}

void NormalizationStats::validate() const {
  if (rgb_mean.size() != rgb_std.size() || cube_mean.size() != cube_std.size())
    throw ConfigError("normalization stats: mean/std lengths differ");
  for (const auto* v : {&rgb_std, &cube_std})
    for (float s : *v)
      if (!(s > 0)) throw ConfigError("normalization stats: std must be positive");
}

namespace {

template <typename T>
Tensor<T> affine_channels(const Tensor<T>& x, const std::vector<float>& mean, const std::vector<float>& std,
                          bool forward) {
  if (x.rank() != 4 || static_cast<std::size_t>(x.dim(1)) != mean.size() || mean.size() != std.size())
    throw DimensionError("normalize: tensor " + shape_str(x.shape()) + " does not match " +
                         std::to_string(mean.size()) + " channel stats");
  std::vector<T> out(x.data().begin(), x.data().end());
  const std::int64_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T mu = mean[c], sd = std[c];
      T* p = out.data() + (n * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) p[i] = forward ? (p[i] - mu) / sd : p[i] * sd + mu;
    }
  return Tensor<T>(x.shape(), std::move(out));
}

}  // namespace

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const std::vector<float>& mean, const std::vector<float>& std) {
  return affine_channels(x, mean, std, true);
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& x, const std::vector<float>& mean, const std::vector<float>& std) {
  return affine_channels(x, mean, std, false);
}

// --- log records -----------------------------------------------------------------------------

std::string format_record(const IterationRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "iter epoch=%lld iter=%lld lr=%.9e mom=%.9f total=%.9e pixel=%.9e feat=%.9e,%.9e,%.9e "
                "style=%.9e,%.9e,%.9e",
                static_cast<long long>(r.epoch), static_cast<long long>(r.iter), r.lr, r.momentum, r.total, r.pixel,
                r.feature[0], r.feature[1], r.feature[2], r.style[0], r.style[1], r.style[2]);
  return buf;
}

std::string format_record(const EpochRecord& r) {
  char buf[256];
  if (r.val_mrae)
    std::snprintf(buf, sizeof buf, "epoch epoch=%lld loss=%.9e val_mrae=%.9e", static_cast<long long>(r.epoch),
                  r.mean_loss, *r.val_mrae);
  else
    std::snprintf(buf, sizeof buf, "epoch epoch=%lld loss=%.9e val_mrae=-", static_cast<long long>(r.epoch),
                  r.mean_loss);
  return buf;
}

// --- fit -----------------------------------------------------------------------------------

template <typename T>
TrainingLog fit(MXRUNet<T>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                LossNetwork<T>* loss_net, const NormalizationStats& stats, const FitOptions& opts,
                AdamW<T>* optimizer) {
  TrainingLog log;
  if (opts.epochs < 0) throw ConfigError("epoch count must be non-negative");
  if (opts.epochs == 0) return log;
  if (train.empty()) throw ContractError("fit: training set is empty");
  if (opts.batch_size < 1) throw ConfigError("batch size must be >= 1");
  opts.loss.validate();
  stats.validate();
  if (opts.augment) opts.augment->validate();

  const auto n = static_cast<std::int64_t>(train.size());
  const std::int64_t ipe = (n + opts.batch_size - 1) / opts.batch_size;
  const OneCycleSchedule sched =
      opts.schedule ? *opts.schedule : OneCycleSchedule::for_epochs(static_cast<double>(opts.epochs), ipe);
  sched.validate();
  if (sched.iterations_per_epoch != ipe)
    throw ConfigError("schedule expects " + std::to_string(sched.iterations_per_epoch) +
                      " iterations per epoch, the data gives " + std::to_string(ipe));
  if (static_cast<double>(opts.epochs) > sched.total_epochs())
    throw ConfigError("training for " + std::to_string(opts.epochs) + " epochs exceeds the schedule length");

  std::optional<AdamW<T>> own;
  if (!optimizer) {
    own.emplace(model.parameters(), opts.adamw);
    optimizer = &*own;
  }
  AugmentRng rng(opts.seed);
  std::vector<std::size_t> order(train.size());
  std::int64_t it = 0;

  for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    model.train();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::int64_t b = 0; b < ipe; ++b, ++it) {
      std::vector<RgbImage> rgbs;
      std::vector<HyperCube> cubes;
      for (std::int64_t k = b * opts.batch_size; k < std::min(n, (b + 1) * opts.batch_size); ++k) {
        const Sample& s = train[order[static_cast<std::size_t>(k)]];
        if (opts.augment) {
          auto [r, c] = augment(s.rgb, s.cube, *opts.augment, rng);
          rgbs.push_back(std::move(r));
          cubes.push_back(std::move(c));
        } else {
          rgbs.push_back(s.rgb);
          cubes.push_back(s.cube);
        }
      }
      std::vector<const RgbImage*> rp;
      std::vector<const HyperCube*> cp;
      for (std::size_t k = 0; k < rgbs.size(); ++k) {
        rp.push_back(&rgbs[k]);
        cp.push_back(&cubes[k]);
      }
      const Tensor<T> x = normalize(stack<T>(rp), stats.rgb_mean, stats.rgb_std);
      const Tensor<T> y = normalize(stack<T>(cp), stats.cube_mean, stats.cube_std);

      const double t = sched.time_of(it);
      IterationRecord rec;
      rec.epoch = epoch;
      rec.iter = it;
      rec.lr = sched.lr_at(t);
      rec.momentum = sched.mom_at(t);

      model.zero_grad();
      auto terms = total_loss(model.forward(x), y, loss_net, opts.loss);
      rec.total = terms.total.item();
      rec.pixel = terms.pixel;
      rec.feature = terms.feature;
      rec.style = terms.style;
      if (!std::isfinite(rec.total)) {
        throw NumericError("non-finite loss at iteration " + std::to_string(it) + " (epoch " + std::to_string(epoch) +
                           "): " + format_record(rec));
      }
      terms.total.backward();
      optimizer->step(rec.lr, rec.momentum);
      epoch_loss += rec.total;
      log.iterations.push_back(rec);
      if (opts.log) *opts.log << format_record(rec) << '\n';
    }
    EpochRecord er;
    er.epoch = epoch;
    er.mean_loss = epoch_loss / static_cast<double>(ipe);
    if (!val.empty()) er.val_mrae = evaluate_dataset(model, val, stats).mrae;
    log.epochs.push_back(er);
    if (opts.log) *opts.log << format_record(er) << std::endl;
    if (opts.on_epoch) opts.on_epoch(er);
  }
  model.eval();
  return log;
}

#define MXR_INSTANTIATE_TRAINING(T)                                                                        \
  template class AdamW<T>;                                                                                 \
  template Tensor<T> normalize<T>(const Tensor<T>&, const std::vector<float>&, const std::vector<float>&);  \
  template Tensor<T> denormalize<T>(const Tensor<T>&, const std::vector<float>&, const std::vector<float>&); \
  template TrainingLog fit<T>(MXRUNet<T>&, const std::vector<Sample>&, const std::vector<Sample>&, LossNetwork<T>*, \
                              const NormalizationStats&, const FitOptions&, AdamW<T>*);

MXR_INSTANTIATE_TRAINING(float)
MXR_INSTANTIATE_TRAINING(double)

template RgbImage rot90(const RgbImage&, int);
template HyperCube rot90(const HyperCube&, int);
template RgbImage flip_horizontal(const RgbImage&);
template HyperCube flip_horizontal(const HyperCube&);
template RgbImage flip_vertical(const RgbImage&);
template HyperCube flip_vertical(const HyperCube&);

}  // namespace mxr
