#include "mxr/selftest.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>

#include "mxr/gradcheck.hpp"
#include "mxr/loss.hpp"
#include "mxr/metrics.hpp"
#include "mxr/model.hpp"
#include "mxr/training.hpp"

namespace mxr::selftest {

namespace {

using D = double;
using Rng = std::mt19937_64;

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

class Recorder {
 public:
  Recorder(SuiteResult& r, const Options& o) : r_(r), o_(o) {}

  bool operator()(std::string name, bool ok, std::string detail = {}) {
    if (o_.log) *o_.log << "  " << (ok ? "ok   " : "FAIL ") << name << (detail.empty() ? "" : "  " + detail) << std::endl;
    r_.checks.push_back({std::move(name), ok, std::move(detail)});
    return ok;
  }

  void grad(const std::string& name, const GradCheckResult& g) {
    (*this)(name, g.passed(), fmt("max_rel=%.2e max_abs=%.2e n=%.0f", g.max_rel_error, g.max_abs_error,
                                  static_cast<double>(g.elements)));
  }

 private:
  SuiteResult& r_;
  const Options& o_;
};

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// --- 1: gradients ---------------------------------------------------------------------------

// Scalar probe of a tensor-valued function: sum(f(x) ⊙ R) with fixed random R.
std::function<Tensor<D>(const Tensor<D>&)> projected(std::function<Tensor<D>(const Tensor<D>&)> f, const Tensor<D>& x,
                                                     Rng& rng) {
  Shape out;
  {
    NoGradGuard g;
    out = f(x).shape();
  }
  Tensor<D> r = randn<D>(out, rng);
  return [f = std::move(f), r](const Tensor<D>& v) {
    Tensor<D> y = f(v);
    return y.rank() == 0 ? mul_scalar(y, r.numel() == 1 ? r.data()[0] : 1.0) : sum(mul(y, r));
  };
}

GradCheckResult check_fn(std::function<Tensor<D>(const Tensor<D>&)> f, const Tensor<D>& x, Rng& rng, double h = 1e-5) {
  return check_gradient(projected(std::move(f), x, rng), x, h);
}

GradCheckResult check_param(Tensor<D> p, const std::function<Tensor<D>()>& f, Rng& rng) {
  Shape out;
  {
    NoGradGuard g;
    out = f().shape();
  }
  Tensor<D> r = randn<D>(out, rng);
  return check_parameter_gradient(p, [&] {
    Tensor<D> y = f();
    return y.rank() == 0 ? y : sum(mul(y, r));
  });
}

// Zero-initialized norm scales and gates would hide whole branches from the check.
void randomize_scales(const nn::Module<D>& m, Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& p : m.parameters()) {
    if (p.tensor.rank() <= 1 && (p.name.ends_with("weight") || p.name == "gamma")) {
      Tensor<D> t = p.tensor;
      for (auto& v : t.mutable_data()) v = u(rng);
    }
  }
}

void gradient_suite(Recorder& rec) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    const std::string s = " seed " + std::to_string(seed);
    auto X = [&](Shape sh) { return randn<D>(std::move(sh), rng); };

    // convolution
    {
      Tensor<D> x = X({2, 3, 5, 5}), w = X({4, 3, 3, 3}), b = X({4});
      rec.grad("conv2d 3x3 dx" + s, check_fn([&](const Tensor<D>& v) { return conv2d(v, w, b, 1, 1); }, x, rng));
      rec.grad("conv2d 3x3 dw" + s, check_fn([&](const Tensor<D>& v) { return conv2d(x, v, b, 1, 1); }, w, rng));
      rec.grad("conv2d 3x3 db" + s, check_fn([&](const Tensor<D>& v) { return conv2d(x, w, v, 1, 1); }, b, rng));
      rec.grad("conv2d stride2 dx" + s, check_fn([&](const Tensor<D>& v) { return conv2d(v, w, b, 2, 1); }, x, rng));
      rec.grad("conv2d stride2 dw" + s, check_fn([&](const Tensor<D>& v) { return conv2d(x, v, b, 2, 1); }, w, rng));
      Tensor<D> w1 = X({5, 3, 1, 1});
      rec.grad("conv2d 1x1 dx" + s, check_fn([&](const Tensor<D>& v) { return conv2d(v, w1, Tensor<D>(), 1, 0); }, x, rng));
      rec.grad("conv2d 1x1 dw" + s, check_fn([&](const Tensor<D>& v) { return conv2d(x, v, Tensor<D>(), 1, 0); }, w1, rng));
    }
    // batch norm
    {
      Tensor<D> x = X({3, 2, 3, 3}), g = X({2}), b = X({2});
      auto st = BatchNormState<D>::make(2);
      rec.grad("batch_norm train dx" + s, check_fn([&](const Tensor<D>& v) { return batch_norm2d(v, g, b, st, true); }, x, rng));
      rec.grad("batch_norm train dgamma" + s, check_fn([&](const Tensor<D>& v) { return batch_norm2d(x, v, b, st, true); }, g, rng));
      rec.grad("batch_norm train dbeta" + s, check_fn([&](const Tensor<D>& v) { return batch_norm2d(x, g, v, st, true); }, b, rng));
      rec.grad("batch_norm eval dx" + s, check_fn([&](const Tensor<D>& v) { return batch_norm2d(v, g, b, st, false); }, x, rng));
    }
    // pooling, padding, cropping
    {
      Tensor<D> x = X({2, 2, 6, 6});
      rec.grad("avg_pool2d dx" + s, check_fn([](const Tensor<D>& v) { return avg_pool2d(v, 2, 2); }, x, rng));
      rec.grad("avg_pool2d padded dx" + s,
               check_fn([](const Tensor<D>& v) { return avg_pool2d(v, 3, 2, PadMode::Zero, Padding2d::uniform(1)); }, x, rng));
      rec.grad("max_pool2d dx" + s, check_fn([](const Tensor<D>& v) { return max_pool2d(v, 3, 2, 1); }, x, rng));
      for (auto [mode, name] : {std::pair{PadMode::Zero, "zero"}, {PadMode::Replicate, "replicate"}, {PadMode::Reflect, "reflect"}})
        rec.grad(std::string("pad2d ") + name + " dx" + s,
                 check_fn([mode](const Tensor<D>& v) { return pad2d(v, mode, Padding2d{1, 2, 3, 1}); }, x, rng));
      rec.grad("crop2d dx" + s, check_fn([](const Tensor<D>& v) { return crop2d(v, 1, 2, 3, 4); }, x, rng));
    }
    // linear algebra and shape ops
    {
      Tensor<D> a = X({2, 3, 4}), b = X({2, 4, 5}), m = X({4, 5});
      rec.grad("matmul da" + s, check_fn([&](const Tensor<D>& v) { return matmul(v, b); }, a, rng));
      rec.grad("matmul db" + s, check_fn([&](const Tensor<D>& v) { return matmul(a, v); }, b, rng));
      rec.grad("matmul shared rhs" + s, check_fn([&](const Tensor<D>& v) { return matmul(a, v); }, m, rng));
      rec.grad("transpose_last2" + s, check_fn([](const Tensor<D>& v) { return transpose_last2(v); }, a, rng));
      rec.grad("reshape" + s, check_fn([](const Tensor<D>& v) { return reshape(v, {6, 4}); }, a, rng));
      rec.grad("softmax last axis" + s, check_fn([](const Tensor<D>& v) { return softmax(v, -1); }, a, rng));
      rec.grad("softmax axis 1" + s, check_fn([](const Tensor<D>& v) { return softmax(v, 1); }, a, rng));
      Tensor<D> p = X({2, 3, 2, 2}), q = X({2, 2, 2, 2});
      rec.grad("concat_channels" + s, check_fn([&](const Tensor<D>& v) { return concat_channels<D>({v, q, v}); }, p, rng));
      rec.grad("slice_channels" + s, check_fn([](const Tensor<D>& v) { return slice_channels(v, 1, 3); }, p, rng));
    }
    // elementwise
    {
      Tensor<D> x = X({2, 3, 4}), y = X({2, 3, 4}), k = X({1});
      Tensor<D> pos = rand_uniform<D>({2, 3, 4}, rng, 0.2, 3.0);
      rec.grad("add" + s, check_fn([&](const Tensor<D>& v) { return add(v, y); }, x, rng));
      rec.grad("sub" + s, check_fn([&](const Tensor<D>& v) { return sub(y, v); }, x, rng));
      rec.grad("mul" + s, check_fn([&](const Tensor<D>& v) { return mul(v, y); }, x, rng));
      rec.grad("add_scalar" + s, check_fn([](const Tensor<D>& v) { return add_scalar(v, 0.7); }, x, rng));
      rec.grad("mul_scalar" + s, check_fn([](const Tensor<D>& v) { return mul_scalar(v, -1.3); }, x, rng));
      rec.grad("scale dx" + s, check_fn([&](const Tensor<D>& v) { return scale(v, k); }, x, rng));
      rec.grad("scale dk" + s, check_fn([&](const Tensor<D>& v) { return scale(x, v); }, k, rng));
      rec.grad("tanh" + s, check_fn([](const Tensor<D>& v) { return tanh(v); }, x, rng));
      rec.grad("softplus" + s, check_fn([](const Tensor<D>& v) { return softplus(v); }, x, rng));
      rec.grad("exp" + s, check_fn([](const Tensor<D>& v) { return exp(v); }, x, rng));
      rec.grad("log" + s, check_fn([](const Tensor<D>& v) { return log(v); }, pos, rng));
      rec.grad("abs" + s, check_fn([](const Tensor<D>& v) { return abs(v); }, x, rng));
      rec.grad("square" + s, check_fn([](const Tensor<D>& v) { return square(v); }, x, rng));
      rec.grad("relu" + s, check_fn([](const Tensor<D>& v) { return relu(v); }, x, rng));
      rec.grad("sum" + s, check_fn([](const Tensor<D>& v) { return sum(v); }, x, rng));
      rec.grad("mean" + s, check_fn([](const Tensor<D>& v) { return mean(v); }, x, rng));
      Tensor<D> wide = mul_scalar(X({3, 8}), 4.0);
      rec.grad("mish" + s, check_fn([](const Tensor<D>& v) { return nn::mish(v); }, wide, rng));
    }
    // sub-pixel layers
    {
      Tensor<D> x = X({1, 8, 3, 3});
      rec.grad("pixel_shuffle" + s, check_fn([](const Tensor<D>& v) { return nn::pixel_shuffle(v, 2); }, x, rng));
      rec.grad("pixel_unshuffle" + s,
               check_fn([](const Tensor<D>& v) { return nn::pixel_unshuffle(v, 2); }, X({1, 2, 4, 6}), rng));
      rec.grad("blur" + s, check_fn([](const Tensor<D>& v) { return nn::blur(v); }, X({2, 2, 4, 5}), rng));
      nn::PixelShuffleUpsampler<D> up(4, 3, 2, true, rng);
      randomize_scales(up, rng);
      Tensor<D> u = X({2, 4, 3, 3});
      rec.grad("upsampler dx" + s, check_fn([&](const Tensor<D>& v) { return up.forward(v); }, u, rng));
      rec.grad("upsampler dw" + s, check_param(up.conv->weight, [&] { return up.forward(u); }, rng));
    }
    // convolutional blocks (train-mode batch norm)
    {
      nn::ConvBnAct<D> cba(nn::ConvBnActSpec{3, 4, 3, 2}, rng);
      Tensor<D> x = X({2, 3, 6, 6});
      rec.grad("conv_bn_mish dx" + s, check_fn([&](const Tensor<D>& v) { return cba.forward(v); }, x, rng));
      for (auto kind : {nn::BlockKind::Basic, nn::BlockKind::Bottleneck}) {
        nn::XResnetBlock<D> blk(nn::XResnetBlockSpec{kind, 4, 8, 2}, rng);
        randomize_scales(blk, rng);
        const std::string k = kind == nn::BlockKind::Basic ? "basic" : "bottleneck";
        Tensor<D> xb = X({2, 4, 4, 4});
        rec.grad("xresnet " + k + " block dx" + s, check_fn([&](const Tensor<D>& v) { return blk.forward(v); }, xb, rng));
        rec.grad("xresnet " + k + " block dw" + s,
                 check_param(blk.main.front()->conv->weight, [&] { return blk.forward(xb); }, rng));
      }
      nn::BasicResBlock<D> res(3, rng);
      randomize_scales(res, rng);
      rec.grad("head res block dx" + s, check_fn([&](const Tensor<D>& v) { return res.forward(v); }, X({2, 3, 4, 4}), rng));
    }
    // self-attention
    {
      nn::SelfAttention<D> att(16, rng);
      randomize_scales(att, rng);
      Tensor<D> x = X({2, 16, 3, 3});
      rec.grad("self_attention dx" + s, check_fn([&](const Tensor<D>& v) { return att.forward(v); }, x, rng));
      rec.grad("self_attention dgamma" + s, check_param(att.gamma, [&] { return att.forward(x); }, rng));
      rec.grad("self_attention dquery" + s, check_param(att.query->weight, [&] { return att.forward(x); }, rng));
      rec.grad("self_attention dkey" + s, check_param(att.key->weight, [&] { return att.forward(x); }, rng));
      rec.grad("self_attention dvalue" + s, check_param(att.value->weight, [&] { return att.forward(x); }, rng));
    }
    // decoder block
    {
      nn::UnetDecoderBlock<D> dec(8, 4, true, rng);
      randomize_scales(dec, rng);
      Tensor<D> up = X({2, 8, 2, 2}), skip = X({2, 4, 4, 4});
      rec.grad("decoder block dup" + s, check_fn([&](const Tensor<D>& v) { return dec.forward(v, skip); }, up, rng));
      rec.grad("decoder block dskip" + s, check_fn([&](const Tensor<D>& v) { return dec.forward(up, v); }, skip, rng));
      rec.grad("decoder block dw" + s, check_param(dec.conv1->conv->weight, [&] { return dec.forward(up, skip); }, rng));
    }
    // loss terms
    {
      Tensor<D> a = X({2, 3, 4, 4}), b = X({2, 3, 4, 4});
      rec.grad("feature_loss" + s, check_fn([&](const Tensor<D>& v) { return feature_loss(v, b); }, a, rng));
      rec.grad("gram" + s, check_fn([](const Tensor<D>& v) { return gram(v); }, a, rng));
      rec.grad("style_loss" + s, check_fn([&](const Tensor<D>& v) { return style_loss(v, b); }, a, rng));
      rec.grad("pixel_loss" + s, check_fn([&](const Tensor<D>& v) { return pixel_loss(v, b); }, a, rng));

      auto net = build_loss_network<D>({31, WidthMultiplier{1, 8}}, seed);
      Tensor<D> pred = X({1, 31, 8, 8}), target = X({1, 31, 8, 8});
      const LossWeights feat{{1, 1, 1}, {0, 0, 0}, 0};
      const LossWeights style{{0, 0, 0}, {5e3, 5e3, 5e3}, 0};
      const LossWeights all{};
      for (auto [w, name] : {std::pair{feat, "feature"}, {style, "style"}, {all, "total"}}) {
        auto f = [&, w = w](const Tensor<D>& v) { return total_loss(v, target, net.get(), w).total; };
        rec.grad(std::string("loss network ") + name + " terms" + s, check_gradient(f, pred, 1e-5));
      }
    }
  }
}

// --- 2: schedule -----------------------------------------------------------------------------

bool rel_close(double got, double want, double tol) { return std::abs(got - want) <= tol * std::abs(want); }

void schedule_suite(Recorder& rec) {
  const OneCycleSchedule s;
  const struct {
    const char* name;
    double got, want;
  } cases[] = {
      {"lr_at(0)", s.lr_at(0), 1e-5},        {"lr_at(60)", s.lr_at(60), 1e-3},
      {"lr_at(200)", s.lr_at(200), 1e-9},    {"lr_at(30)", s.lr_at(30), 5.05e-4},
      {"mom_at(0)", s.mom_at(0), 0.95},      {"mom_at(60)", s.mom_at(60), 0.85},
      {"mom_at(200)", s.mom_at(200), 0.95},  {"mom_at(30)", s.mom_at(30), 0.90},
  };
  for (const auto& c : cases)
    rec(c.name, rel_close(c.got, c.want, 1e-12), fmt("got %.17g want %.17g", c.got, c.want));
  rec("lr continuous at 60 (exact)", s.lr_warmup(60) == s.lr_anneal(60), fmt("%.17g vs %.17g", s.lr_warmup(60), s.lr_anneal(60)));
  rec("mom continuous at 60 (exact)", s.mom_warmup(60) == s.mom_anneal(60),
      fmt("%.17g vs %.17g", s.mom_warmup(60), s.mom_anneal(60)));
  bool decreasing = true, bounded = true, peak = true;
  for (int i = 0; i <= 2000; ++i) {
    const double t = 0.1 * i;
    if (i > 0 && t <= 60 && !(s.mom_at(t) < s.mom_at(t - 0.1))) decreasing = false;
    const double lr = s.lr_at(t), m = s.mom_at(t);
    if (lr < 1e-9 || lr > 1e-3 || m < 0.85 || m > 0.95) bounded = false;
    if (std::abs(t - 60) > 1e-9 && !(lr < s.lr_at(60))) peak = false;
  }
  rec("mom strictly decreasing on [0, 60]", decreasing);
  rec("lr and mom stay in range", bounded);
  rec("lr peaks only at 60", peak);
  bool threw = false;
  try {
    s.lr_at(200.5);
  } catch (const ContractError&) {
    threw = true;
  }
  rec("t outside [0, 200] rejected", threw);
}

// --- 3: layer invariants --------------------------------------------------------------------------

void invariants_suite(Recorder& rec) {
  Rng rng(11);
  {
    nn::PixelShuffleUpsampler<float> up(8, 4, 2, true, rng);
    const Tensor<float> x = randn<float>({2, 8, 5, 5}, rng);
    Tensor<float> u;
    {
      NoGradGuard g;
      u = up.upsample(x);
    }
    bool constant = true;
    for (std::int64_t n = 0; n < u.dim(0); ++n)
      for (std::int64_t c = 0; c < u.dim(1); ++c)
        for (std::int64_t h = 0; h < u.dim(2); h += 2)
          for (std::int64_t w = 0; w < u.dim(3); w += 2) {
            const float v = u.at({n, c, h, w});
            constant = constant && u.at({n, c, h, w + 1}) == v && u.at({n, c, h + 1, w}) == v &&
                       u.at({n, c, h + 1, w + 1}) == v;
          }
    rec("ICNR upsampler output is constant on 2x2 blocks before blur", constant);
  }
  {
    const Tensor<float> x = randn<float>({2, 12, 3, 4}, rng);
    const Tensor<float> y = randn<float>({2, 3, 6, 8}, rng);
    rec("pixel_unshuffle(pixel_shuffle(x)) == x bitwise", bitwise_equal(nn::pixel_unshuffle(nn::pixel_shuffle(x, 2), 2).data(), x.data()));
    rec("pixel_shuffle(pixel_unshuffle(y)) == y bitwise", bitwise_equal(nn::pixel_shuffle(nn::pixel_unshuffle(y, 2), 2).data(), y.data()));
    const Tensor<float> x3 = randn<float>({1, 18, 2, 2}, rng);
    rec("pixel shuffle r=3 round trip bitwise", bitwise_equal(nn::pixel_unshuffle(nn::pixel_shuffle(x3, 3), 3).data(), x3.data()));
  }
  {
    nn::SelfAttention<float> att(32, rng);
    const Tensor<float> x = randn<float>({2, 32, 4, 5}, rng);
    NoGradGuard g;
    rec("self-attention with gamma = 0 is the identity (bitwise)", bitwise_equal(att.forward(x).data(), x.data()));
    const Tensor<float> a = att.attention_map(x);
    double worst = 0;
    const std::int64_t rows = a.dim(0) * a.dim(1), cols = a.dim(2);
    for (std::int64_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::int64_t k = 0; k < cols; ++k) s += a.data()[r * cols + k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    rec("attention rows sum to 1 within 1e-6", worst <= 1e-6, fmt("max deviation %.2e", worst));
  }
  {
    double worst = 0;
    for (float c : {0.0f, 1.0f, -2.5f, 0.3f, 1234.567f}) {
      const Tensor<float> x({2, 3, 5, 7}, c);
      const Tensor<float> y = nn::blur(x);
      for (float v : y.data()) worst = std::max(worst, std::abs(static_cast<double>(v) - c) / std::max(1.0f, std::abs(c)));
    }
    rec("blur preserves constant images", worst <= 1e-6, fmt("max relative deviation %.2e", worst));
  }
  {
    const Tensor<D> phi = randn<D>({3, 6, 4, 5}, rng);
    const Tensor<D> G = gram(phi);
    const std::int64_t C = G.dim(1);
    double asym = 0, min_quad = 1e300, min_eig = 1e300, scale = 0;
    for (std::int64_t n = 0; n < G.dim(0); ++n) {
      Eigen::MatrixXd m(C, C);
      for (std::int64_t i = 0; i < C; ++i)
        for (std::int64_t j = 0; j < C; ++j) m(i, j) = G.at({n, i, j});
      scale = std::max(scale, m.cwiseAbs().maxCoeff());
      asym = std::max(asym, (m - m.transpose()).cwiseAbs().maxCoeff());
      for (int t = 0; t < 200; ++t) {
        Eigen::VectorXd v(C);
        for (auto& e : v) e = std::normal_distribution<double>()(rng);
        min_quad = std::min(min_quad, v.dot(m * v));
      }
      min_eig = std::min(min_eig, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff());
    }
    rec("Gram matrices are symmetric", asym <= 1e-12 * scale, fmt("max |G - G^T| %.2e", asym));
    rec("Gram matrices are PSD (x^T G x >= -1e-8)", min_quad >= -1e-8 && min_eig >= -1e-8,
        fmt("min quadratic form %.3e, min eigenvalue %.3e", min_quad, min_eig));
  }
}

// --- 4: model contract ---------------------------------------------------------------------------

void model_suite(Recorder& rec) {
  auto check_model = [&](int depth, const std::vector<std::int64_t>& sizes, std::int64_t batch) {
    ModelConfig cfg;
    cfg.encoder_depth = depth;
    cfg.width = {1, 8};
    auto model = build_unet<float>(cfg, 5);
    model->eval();
    Rng rng(depth);
    for (auto H : sizes)
      for (auto W : sizes) {
        ForwardTrace trace;
        Tensor<float> y;
        {
          NoGradGuard g;
          y = model->forward(rand_uniform<float>({batch, 3, H, W}, rng, 0.0f, 1.0f), &trace);
        }
        const std::string name = "depth " + std::to_string(depth) + " input " + std::to_string(batch) + "x3x" +
                                 std::to_string(H) + "x" + std::to_string(W);
        bool ok = y.shape() == Shape{batch, 31, H, W};
        for (int i = 0; i < 4; ++i) {
          const std::int64_t f = std::int64_t{2} << i;
          ok = ok && trace.taps[i].size() == 4 && trace.taps[i][2] == H / f && trace.taps[i][3] == W / f;
        }
        ok = ok && trace.bottleneck[2] == H / 32 && trace.bottleneck[3] == W / 32;
        std::string taps;
        for (const auto& t : trace.taps) taps += shape_str(t) + " ";
        rec(name, ok, "out " + shape_str(y.shape()) + " taps " + taps + "bottleneck " + shape_str(trace.bottleneck));
      }
  };
  check_model(18, {32, 64, 96, 128}, 1);
  check_model(18, {64}, 2);
  check_model(34, {32, 96}, 1);
  check_model(50, {32, 96}, 1);
  ModelConfig cfg;
  cfg.width = {1, 8};
  auto model = build_unet<float>(cfg, 5);
  bool threw = false;
  try {
    NoGradGuard g;
    model->forward(Tensor<float>({1, 3, 48, 64}, 0.5f));
  } catch (const DimensionError&) {
    threw = true;
  }
  rec("input not a multiple of 32 is rejected", threw);
}

// --- 5: parameter counts -----------------------------------------------------------------------------

void params_suite(Recorder& rec) {
  std::int64_t counts[3];
  const int depths[3] = {18, 34, 50};
  for (int i = 0; i < 3; ++i) {
    ModelConfig cfg;
    cfg.encoder_depth = depths[i];
    counts[i] = count_params(*build_unet<float>(cfg, 1));
  }
  const double ratio = static_cast<double>(counts[2]) / static_cast<double>(counts[0]);
  rec("count(50) / count(18) >= 8", ratio >= 8, fmt("ratio %.3f", ratio));
  rec("count(18) < count(34) < count(50)", counts[0] < counts[1] && counts[1] < counts[2],
      fmt("%.0f < %.0f < %.0f", static_cast<double>(counts[0]), static_cast<double>(counts[1]),
          static_cast<double>(counts[2])));
  rec("reference: depth-18 count vs 31.35M", true, fmt("%.2fM", counts[0] / 1e6));
  rec("reference: depth-50 count vs 342.07M", true, fmt("%.2fM", counts[2] / 1e6));
}

// --- 6: latency -------------------------------------------------------------------------------------

void latency_suite(Recorder& rec, int threads) {
  double med[2];
  const int depths[2] = {18, 50};
  for (int i = 0; i < 2; ++i) {
    ModelConfig cfg;
    cfg.encoder_depth = depths[i];
    auto model = build_unet<float>(cfg, 1);
    const auto rep = benchmark_latency(*model, 256, 3, 10, threads, "mxresnet" + std::to_string(depths[i]));
    med[i] = rep.median;
    rec("depth " + std::to_string(depths[i]) + " median at 256x256", rep.seconds.size() >= 10,
        fmt("median %.4f s, mean %.4f s, threads %.0f", rep.median, rep.mean, threads));
  }
  const double speedup = med[1] / med[0];
  rec("depth-18 at least 2.5x faster than depth-50", speedup >= 2.5, fmt("speedup %.2fx", speedup));
}

// --- 7: loss identities ------------------------------------------------------------------------------

void loss_suite(Recorder& rec) {
  Rng rng(7);
  auto net = build_loss_network<float>({}, 3);
  const Tensor<float> y = rand_uniform<float>({1, 31, 32, 32}, rng, 0.0f, 1.0f);
  {
    NoGradGuard g;
    const double t = total_loss(y, y, net.get(), LossWeights{}).total.item();
    rec("total_loss(y, y) == 0", t == 0.0, fmt("%.3e", t));
  }
  const Tensor<float> p = rand_uniform<float>({1, 31, 32, 32}, rng, 0.0f, 1.0f);
  const float pl = pixel_loss(p, y).item();
  const float g_only = total_loss<float>(p, y, nullptr, LossWeights::pixel_only()).total.item();
  rec("gamma-only total equals pixel_loss exactly", pl == g_only, fmt("%.9g vs %.9g", pl, g_only));
  const Tensor<D> a({1, 2, 3, 4}, 2.0), b({1, 2, 3, 4}, 1.0);
  const double off = pixel_loss(a, b).item();
  rec("pixel_loss of a unit offset is 1", std::abs(off - 1.0) <= 1e-6, fmt("%.17g", off));
  const double hand = pixel_loss(Tensor<D>({1, 1, 1, 2}, {3.0, 4.0}), Tensor<D>({1, 1, 1, 2}, 0.0)).item();
  rec("pixel_loss of differences [3, 4] is 12.5", std::abs(hand - 12.5) <= 1e-6, fmt("%.17g", hand));
  const Tensor<D> G = gram(Tensor<D>({1, 2, 1, 1}, {1.0, 2.0}));
  const std::vector<double> want{0.5, 1.0, 1.0, 2.0};
  rec("gram of [1, 2] is [[0.5, 1], [1, 2]] exactly",
      std::equal(want.begin(), want.end(), G.data().begin(), G.data().end()),
      fmt("[[%g, %g], [%g, ...]]", G.data()[0], G.data()[1], G.data()[2]));
}

// --- 8: overfit smoke ----------------------------------------------------------------------------------

std::vector<Sample> synthetic_pairs(std::uint64_t seed, int count, std::int64_t size) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Fixed positive spectral response per band and a smooth random RGB field.
  std::vector<std::array<double, 3>> resp(31);
  for (int b = 0; b < 31; ++b) {
    const double l = b / 30.0;
    resp[b] = {std::exp(-std::pow((l - 0.8) / 0.25, 2)), std::exp(-std::pow((l - 0.5) / 0.2, 2)),
               std::exp(-std::pow((l - 0.15) / 0.2, 2))};
  }
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    Sample s{"synthetic_" + std::to_string(i), RgbImage(3, size, size), HyperCube(31, size, size)};
    double ph[3][2], fr[3][2];
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 2; ++k) {
        ph[c][k] = 6.283 * u(rng);
        fr[c][k] = 1.0 + 3.0 * u(rng);
      }
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        double rgb[3];
        for (int c = 0; c < 3; ++c) {
          const double fx = static_cast<double>(x) / size, fy = static_cast<double>(y) / size;
          rgb[c] = 0.5 + 0.2 * std::sin(fr[c][0] * 6.283 * fx + ph[c][0]) + 0.2 * std::cos(fr[c][1] * 6.283 * fy + ph[c][1]);
          s.rgb.at(c, y, x) = static_cast<float>(rgb[c]);
        }
        for (int b = 0; b < 31; ++b)
          s.cube.at(b, y, x) =
              static_cast<float>(0.05 + 0.5 * (resp[b][0] * rgb[0] + resp[b][1] * rgb[1] + resp[b][2] * rgb[2]));
      }
    out.push_back(std::move(s));
  }
  return out;
}

void overfit_suite(Recorder& rec) {
  const auto pairs = synthetic_pairs(42, 2, 64);
  ModelConfig cfg;
  cfg.encoder_depth = 18;
  cfg.width = {1, 8};
  auto model = build_unet<float>(cfg, 42);
  const auto stats = NormalizationStats::compute(pairs);
  FitOptions opts;
  opts.epochs = 200;  // two pairs in one batch: one iteration per epoch
  opts.batch_size = 2;
  opts.loss = LossWeights::pixel_only();
  opts.augment.reset();
  opts.adamw.weight_decay = 1e-3;
  opts.schedule = OneCycleSchedule::for_epochs(200, 1);
  opts.schedule->lr_peak = 3e-3;
  opts.seed = 42;
  const auto log = fit<float>(*model, pairs, {}, nullptr, stats, opts);
  const double first = log.iterations.front().pixel, last = log.iterations.back().pixel;
  rec("200 iterations run", log.iterations.size() == 200, fmt("%.0f iterations", static_cast<double>(log.iterations.size())));
  rec("final pixel loss < 10% of initial", last < 0.1 * first, fmt("initial %.4e final %.4e (%.2f%%)", first, last, 100 * last / first));
  const auto report = evaluate_dataset(*model, pairs, stats);
  rec("training MRAE < 0.1", report.mrae < 0.1, fmt("mrae %.4f", report.mrae));
}

// --- 9: metrics -----------------------------------------------------------------------------------------

void metrics_suite(Recorder& rec) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  HyperCube truth(31, 8, 8), pred(31, 8, 8);
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    truth.data[i] = static_cast<float>(u(rng));
    pred.data[i] = truth.data[i] * 1.1f;
  }
  const double m = mrae(pred, truth);
  rec("mrae(1.1 * y, y) = 0.1 within 1e-6", std::abs(m - 0.1) <= 1e-6, fmt("%.9f", m));
  const std::vector<float> p{1, 3}, t{2, 2};
  const double hand = mrae(p, t, 0.0);
  rec("mrae([1, 3], [2, 2], eps 0) = 0.5 exactly", hand == 0.5, fmt("%.17g", hand));
  rec("mrae(y, y) = 0", mrae(truth, truth) == 0.0);
  const double r = rmse(std::vector<float>{3, 4}, std::vector<float>{0, 0});
  rec("rmse of differences [3, 4] is sqrt(12.5)", std::abs(r - std::sqrt(12.5)) <= 1e-12, fmt("%.12f", r));
  rec("rmse is symmetric", rmse(pred, truth) == rmse(truth, pred));
}

}  // namespace

bool SuiteResult::passed() const { return error.empty() && !checks.empty() && failures() == 0; }

std::size_t SuiteResult::failures() const {
  std::size_t n = 0;
  for (const auto& c : checks) n += c.passed ? 0 : 1;
  return n;
}

std::string suite_title(int id) {
  switch (id) {
    case 1: return "gradients vs central differences";
    case 2: return "one-cycle schedule values";
    case 3: return "layer invariants";
    case 4: return "model shape contract";
    case 5: return "parameter counts";
    case 6: return "latency depth 18 vs 50";
    case 7: return "loss identities";
    case 8: return "overfit smoke";
    case 9: return "MRAE / RMSE";
    default: throw ContractError("no self-test suite " + std::to_string(id));
  }
}

SuiteResult run_suite(int id, const Options& opts) {
  SuiteResult r;
  r.id = id;
  r.title = suite_title(id);
  Recorder rec(r, opts);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    switch (id) {
      case 1: gradient_suite(rec); break;
      case 2: schedule_suite(rec); break;
      case 3: invariants_suite(rec); break;
      case 4: model_suite(rec); break;
      case 5: params_suite(rec); break;
      case 6: latency_suite(rec, opts.threads); break;
      case 7: loss_suite(rec); break;
      case 8: overfit_suite(rec); break;
      case 9: metrics_suite(rec); break;
    }
  } catch (const std::exception& e) {
    r.error = e.what();
    if (opts.log) *opts.log << "  ERROR " << e.what() << std::endl;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::string summary(const SuiteResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s suite %d %s (%zu checks, %.1f s)", r.passed() ? "PASS" : "FAIL", r.id,
                r.title.c_str(), r.checks.size(), r.seconds);
  std::string out = buf;
  if (!r.error.empty()) out += "\n    error: " + r.error;
  for (const auto& c : r.checks)
    if (!c.passed) out += "\n    failed: " + c.name + (c.detail.empty() ? "" : " (" + c.detail + ")");
  return out;
}

}  // namespace mxr::selftest
