#include "mxr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace mxr {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;


template <typename T>
using TI = detail::TensorImpl<T>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                         shape_str(s));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Source row/column for a padded coordinate, or -1 for a zero cell.
std::int64_t source_index(std::int64_t padded, int before, std::int64_t n, PadMode mode) {
  const std::int64_t i = padded - before;
  if (i >= 0 && i < n) return i;
  switch (mode) {
    case PadMode::Zero: return -1;
    case PadMode::Replicate: return std::clamp<std::int64_t>(i, 0, n - 1);
    case PadMode::Reflect: return reflect_index(i, n);
  }
  return -1;
}

// ----------------------------------------------------------------------------
// convolution

struct ConvGeom {
  std::int64_t n, ci, h, w, co, kh, kw, ho, wo;
  int stride, pad;

  std::int64_t k() const { return ci * kh * kw; }
  std::int64_t p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::int64_t rows_per_chunk() const {
    constexpr std::int64_t kBudget = std::int64_t{1} << 22;  // elements in the column buffer
    return std::clamp<std::int64_t>(kBudget / std::max<std::int64_t>(1, k() * wo), 1, ho);
  }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, std::int64_t oy0, std::int64_t oy1, T* col) {
  const std::int64_t pc = (oy1 - oy0) * g.wo;
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * pc;
        for (std::int64_t oy = oy0; oy < oy1; ++oy) {
          T* dst = row + (oy - oy0) * g.wo;
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, std::int64_t oy0, std::int64_t oy1, T* dx) {
  const std::int64_t pc = (oy1 - oy0) * g.wo;
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * pc;
        for (std::int64_t oy = oy0; oy < oy1; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + (oy - oy0) * g.wo;
          T* dst = dx + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, F f, D dfdx) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
  auto xi = x.impl();
  detail::attach<T>(out, name, {&x}, [xi, dfdx](const TI<T>& o) {
    if (!xi->requires_grad) return;
    auto gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * dfdx(xi->data[i], o.data[i]);
  });
  return out;
}

}  // namespace

template <typename T>
T softplus_value(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >= 1 and pad >= 0");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(x.dim(1)) +
                         " channels but weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, pad};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.co))
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  Tensor<T> out({g.n, g.co, g.ho, g.wo});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* yd = out.mutable_data().data();
  const std::int64_t K = g.k(), P = g.p();
  CMapR<T> wm(wd, g.co, K);
  std::vector<T> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(K * g.rows_per_chunk() * g.wo));
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* xs = xd + n * g.ci * g.h * g.w;
    T* ys = yd + n * g.co * P;
    if (g.pointwise()) {
      MapR<T>(ys, g.co, P).noalias() = wm * CMapR<T>(xs, g.ci, P);
    } else {
      for (std::int64_t oy0 = 0; oy0 < g.ho; oy0 += g.rows_per_chunk()) {
        const std::int64_t oy1 = std::min(g.ho, oy0 + g.rows_per_chunk());
        const std::int64_t pc = (oy1 - oy0) * g.wo;
        im2col(xs, g, oy0, oy1, col.data());
        SMapR<T>(ys + oy0 * g.wo, g.co, pc, Eigen::OuterStride<>(P)).noalias() = wm * CMapR<T>(col.data(), K, pc);
      }
    }
    if (bias.defined()) {
      const T* bd = bias.data().data();
      for (std::int64_t c = 0; c < g.co; ++c) {
        T* plane = ys + c * P;
        for (std::int64_t i = 0; i < P; ++i) plane[i] += bd[c];
      }
    }
  }

  auto xi = x.impl(), wi = w.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  detail::attach<T>(out, "conv2d", {&x, &w, &bias}, [xi, wi, bi, g](const TI<T>& o) {
    const std::int64_t K = g.k(), P = g.p();
    const T* gy = o.grad.data();
    CMapR<T> wm(wi->data.data(), g.co, K);
    std::vector<T> col, dcol;
    if (!g.pointwise()) {
      col.resize(static_cast<std::size_t>(K * g.rows_per_chunk() * g.wo));
      dcol.resize(col.size());
    }
    for (std::int64_t n = 0; n < g.n; ++n) {
      const T* gys = gy + n * g.co * P;
      const T* xs = xi->data.data() + n * g.ci * g.h * g.w;
      if (g.pointwise()) {
        CMapR<T> gym(gys, g.co, P);
        if (wi->requires_grad)
          MapR<T>(wi->grad_buffer().data(), g.co, K).noalias() += gym * CMapR<T>(xs, g.ci, P).transpose();
        if (xi->requires_grad)
          MapR<T>(xi->grad_buffer().data() + n * g.ci * P, g.ci, P).noalias() += wm.transpose() * gym;
      } else if (wi->requires_grad || xi->requires_grad) {
        for (std::int64_t oy0 = 0; oy0 < g.ho; oy0 += g.rows_per_chunk()) {
          const std::int64_t oy1 = std::min(g.ho, oy0 + g.rows_per_chunk());
          const std::int64_t pc = (oy1 - oy0) * g.wo;
          CSMapR<T> gym(gys + oy0 * g.wo, g.co, pc, Eigen::OuterStride<>(P));
          if (wi->requires_grad) {
            im2col(xs, g, oy0, oy1, col.data());
            MapR<T>(wi->grad_buffer().data(), g.co, K).noalias() += gym * CMapR<T>(col.data(), K, pc).transpose();
          }
          if (xi->requires_grad) {
            MapR<T>(dcol.data(), K, pc).noalias() = wm.transpose() * gym;
            col2im(dcol.data(), g, oy0, oy1, xi->grad_buffer().data() + n * g.ci * g.h * g.w);
          }
        }
      }
      if (bi && bi->requires_grad) {
        auto gb = bi->grad_buffer();
        for (std::int64_t c = 0; c < g.co; ++c) {
          T acc = 0;
          for (std::int64_t i = 0; i < P; ++i) acc += gys[c * P + i];
          gb[static_cast<std::size_t>(c)] += acc;
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, PadMode mode, Padding2d pad) {
  require_rank(x.shape(), 4, "avg_pool2d");
  if (kernel < 1 || stride < 1) throw ContractError("avg_pool2d: kernel and stride must be >= 1");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t hp = H + pad.top + pad.bottom, wp = W + pad.left + pad.right;
  if (hp < kernel || wp < kernel)
    throw DimensionError("avg_pool2d: window " + std::to_string(kernel) + " larger than padded input " +
                         shape_str(x.shape()));
  const std::int64_t Ho = (hp - kernel) / stride + 1, Wo = (wp - kernel) / stride + 1;

  // Source offsets of every (output, tap) pair; -1 marks a zero cell.
  std::vector<std::int64_t> rows(static_cast<std::size_t>(Ho * kernel)), cols(static_cast<std::size_t>(Wo * kernel));
  for (std::int64_t o = 0; o < Ho; ++o)
    for (int k = 0; k < kernel; ++k) rows[o * kernel + k] = source_index(o * stride + k, pad.top, H, mode);
  for (std::int64_t o = 0; o < Wo; ++o)
    for (int k = 0; k < kernel; ++k) cols[o * kernel + k] = source_index(o * stride + k, pad.left, W, mode);

  Tensor<T> out({N, C, Ho, Wo});
  const T inv = T(1) / T(kernel * kernel);
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t plane = 0; plane < N * C; ++plane) {
    const T* src = xd + plane * H * W;
    T* dst = od + plane * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy)
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          const auto iy = rows[oy * kernel + ky];
          if (iy < 0) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const auto ix = cols[ox * kernel + kx];
            if (ix >= 0) acc += src[iy * W + ix];
          }
        }
        dst[oy * Wo + ox] = acc * inv;
      }
  }
  auto xi = x.impl();
  detail::attach<T>(out, "avg_pool2d", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t plane = 0; plane < N * C; ++plane) {
      T* dst = gx.data() + plane * H * W;
      const T* gy = o.grad.data() + plane * Ho * Wo;
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          const T gv = gy[oy * Wo + ox] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            const auto iy = rows[oy * kernel + ky];
            if (iy < 0) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const auto ix = cols[ox * kernel + kx];
              if (ix >= 0) dst[iy * W + ix] += gv;
            }
          }
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
  require_rank(x.shape(), 4, "max_pool2d");
  if (kernel < 1 || stride < 1 || pad < 0 || pad >= kernel)
    throw ContractError("max_pool2d: need kernel, stride >= 1 and 0 <= pad < kernel");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * pad < kernel || W + 2 * pad < kernel)
    throw DimensionError("max_pool2d: window larger than padded input " + shape_str(x.shape()));
  const std::int64_t Ho = (H + 2 * pad - kernel) / stride + 1, Wo = (W + 2 * pad - kernel) / stride + 1;
  Tensor<T> out({N, C, Ho, Wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(N * C * Ho * Wo));
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t plane = 0; plane < N * C; ++plane) {
    const T* src = xd + plane * H * W;
    for (std::int64_t oy = 0; oy < Ho; ++oy)
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_i = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            if (best_i < 0 || src[iy * W + ix] > best) {
              best = src[iy * W + ix];
              best_i = iy * W + ix;
            }
          }
        }
        const std::int64_t o = (plane * Ho + oy) * Wo + ox;
        od[o] = best;
        argmax[static_cast<std::size_t>(o)] = plane * H * W + best_i;
      }
  }
  auto xi = x.impl();
  detail::attach<T>(out, "max_pool2d", {&x}, [xi, argmax = std::move(argmax)](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += o.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, PadMode mode, Padding2d pad) {
  require_rank(x.shape(), 4, "pad2d");
  if (pad.top < 0 || pad.left < 0 || pad.bottom < 0 || pad.right < 0)
    throw ContractError("pad2d: padding must be non-negative");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = H + pad.top + pad.bottom, Wo = W + pad.left + pad.right;
  std::vector<std::int64_t> rows(static_cast<std::size_t>(Ho)), cols(static_cast<std::size_t>(Wo));
  for (std::int64_t i = 0; i < Ho; ++i) rows[i] = source_index(i, pad.top, H, mode);
  for (std::int64_t i = 0; i < Wo; ++i) cols[i] = source_index(i, pad.left, W, mode);
  Tensor<T> out({N, C, Ho, Wo});
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t plane = 0; plane < N * C; ++plane)
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      if (rows[oy] < 0) continue;
      for (std::int64_t ox = 0; ox < Wo; ++ox)
        if (cols[ox] >= 0) od[(plane * Ho + oy) * Wo + ox] = xd[(plane * H + rows[oy]) * W + cols[ox]];
    }
  auto xi = x.impl();
  detail::attach<T>(out, "pad2d", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t plane = 0; plane < N * C; ++plane)
      for (std::int64_t oy = 0; oy < Ho; ++oy) {
        if (rows[oy] < 0) continue;
        for (std::int64_t ox = 0; ox < Wo; ++ox)
          if (cols[ox] >= 0) gx[(plane * H + rows[oy]) * W + cols[ox]] += o.grad[(plane * Ho + oy) * Wo + ox];
      }
  });
  return out;
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width) {
  require_rank(x.shape(), 4, "crop2d");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > H || left + width > W)
    throw DimensionError("crop2d: window out of bounds for " + shape_str(x.shape()));
  Tensor<T> out({N, C, height, width});
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t plane = 0; plane < N * C; ++plane)
    for (std::int64_t y = 0; y < height; ++y)
      std::copy_n(xd + (plane * H + top + y) * W + left, width, od + (plane * height + y) * width);
  auto xi = x.impl();
  detail::attach<T>(out, "crop2d", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t plane = 0; plane < N * C; ++plane)
      for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t xx = 0; xx < width; ++xx)
          gx[(plane * H + top + y) * W + left + xx] += o.grad[(plane * height + y) * width + xx];
  });
  return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                       bool training) {
  require_rank(x.shape(), 4, "batch_norm2d");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape cshape{C};
  require_same(gamma.shape(), cshape, "batch_norm2d gamma");
  require_same(beta.shape(), cshape, "batch_norm2d beta");
  require_same(state.running_mean.shape(), cshape, "batch_norm2d running mean");
  require_same(state.running_var.shape(), cshape, "batch_norm2d running var");
  if (!(state.eps > 0)) throw ContractError("batch_norm2d: eps must be positive");
  const std::int64_t M = N * HW;

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  const T* xd = x.data().data();
  if (training) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      rm[c] = static_cast<T>((1 - state.momentum) * rm[c] + state.momentum * mu);
      rv[c] = static_cast<T>((1 - state.momentum) * rv[c] + state.momentum * unbiased);
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + state.eps));
    }
  }

  Tensor<T> out(x.shape());
  T* od = out.mutable_data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = xd + (n * C + c) * HW;
      T* q = od + (n * C + c) * HW;
      const T a = gd[c] * invstd[c];
      const T b = bd[c] - a * mean[c];
      for (std::int64_t i = 0; i < HW; ++i) q[i] = a * p[i] + b;
    }

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  detail::attach<T>(out, "batch_norm2d", {&x, &gamma, &beta},
                    [=, mean = std::move(mean), invstd = std::move(invstd)](const TI<T>& o) {
    const T* gy = o.grad.data();
    const T* xs = xi->data.data();
    for (std::int64_t c = 0; c < C; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < HW; ++i) {
          const std::int64_t k = (n * C + c) * HW + i;
          const double xhat = (xs[k] - mean[c]) * invstd[c];
          sum_g += gy[k];
          sum_gx += gy[k] * xhat;
        }
      if (gi->requires_grad) gi->grad_buffer()[c] += static_cast<T>(sum_gx);
      if (bi->requires_grad) bi->grad_buffer()[c] += static_cast<T>(sum_g);
      if (!xi->requires_grad) continue;
      auto gx = xi->grad_buffer();
      const double gam = gi->data[c];
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < HW; ++i) {
          const std::int64_t k = (n * C + c) * HW + i;
          if (training) {
            const double xhat = (xs[k] - mean[c]) * invstd[c];
            gx[k] += static_cast<T>(gam * invstd[c] / M * (M * gy[k] - sum_g - xhat * sum_gx));
          } else {
            gx[k] += static_cast<T>(gam * invstd[c] * gy[k]);
          }
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::int64_t M = a.dim(-2), K = a.dim(-1), K2 = b.dim(-2), P = b.dim(-1);
  if (K != K2)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2), lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  bool bcast_a = false, bcast_b = false;
  if (lead_a == lead_b) {
    lead = lead_a;
  } else if (lead_b.empty()) {
    lead = lead_a;
    bcast_b = true;
  } else if (lead_a.empty()) {
    lead = lead_b;
    bcast_a = true;
  } else {
    throw DimensionError("matmul: batch dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t batch = shape_numel(lead);
  Shape oshape = lead;
  oshape.push_back(M);
  oshape.push_back(P);
  Tensor<T> out(oshape);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t i = 0; i < batch; ++i)
    MapR<T>(od + i * M * P, M, P).noalias() =
        CMapR<T>(ad + (bcast_a ? 0 : i) * M * K, M, K) * CMapR<T>(bd + (bcast_b ? 0 : i) * K * P, K, P);

  auto ai = a.impl(), bi = b.impl();
  detail::attach<T>(out, "matmul", {&a, &b}, [=](const TI<T>& o) {
    for (std::int64_t i = 0; i < batch; ++i) {
      CMapR<T> g(o.grad.data() + i * M * P, M, P);
      if (ai->requires_grad)
        MapR<T>(ai->grad_buffer().data() + (bcast_a ? 0 : i) * M * K, M, K).noalias() +=
            g * CMapR<T>(bi->data.data() + (bcast_b ? 0 : i) * K * P, K, P).transpose();
      if (bi->requires_grad)
        MapR<T>(bi->grad_buffer().data() + (bcast_b ? 0 : i) * K * P, K, P).noalias() +=
            CMapR<T>(ai->data.data() + (bcast_a ? 0 : i) * M * K, M, K).transpose() * g;
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank >= 2 required, got " + shape_str(x.shape()));
  const std::int64_t R = x.dim(-2), C = x.dim(-1), batch = x.numel() / (R * C);
  Shape oshape = x.shape();
  std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
  Tensor<T> out(oshape);
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t i = 0; i < batch; ++i)
    MapR<T>(od + i * R * C, C, R) = CMapR<T>(xd + i * R * C, R, C).transpose();
  auto xi = x.impl();
  detail::attach<T>(out, "transpose_last2", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t i = 0; i < batch; ++i)
      MapR<T>(gx.data() + i * R * C, R, C) += CMapR<T>(o.grad.data() + i * R * C, C, R).transpose();
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int r = x.rank();
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (int i = ax + 1; i < r; ++i) inner *= x.shape()[i];
  const std::int64_t len = x.shape()[ax];
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T s = 0;
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        od[base + k * inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (std::int64_t k = 0; k < len; ++k) od[base + k * inner] *= inv;
    }
  auto xi = x.impl();
  detail::attach<T>(out, "softmax", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t oo = 0; oo < outer; ++oo)
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = oo * len * inner + in;
        T dot = 0;
        for (std::int64_t k = 0; k < len; ++k) dot += o.grad[base + k * inner] * o.data[base + k * inner];
        for (std::int64_t k = 0; k < len; ++k) {
          const auto i = base + k * inner;
          gx[i] += o.data[i] * (o.grad[i] - dot);
        }
      }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  auto xi = x.impl();
  detail::attach<T>(out, "reshape", {&x}, [xi](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& ref = xs[0].shape();
  if (ref.size() < 2) throw DimensionError("concat_channels: inputs need rank >= 2");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Shape& s = xs[i].shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == ref[d];
    if (!ok)
      throw DimensionError("concat_channels: input " + std::to_string(i) + " has shape " + shape_str(s) +
                           ", incompatible with input 0 shape " + shape_str(ref));
    total += s[1];
  }
  const std::int64_t N = ref[0];
  const std::int64_t inner = shape_numel(Shape(ref.begin() + 2, ref.end()));
  Shape oshape = ref;
  oshape[1] = total;
  Tensor<T> out(oshape);
  T* od = out.mutable_data().data();
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::int64_t block = t.dim(1) * inner;
    for (std::int64_t n = 0; n < N; ++n)
      std::copy_n(t.data().data() + n * block, block, od + n * total * inner + off * inner);
    off += t.dim(1);
  }
  std::vector<std::shared_ptr<TI<T>>> impls;
  for (const auto& t : xs) impls.push_back(t.impl());
  detail::attach_many<T>(out, "concat_channels", xs, [=](const TI<T>& o) {
    for (std::size_t j = 0; j < impls.size(); ++j) {
      if (!impls[j]->requires_grad) continue;
      auto gx = impls[j]->grad_buffer();
      const std::int64_t block = impls[j]->shape[1] * inner;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* src = o.grad.data() + n * total * inner + offsets[j] * inner;
        T* dst = gx.data() + n * block;
        for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  if (x.rank() < 2) throw DimensionError("slice_channels: rank >= 2 required");
  const std::int64_t C = x.dim(1);
  if (begin < 0 || end > C || begin >= end)
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), inner = x.numel() / (N * C), width = end - begin;
  Shape oshape = x.shape();
  oshape[1] = width;
  Tensor<T> out(oshape);
  T* od = out.mutable_data().data();
  for (std::int64_t n = 0; n < N; ++n)
    std::copy_n(x.data().data() + (n * C + begin) * inner, width * inner, od + n * width * inner);
  auto xi = x.impl();
  detail::attach<T>(out, "slice_channels", {&x}, [=](const TI<T>& o) {
    auto gx = xi->grad_buffer();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < width * inner; ++i) gx[(n * C + begin) * inner + i] += o.grad[n * width * inner + i];
  });
  return out;
}

namespace {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  require_same(a.shape(), b.shape(), name);
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[i], bd[i]);
  auto ai = a.impl(), bi = b.impl();
  detail::attach<T>(out, name, {&a, &b}, [ai, bi, da, db](const TI<T>& o) {
    if (ai->requires_grad) {
      auto g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * da(ai->data[i], bi->data[i]);
    }
    if (bi->requires_grad) {
      auto g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * db(ai->data[i], bi->data[i]);
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary_op(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return unary_op(x, "mul_scalar", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("scale: factor must have one element, got " + shape_str(s.shape()));
  const T f = s.data()[0];
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * f;
  auto xi = x.impl(), si = s.impl();
  detail::attach<T>(out, "scale", {&x, &s}, [xi, si](const TI<T>& o) {
    const T f = si->data[0];
    if (xi->requires_grad) {
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * f;
    }
    if (si->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * xi->data[i];
      si->grad_buffer()[0] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_op(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op(x, "softplus", [](T v) { return softplus_value(v); },
                  [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data())
    if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary_op(x, "abs", [](T v) { return std::abs(v); },
                  [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  auto xi = x.impl();
  detail::attach<T>(out, "sum", {&x}, [xi](const TI<T>& o) {
    auto g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  auto xi = x.impl();
  detail::attach<T>(out, "mean", {&x}, [xi, n](const TI<T>& o) {
    auto g = xi->grad_buffer();
    const T share = static_cast<T>(o.grad[0] / n);
    for (auto& v : g) v += share;
  });
  return out;
}

#define MXR_INSTANTIATE_OPS(T)                                                                              \
  template T softplus_value<T>(T);                                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);             \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, int, int, PadMode, Padding2d);                         \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, int, int, int);                                        \
  template Tensor<T> pad2d<T>(const Tensor<T>&, PadMode, Padding2d);                                        \
  template Tensor<T> crop2d<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);   \
  template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, \
                                     bool);                                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> transpose_last2<T>(const Tensor<T>&);                                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                     \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                     \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::int64_t, std::int64_t);                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                    \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                                    \
  template Tensor<T> scale<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                             \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                         \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                              \
  template Tensor<T> log<T>(const Tensor<T>&);                                                              \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                              \
  template Tensor<T> square<T>(const Tensor<T>&);                                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                              \
  template Tensor<T> mean<T>(const Tensor<T>&);

MXR_INSTANTIATE_OPS(float)
MXR_INSTANTIATE_OPS(double)

}  // namespace mxr
