#pragma once

#include <span>
#include <vector>

#include "mxr/tensor.hpp"

/// Differentiable primitives. Every op returns a fresh tensor, leaves its
/// inputs untouched, and records a backward rule when an input requires grad.
namespace mxr {

enum class PadMode { Zero, Replicate, Reflect };

struct Padding2d {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  static Padding2d uniform(int p) { return {p, p, p, p}; }
};

// --- convolution & pooling -------------------------------------------------

/// Cross-correlation of x[N,Ci,H,W] with w[Co,Ci,kh,kw], zero padding.
/// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1, int pad = 0);

/// Mean over each window; padding is applied first. Zero padding counts the
/// padded cells in the mean.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, PadMode mode = PadMode::Zero,
                     Padding2d pad = {});

/// Max over each window; padded cells never win.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad = 0);

/// Explicit spatial padding of an NCHW tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, PadMode mode, Padding2d pad);

/// Rows [top, top+height) and columns [left, left+width) of an NCHW tensor.
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width);

// --- normalization -----------------------------------------------------------

/// Running statistics of a batch-norm layer. The tensors are shared with the
/// owning module, so updates are visible through it.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::int64_t channels) {
    return {Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
};

/// Per-channel normalization of x[N,C,H,W]. Training mode uses batch
/// statistics and updates the running estimate (unbiased variance); eval mode
/// uses the running estimate only.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training);

// --- linear algebra ----------------------------------------------------------

/// Batched matrix product a[...,M,K] x b[...,K,P]. Leading dimensions must
/// match, or one operand may be a plain matrix shared by every batch entry.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

/// Max-stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// --- shape manipulation ------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Concatenation along axis 1 of tensors that agree on every other axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

/// Channels [begin, end) of an NCHW (or N,C,...) tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end);

// --- elementwise -------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s);
/// x scaled by the single element of `s`; differentiable in both.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
/// log(1 + e^x), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
/// Throws DomainError on non-positive input.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> abs(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// --- reductions (to a rank-0 tensor) ----------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Scalar helpers shared with layers.
template <typename T>
T softplus_value(T x);

}  // namespace mxr
