#pragma once

#include <functional>
#include <random>
#include <string>

#include "mxr/tensor.hpp"

namespace mxr {

/// Central-difference gradient of a scalar function: (f(x+h·e_i) − f(x−h·e_i)) / 2h
/// for every element i. Evaluates f only; never touches the autodiff graph.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// Agreement between an analytic gradient and a numeric reference.
struct GradCheckResult {
  double max_rel_error = 0;  // over elements whose reference magnitude is >= abs_floor
  double max_abs_error = 0;  // over elements whose reference magnitude is < abs_floor
  std::size_t elements = 0;

  bool passed(double rel_tol = 1e-4, double abs_tol = 1e-7) const {
    return max_rel_error < rel_tol && max_abs_error < abs_tol;
  }
};

GradCheckResult compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                  double abs_floor = 1e-4);

/// Builds the graph `f(x)` for a fresh leaf copy of `x`, runs backward and
/// compares the result with finite_diff_grad at step h.
GradCheckResult check_gradient(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                               const Tensor<double>& x, double h = 1e-5);

/// Same comparison for a leaf that `f` closes over (a layer parameter): the
/// leaf is perturbed in place and restored afterwards.
GradCheckResult check_parameter_gradient(Tensor<double> param, const std::function<Tensor<double>()>& f,
                                         double h = 1e-5);

/// Standard-normal tensor, for tests and seeded initialization.
template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, T stddev = T(1), bool requires_grad = false);

/// Uniform tensor in [lo, hi).
template <typename T>
Tensor<T> rand_uniform(Shape shape, std::mt19937_64& rng, T lo, T hi, bool requires_grad = false);

}  // namespace mxr
