#include "mxr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mxr {

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  NoGradGuard no_grad;
  std::vector<T> base(x.data().begin(), x.data().end());
  std::vector<T> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = base;
    probe[i] = base[i] + h;
    const T up = f(Tensor<T>(x.shape(), probe));
    probe[i] = base[i] - h;
    const T down = f(Tensor<T>(x.shape(), probe));
    grad[i] = (up - down) / (T(2) * h);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

GradCheckResult compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                  double abs_floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: length mismatch");
  GradCheckResult r;
  r.elements = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]);
    if (std::abs(numeric[i]) < abs_floor)
      r.max_abs_error = std::max(r.max_abs_error, err);
    else
      r.max_rel_error = std::max(r.max_rel_error, err / std::abs(numeric[i]));
  }
  return r;
}

GradCheckResult check_gradient(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                               const Tensor<double>& x, double h) {
  Tensor<double> leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Tensor<double> y = f(leaf);
  y.backward();
  const Tensor<double> analytic = leaf.grad_tensor();
  const Tensor<double> numeric = finite_diff_grad<double>([&](const Tensor<double>& p) { return f(p).item(); }, x, h);
  return compare_gradients(analytic.data(), numeric.data());
}

GradCheckResult check_parameter_gradient(Tensor<double> param, const std::function<Tensor<double>()>& f, double h) {
  if (!param.is_leaf() || !param.requires_grad())
    throw ContractError("check_parameter_gradient: expects a leaf that requires grad");
  param.zero_grad();
  f().backward();
  const std::vector<double> analytic(param.grad().begin(), param.grad().end());
  param.zero_grad();
  std::vector<double> numeric(analytic.size());
  NoGradGuard no_grad;
  auto data = param.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double base = data[i];
    data[i] = base + h;
    const double up = f().item();
    data[i] = base - h;
    const double down = f().item();
    data[i] = base;
    numeric[i] = (up - down) / (2 * h);
  }
  return compare_gradients(analytic, numeric);
}

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, T stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(dist(rng)) * stddev;
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> rand_uniform(Shape shape, std::mt19937_64& rng, T lo, T hi, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template Tensor<float> finite_diff_grad<float>(const std::function<float(const Tensor<float>&)>&, const Tensor<float>&,
                                               float);
template Tensor<double> finite_diff_grad<double>(const std::function<double(const Tensor<double>&)>&,
                                                 const Tensor<double>&, double);
template Tensor<float> randn<float>(Shape, std::mt19937_64&, float, bool);
template Tensor<double> randn<double>(Shape, std::mt19937_64&, double, bool);
template Tensor<float> rand_uniform<float>(Shape, std::mt19937_64&, float, float, bool);
template Tensor<double> rand_uniform<double>(Shape, std::mt19937_64&, double, double, bool);

}  // namespace mxr
