#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "dia/tensor.hpp"

namespace dia {

enum class StepMode {
  kAbsolute,  // h = step
  kRelative,  // h = step * (1 + |x_i|)
};

// Central-difference gradient of a scalar function:
// (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate. `f` is evaluated with
// recording disabled and must not retain `x`.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& at, double step,
                                     StepMode mode = StepMode::kAbsolute) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_grad: step must be positive");
  NoGradGuard no_grad;
  Tensor x = at.detach();
  Tensor grad(at.shape());
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    const double h = mode == StepMode::kRelative ? step * (1.0 + std::abs(orig)) : step;
    xs[i] = orig + h;
    const double up = f(x);
    xs[i] = orig - h;
    const double down = f(x);
    xs[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_grad",
                         "finite_difference_grad: non-finite evaluation at coordinate " +
                             std::to_string(i));
    }
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Central difference along a single coordinate of a tensor that the function
// reads in place (e.g. a model parameter). The coordinate is restored.
inline double finite_difference_at(const std::function<double()>& f, Tensor& param,
                                   std::size_t index, double step,
                                   StepMode mode = StepMode::kRelative) {
  NoGradGuard no_grad;
  auto xs = param.data();
  const double orig = xs[index];
  const double h = mode == StepMode::kRelative ? step * (1.0 + std::abs(orig)) : step;
  xs[index] = orig + h;
  const double up = f();
  xs[index] = orig - h;
  const double down = f();
  xs[index] = orig;
  if (!std::isfinite(up) || !std::isfinite(down)) {
    throw NumericError("finite_difference_at", "finite_difference_at: non-finite evaluation at coordinate " +
                                                   std::to_string(index));
  }
  return (up - down) / (2.0 * h);
}

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
// gradient is ~0 from dominating the maximum through round-off alone.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace dia
