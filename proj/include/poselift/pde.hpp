#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "poselift/attention.hpp"
#include "poselift/autodiff.hpp"

namespace poselift::pde {

using numerics::Var;

// Explicit-Euler discretization of dy/dtau = (A(y) - I) y.
struct PdeConfig {
  double h = 0.5;
  std::size_t steps = 1;
  bool enabled = true;

  void validate() const {
    if (!(h > 0.0 && h <= 1.0)) throw ConfigError("pde.h must lie in (0, 1]");
    if (steps < 1) throw ConfigError("pde.steps must be >= 1");
  }
};

template <class T>
void require_row_stochastic(const Tensor<T>& a, double tol = 1e-9) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("aggregation matrix must be square, got " + shape_string(a.shape()));
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < a.dim(1); ++j) row += static_cast<double>(a.at(i, j));
    if (std::abs(row - 1.0) > tol)
      throw ContractError("row " + std::to_string(i) + " of the aggregation matrix sums to " +
                          std::to_string(row));
  }
}

// One Euler step: y + h (a y - y) = ((1 - h) I + h a) y.
template <class T>
Tensor<T> pde_step(const Tensor<T>& y, const Tensor<T>& a, T h) {
  require_row_stochastic(a);
  if (y.rank() != 2 || y.dim(0) != a.dim(0))
    throw DimensionError("pde_step: state " + shape_string(y.shape()) +
                         " vs matrix " + shape_string(a.shape()));
  Tensor<T> ay = numerics::matmul(a, y);
  Tensor<T> out = y;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * (ay[i] - y[i]);
  return out;
}

// Integrates from 0 to t_end with `steps` equal Euler steps; a_fn is
// re-evaluated on the current state every step.
template <class T>
Tensor<T> pde_integrate(const Tensor<T>& y0,
                        const std::function<Tensor<T>(const Tensor<T>&)>& a_fn,
                        T t_end, std::size_t steps) {
  if (steps < 1) throw ConfigError("pde_integrate: steps must be >= 1");
  if (t_end < T(0)) throw ConfigError("pde_integrate: t_end must be >= 0");
  if (t_end == T(0)) return y0;
  const T h = t_end / T(steps);
  Tensor<T> y = y0;
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor<T> a = a_fn(y);
    require_row_stochastic(a);
    Tensor<T> ay = numerics::matmul(a, y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += h * (ay[i] - y[i]);
  }
  return y;
}

// Attention as a diffusion step. `aggregate` maps the current tokens to the
// attention output A(y) V(y) (already projected). Enabled: `steps` updates
// y <- y + h (aggregate(y) - y), A recomputed each time. Disabled: the usual
// residual update y + aggregate(y).
template <class T>
Var<T> pde_attention_layer(const Var<T>& tokens,
                           const std::function<Var<T>(const Var<T>&)>& aggregate,
                           const PdeConfig& cfg) {
  if (!cfg.enabled) return numerics::add(tokens, aggregate(tokens));
  cfg.validate();
  Var<T> y = tokens;
  for (std::size_t s = 0; s < cfg.steps; ++s) y = numerics::lerp(y, aggregate(y), T(cfg.h));
  return y;
}

template <class T>
Var<T> pde_attention_layer(const Var<T>& tokens, const dualstream::MhsaWeights<T>& weights,
                           std::size_t heads, const PdeConfig& cfg,
                           const dualstream::ForwardContext<T>* ctx = nullptr) {
  return pde_attention_layer<T>(
      tokens, [&](const Var<T>& y) { return dualstream::mhsa(y, weights, heads, ctx); }, cfg);
}

// Variance of features across tokens, averaged over channels.
template <class T>
double token_variance(const Tensor<T>& y) {
  const std::size_t n = y.dim(0), d = y.dim(1);
  double total = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(y.at(i, c));
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = static_cast<double>(y.at(i, c)) - mean;
      var += e * e;
    }
    total += var / static_cast<double>(n);
  }
  return total / static_cast<double>(d);
}

}  // namespace poselift::pde
