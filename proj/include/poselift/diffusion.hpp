#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "poselift/autodiff.hpp"
#include "poselift/errors.hpp"
#include "poselift/params.hpp"
#include "poselift/rng.hpp"
#include "poselift/tensor.hpp"

namespace poselift::diffusion {

enum class ScheduleKind { cosine, linear };

// standard: textbook DDIM / epsilon identities (square roots on alpha_bar).
// literal: unrooted alpha-bar ratios in place of their square roots.
enum class CoeffMode { standard, literal };

inline std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::cosine ? "cosine" : "linear";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "linear") return ScheduleKind::linear;
  throw ConfigError("unknown diffusion.schedule '" + s + "'");
}

inline std::string to_string(CoeffMode m) {
  return m == CoeffMode::standard ? "standard" : "literal";
}

inline CoeffMode coeff_mode_from_string(const std::string& s) {
  if (s == "standard") return CoeffMode::standard;
  if (s == "literal") return CoeffMode::literal;
  throw ConfigError("unknown diffusion.coeff_mode '" + s + "'");
}

// Tables are indexed by step t = 0..T; entry 0 is the clean signal
// (beta 0, alpha_bar exactly 1).
struct DiffusionSchedule {
  std::size_t t_max = 0;
  ScheduleKind kind = ScheduleKind::cosine;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void check_step(std::size_t t, const char* op) const {
    if (t < 1 || t > t_max)
      throw StepError(std::string(op) + ": step " + std::to_string(t) + " outside [1, " +
                      std::to_string(t_max) + "]");
  }
};

inline DiffusionSchedule make_schedule(std::size_t t_max, ScheduleKind kind) {
  if (t_max < 1) throw ConfigError("diffusion.T must be >= 1");
  DiffusionSchedule s;
  s.t_max = t_max;
  s.kind = kind;
  s.beta.assign(t_max + 1, 0.0);
  const double tm = static_cast<double>(t_max);
  if (kind == ScheduleKind::linear) {
    for (std::size_t t = 1; t <= t_max; ++t) {
      const double u = t_max == 1 ? 0.0 : static_cast<double>(t - 1) / (tm - 1.0);
      s.beta[t] = 1e-4 + u * (2e-2 - 1e-4);
    }
  } else {
    constexpr double kOffset = 0.008;
    constexpr double kHalfPi = 1.57079632679489661923;
    auto f = [&](double t) {
      const double c = std::cos((t / tm + kOffset) / (1.0 + kOffset) * kHalfPi);
      return c * c;
    };
    const double f0 = f(0.0);
    for (std::size_t t = 1; t <= t_max; ++t) {
      const double prev = f(static_cast<double>(t - 1)) / f0;
      const double cur = f(static_cast<double>(t)) / f0;
      s.beta[t] = std::min(1.0 - cur / prev, 0.999);
    }
  }
  s.alpha.assign(t_max + 1, 1.0);
  s.alpha_bar.assign(t_max + 1, 1.0);
  for (std::size_t t = 1; t <= t_max; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

// tau_1 < ... < tau_S = T, evenly spaced.
struct TauSchedule {
  std::vector<std::size_t> steps;
};

inline TauSchedule make_tau(std::size_t t_max, std::size_t sampling_steps) {
  if (sampling_steps < 1) throw ConfigError("diffusion.steps must be >= 1");
  if (sampling_steps > t_max) throw ConfigError("diffusion.steps must not exceed diffusion.T");
  TauSchedule tau;
  for (std::size_t i = 1; i <= sampling_steps; ++i)
    tau.steps.push_back((i * t_max + sampling_steps / 2) / sampling_steps);
  return tau;
}

inline void validate(const TauSchedule& tau, const DiffusionSchedule& sched) {
  if (tau.steps.empty()) throw ConfigError("empty tau schedule");
  for (std::size_t i = 0; i < tau.steps.size(); ++i) {
    sched.check_step(tau.steps[i], "tau");
    if (i > 0 && tau.steps[i] <= tau.steps[i - 1])
      throw StepError("tau schedule must be strictly increasing");
  }
  if (tau.steps.back() != sched.t_max) throw StepError("tau schedule must end at T");
}

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
}

// wa * a + wb * b
template <class T>
Tensor<T> combine(double wa, const Tensor<T>& a, double wb, const Tensor<T>& b) {
  require_same_shape(a, b, "combine");
  Tensor<T> out(a.shape());
  numerics::detail::arr(out) = T(wa) * numerics::detail::arr(a) + T(wb) * numerics::detail::arr(b);
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> q_sample(const Tensor<T>& y0, std::size_t t, const Tensor<T>& eps,
                   const DiffusionSchedule& sched) {
  sched.check_step(t, "q_sample");
  const double ab = sched.alpha_bar[t];
  return detail::combine(std::sqrt(ab), y0, std::sqrt(1.0 - ab), eps);
}

template <class T>
struct Posterior {
  Tensor<T> mean;
  double std = 0.0;
};

template <class T>
Posterior<T> posterior_mean_std(const Tensor<T>& y0hat, const Tensor<T>& yt, std::size_t t,
                                const DiffusionSchedule& sched) {
  sched.check_step(t, "posterior_mean_std");
  const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t - 1];
  const double beta = sched.beta[t], alpha = sched.alpha[t];
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
  const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
  return {detail::combine(c0, y0hat, ct, yt), std::sqrt(var)};
}

template <class T>
Tensor<T> ddpm_step(const Tensor<T>& y0hat, const Tensor<T>& yt, std::size_t t,
                    const Tensor<T>& z, const DiffusionSchedule& sched) {
  Posterior<T> p = posterior_mean_std(y0hat, yt, t, sched);
  if (t == 1 || p.std == 0.0) return p.mean;
  return detail::combine(1.0, p.mean, p.std, z);
}

struct DdimWeights {
  double w1 = 0.0;  // on the clean estimate
  double w2 = 0.0;  // on the current noisy state
};

inline DdimWeights ddim_weights(std::size_t tau_i, std::size_t tau_prev,
                                const DiffusionSchedule& sched, CoeffMode mode) {
  sched.check_step(tau_i, "ddim_step");
  if (tau_prev >= tau_i)
    throw StepError("ddim_step: previous step " + std::to_string(tau_prev) +
                    " must precede " + std::to_string(tau_i));
  const double ab = sched.alpha_bar[tau_i], ab_prev = sched.alpha_bar[tau_prev];
  const double w2 = std::sqrt(1.0 - ab_prev) / std::sqrt(1.0 - ab);
  if (mode == CoeffMode::standard) return {std::sqrt(ab_prev) - std::sqrt(ab) * w2, w2};
  return {ab_prev - ab * w2, w2};
}

template <class T>
Tensor<T> ddim_step(const Tensor<T>& y0hat, const Tensor<T>& yt, std::size_t tau_i,
                    std::size_t tau_prev, const DiffusionSchedule& sched,
                    CoeffMode mode = CoeffMode::standard) {
  const DdimWeights w = ddim_weights(tau_i, tau_prev, sched, mode);
  return detail::combine(w.w1, y0hat, w.w2, yt);
}

template <class T>
Tensor<T> eps_from_x0(const Tensor<T>& yt, const Tensor<T>& y0hat, std::size_t t,
                      const DiffusionSchedule& sched, CoeffMode mode = CoeffMode::standard) {
  sched.check_step(t, "eps_from_x0");
  const double ab = sched.alpha_bar[t];
  const double c0 = mode == CoeffMode::standard ? std::sqrt(ab) : ab;
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  return detail::combine(inv, yt, -c0 * inv, y0hat);
}

// Clean-pose estimate for a noisy state at step t.
template <class T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>& y_t, std::size_t t)>;

// Deterministic DDIM from a seeded unit Gaussian: visits tau_S..tau_1 and
// finishes with the terminal step to tau_0 = 0, which returns the last clean
// estimate.
template <class T>
Tensor<T> sample(const Denoiser<T>& model, const Shape& shape, const TauSchedule& tau,
                 std::uint64_t seed, const DiffusionSchedule& sched,
                 CoeffMode mode = CoeffMode::standard) {
  validate(tau, sched);
  Rng rng = make_rng(seed, "sample");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> y(shape);
  for (auto& v : y.storage()) v = static_cast<T>(normal(rng));
  for (std::size_t i = tau.steps.size(); i-- > 0;) {
    const std::size_t cur = tau.steps[i];
    const std::size_t prev = i == 0 ? 0 : tau.steps[i - 1];
    Tensor<T> y0hat = model(y, cur);
    if (y0hat.shape() != shape)
      throw DimensionError("denoiser returned " + shape_string(y0hat.shape()) + ", expected " +
                           shape_string(shape));
    y = ddim_step(y0hat, y, cur, prev, sched, mode);
  }
  return y;
}

// A batch of clean sequences with the step and noise drawn for each sample.
template <class T>
struct TrainBatch {
  Tensor<T> x2d;  // [B, N, J, 2]
  Tensor<T> y0;   // [B, N, J, 3]
  std::vector<std::size_t> steps;
  Tensor<T> eps;  // like y0
};

// Draws t ~ U{1..T} and eps ~ N(0, I) per sample.
template <class T>
void draw_noise(TrainBatch<T>& batch, const DiffusionSchedule& sched, Rng& rng) {
  const std::size_t b = batch.y0.dim(0);
  std::uniform_int_distribution<std::size_t> step(1, sched.t_max);
  std::normal_distribution<double> normal(0.0, 1.0);
  batch.steps.resize(b);
  for (auto& t : batch.steps) t = step(rng);
  batch.eps = Tensor<T>(batch.y0.shape());
  for (auto& v : batch.eps.storage()) v = static_cast<T>(normal(rng));
}

template <class T>
Tensor<T> noised_batch(const TrainBatch<T>& batch, const DiffusionSchedule& sched) {
  if (batch.steps.size() != batch.y0.dim(0)) throw DimensionError("one step per sample required");
  detail::require_same_shape(batch.y0, batch.eps, "noised_batch");
  const std::size_t per = batch.y0.size() / batch.y0.dim(0);
  Tensor<T> yt(batch.y0.shape());
  for (std::size_t b = 0; b < batch.steps.size(); ++b) {
    const std::size_t t = batch.steps[b];
    sched.check_step(t, "training_loss");
    const T a = T(std::sqrt(sched.alpha_bar[t])), s = T(std::sqrt(1.0 - sched.alpha_bar[t]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i)
      yt[i] = a * batch.y0[i] + s * batch.eps[i];
  }
  return yt;
}

// Mean per-joint Euclidean distance between the clean estimate and y0.
// Model needs forward(bind, x2d, y_t, steps, ctx) -> Var [B, N, J, 3].
template <class T, class Model, class Ctx>
numerics::Var<T> training_loss(numerics::Binding<T>& bind, const Model& model,
                               const TrainBatch<T>& batch, const DiffusionSchedule& sched,
                               const Ctx& ctx) {
  using namespace numerics;
  const Tensor<T> yt = noised_batch(batch, sched);
  Var<T> pred = model.forward(bind, batch.x2d, yt, batch.steps, ctx);
  Var<T> diff = sub(pred, bind.tape().constant(batch.y0));
  return mean(row_norm(diff));
}

}  // namespace poselift::diffusion
