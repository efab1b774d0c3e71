#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "poselift/autodiff.hpp"

namespace poselift::numerics {

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Named parameters in insertion order, each with a gradient accumulator of the
// same shape.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = params_.size();
    Tensor<T> grad(value.shape());
    params_.push_back({name, std::move(value), std::move(grad)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& get(const std::string& name) { return params_[position(name)]; }
  const Param<T>& get(const std::string& name) const { return params_[position(name)]; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Exposes store parameters as watched leaves of one tape. Leaves are created
// lazily so unused parameters never appear on the tape.
template <class T>
class Binding {
 public:
  Binding(Tape<T>& tape, const ParamStore<T>& store) : tape_(tape), store_(store) {}

  Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var<T> v = tape_.watch(store_.get(name).value);
    vars_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }

  // Adds this tape's leaf gradients into the store's accumulators.
  void accumulate_into(ParamStore<T>& store) const {
    for (const auto& [name, v] : vars_) {
      if (!tape_.has_grad(v.id())) continue;
      Tensor<T> g = tape_.grad(v);
      Tensor<T>& dst = store.get(name).grad;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  std::map<std::string, Var<T>> vars_;
};

template <class T>
using LossFn = std::function<Var<T>(Binding<T>&)>;

struct GradCheckOptions {
  double eps = 1e-4;
  // Denominator floor so that entries whose true gradient is ~0 are judged
  // by absolute error instead of amplifying rounding noise.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

template <class T>
double evaluate_loss(const LossFn<T>& loss_fn, const ParamStore<T>& store) {
  Tape<T> tape;
  Binding<T> bind(tape, store);
  const double v = static_cast<double>(loss_fn(bind).value()[0]);
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

// Compares reverse-mode gradients against central differences
// (f(θ+eps) - f(θ-eps)) / (2 eps) for every parameter entry.
template <class T>
GradCheckResult grad_check_detailed(const LossFn<T>& loss_fn, ParamStore<T>& store,
                                    GradCheckOptions opts = {}) {
  store.zero_grad();
  {
    Tape<T> tape;
    Binding<T> bind(tape, store);
    Var<T> loss = loss_fn(bind);
    if (!std::isfinite(static_cast<double>(loss.value()[0])))
      throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
    bind.accumulate_into(store);
  }
  GradCheckResult result;
  for (auto& p : store.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T saved = p.value[i];
      p.value[i] = saved + T(opts.eps);
      const double up = evaluate_loss(loss_fn, store);
      p.value[i] = saved - T(opts.eps);
      const double down = evaluate_loss(loss_fn, store);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = static_cast<double>(p.grad[i]);
      const double denom =
          std::max({std::abs(numeric), std::abs(analytic), opts.floor});
      const double rel = std::abs(numeric - analytic) / denom;
      if (rel >= result.max_rel_error) result = {rel, p.name, i, analytic, numeric};
    }
  }
  return result;
}

template <class T>
double grad_check(const LossFn<T>& loss_fn, ParamStore<T>& store,
                  GradCheckOptions opts = {}) {
  return grad_check_detailed(loss_fn, store, opts).max_rel_error;
}

}  // namespace poselift::numerics
