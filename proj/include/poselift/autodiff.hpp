#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "poselift/errors.hpp"
#include "poselift/rng.hpp"
#include "poselift/tensor.hpp"

namespace poselift::numerics {

template <class T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape is alive.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records every operation of a forward pass so gradients can be propagated
// back in reverse order. Nodes live in a deque so references stay stable.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true); }

  // Non-owning leaf; `external` must outlive the tape.
  Var<T> watch(const Tensor<T>& external) {
    Node node;
    node.external = &external;
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    Var<T> out = push(std::move(value), requires_grad);
    if (requires_grad) nodes_.back().backward = std::move(backward);
    return out;
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  // Gradient buffer, zero-initialized on first touch.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // grad(id) += g, with g's shape reinterpreted as the value's shape.
  void accumulate_grad(std::size_t id, const Tensor<T>& g) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = g.reshaped(value(id).shape());
      n.has_grad = true;
      return;
    }
    T* dst = n.grad.data().data();
    const T* src = g.data().data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : Tensor<T>(v.shape());
  }

  void backward(const Var<T>& root) {
    if (root.value().size() != 1) {
      throw DimensionError("backward requires a scalar root, got " +
                           shape_string(root.shape()));
    }
    if (!requires_grad(root.id())) return;
    grad_ref(root.id())[0] += T(1);
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;
template <class T>
using MapArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CMapArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
MapArr<T> arr(Tensor<T>& t) {
  return MapArr<T>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}
template <class T>
CMapArr<T> arr(const Tensor<T>& t) {
  return CMapArr<T>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

// tanh through the vectorized exp; std::tanh on doubles is far slower.
template <class T>
void tanh_inplace(Tensor<T>& t) {
  auto a = arr(t);
  a = T(1) - T(2) / ((T(2) * a.max(T(-40)).min(T(40))).exp() + T(1));
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw ContractError("vars from different tapes");
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
void accumulate(Tape<T>& tape, const Var<T>& target, const Tensor<T>& g) {
  if (!target.requires_grad()) return;
  tape.accumulate_grad(target.id(), g);
}

inline std::size_t leading_rows(const Shape& s) {
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(std::move(out), rg,
                          [a, b](Tape<T>& tape, const Tensor<T>& g) {
                            detail::accumulate(tape, a, g);
                            detail::accumulate(tape, b, g);
                          });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(std::move(out), rg,
                          [a, b](Tape<T>& tape, const Tensor<T>& g) {
                            detail::accumulate(tape, a, g);
                            if (b.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(b.id());
                              for (std::size_t i = 0; i < g.size(); ++i)
                                dst[i] -= g[i];
                            }
                          });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(
      std::move(out), rg, [a, b](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& av = a.value();
        const Tensor<T>& bv = b.value();
        if (a.requires_grad()) {
          Tensor<T>& dst = tape.grad_ref(a.id());
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bv[i];
        }
        if (b.requires_grad()) {
          Tensor<T>& dst = tape.grad_ref(b.id());
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * av[i];
        }
      });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.tape()->record(std::move(out), a.requires_grad(),
                          [a, s](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T>& dst = tape.grad_ref(a.id());
                            for (std::size_t i = 0; i < g.size(); ++i)
                              dst[i] += s * g[i];
                          });
}

// y = a + s * (b - a); the Euler-style interpolation used by the PDE layer.
template <class T>
Var<T> lerp(const Var<T>& a, const Var<T>& b, T s) {
  detail::require_same_shape(a, b, "lerp");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * (bv[i] - out[i]);
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(std::move(out), rg,
                          [a, b, s](Tape<T>& tape, const Tensor<T>& g) {
                            if (a.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(a.id());
                              for (std::size_t i = 0; i < g.size(); ++i)
                                dst[i] += (T(1) - s) * g[i];
                            }
                            if (b.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(b.id());
                              for (std::size_t i = 0; i < g.size(); ++i)
                                dst[i] += s * g[i];
                            }
                          });
}

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = f(v);
  return a.tape()->record(std::move(out), a.requires_grad(),
                          [a, df](Tape<T>& tape, const Tensor<T>& g) {
                            const Tensor<T>& x = a.value();
                            Tensor<T>& dst = tape.grad_ref(a.id());
                            for (std::size_t i = 0; i < g.size(); ++i)
                              dst[i] += g[i] * df(x[i]);
                          });
}

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.79788456080286535588);
  constexpr T k = T(0.044715);
  const auto x = detail::arr(a.value());
  Tensor<T> th(a.shape());
  detail::arr(th) = c * (x + k * x * x * x);
  detail::tanh_inplace(th);
  Tensor<T> out(a.shape());
  detail::arr(out) = T(0.5) * x * (T(1) + detail::arr(th));
  Tensor<T> deriv(a.shape());
  {
    const auto t = detail::arr(th);
    detail::arr(deriv) = T(0.5) * (T(1) + t) +
                         T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
  }
  return a.tape()->record(std::move(out), a.requires_grad(),
                          [a, deriv = std::move(deriv)](Tape<T>& tape, const Tensor<T>& g) {
                            detail::arr(tape.grad_ref(a.id())) +=
                                detail::arr(g) * detail::arr(deriv);
                          });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  detail::tanh_inplace(out);
  const std::size_t out_id = a.tape()->size();
  return a.tape()->record(std::move(out), a.requires_grad(),
                          [a, out_id](Tape<T>& tape, const Tensor<T>& g) {
                            const auto y = detail::arr(tape.value(out_id));
                            detail::arr(tape.grad_ref(a.id())) +=
                                detail::arr(g) * (T(1) - y * y);
                          });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary(
      a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

// ------------------------------------------------------------- broadcasting

// x[..., c] + bias[c]
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require_same_tape(x, bias);
  const std::size_t c = x.shape().back();
  if (bias.value().size() != c) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " vs input " + shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t rows = out.size() / c;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] += bv[i];
  const bool rg = x.requires_grad() || bias.requires_grad();
  return x.tape()->record(std::move(out), rg,
                          [x, bias, c](Tape<T>& tape, const Tensor<T>& g) {
                            detail::accumulate(tape, x, g);
                            if (bias.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(bias.id());
                              for (std::size_t o = 0; o < g.size(); o += c)
                                for (std::size_t i = 0; i < c; ++i) dst[i] += g[o + i];
                            }
                          });
}

// Adds table[k, c] to every x[..., k, ..., c] where k runs over `axis`.
template <class T>
Var<T> add_table(const Var<T>& x, const Var<T>& table, std::size_t axis) {
  detail::require_same_tape(x, table);
  const Shape& s = x.shape();
  if (axis + 1 >= s.size() || table.rank() != 2 || table.dim(0) != s[axis] ||
      table.dim(1) != s.back()) {
    throw DimensionError("add_table: table " + shape_string(table.shape()) +
                         " incompatible with " + shape_string(s) + " at axis " +
                         std::to_string(axis));
  }
  const std::size_t c = s.back();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i + 1 < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.value().size() / (len * inner * c);
  // Visits (row of the table, flat offset of a c-vector) pairs in order.
  auto for_each_row = [=](auto&& fn) {
    std::size_t off = 0;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t in = 0; in < inner; ++in, off += c) fn(k * c, off);
  };
  Tensor<T> out = x.value();
  const T* tv = table.value().data().data();
  for_each_row([&](std::size_t t, std::size_t off) {
    for (std::size_t i = 0; i < c; ++i) out[off + i] += tv[t + i];
  });
  const bool rg = x.requires_grad() || table.requires_grad();
  return x.tape()->record(
      std::move(out), rg, [x, table, c, for_each_row](Tape<T>& tape, const Tensor<T>& g) {
        detail::accumulate(tape, x, g);
        if (table.requires_grad()) {
          T* dst = tape.grad_ref(table.id()).data().data();
          for_each_row([&](std::size_t t, std::size_t off) {
            for (std::size_t i = 0; i < c; ++i) dst[t + i] += g[off + i];
          });
        }
      });
}

// -------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  detail::MapRM<T>(out.data().data(), a.dim(0), b.dim(1)).noalias() =
      detail::CMapRM<T>(a.data().data(), a.dim(0), a.dim(1)) *
      detail::CMapRM<T>(b.data().data(), b.dim(0), b.dim(1));
  return out;
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  Tensor<T> out = matmul(a.value(), b.value());
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(
      std::move(out), rg, [a, b](Tape<T>& tape, const Tensor<T>& g) {
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        auto G = detail::CMapRM<T>(g.data().data(), m, n);
        if (a.requires_grad()) {
          detail::MapRM<T>(tape.grad_ref(a.id()).data().data(), m, k).noalias() +=
              G * detail::CMapRM<T>(b.value().data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          detail::MapRM<T>(tape.grad_ref(b.id()).data().data(), k, n).noalias() +=
              detail::CMapRM<T>(a.value().data().data(), m, k).transpose() * G;
        }
      });
}

// x[..., in] * w[in, out] (+ b[out]); leading axes are flattened into rows.
template <class T>
Var<T> linear_impl(const Var<T>& x, const Var<T>& w, const Var<T>* b) {
  detail::require_same_tape(x, w);
  const std::size_t in = x.shape().back();
  if (w.rank() != 2 || w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) +
                         " weight " + shape_string(w.shape()));
  }
  const std::size_t rows = detail::leading_rows(x.shape());
  const std::size_t outd = w.dim(1);
  if (b && b->value().size() != outd) {
    throw DimensionError("linear: bias " + shape_string(b->shape()) + " for " +
                         std::to_string(outd) + " outputs");
  }
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor<T> out(shape);
  auto O = detail::MapRM<T>(out.data().data(), rows, outd);
  O.noalias() = detail::CMapRM<T>(x.value().data().data(), rows, in) *
                detail::CMapRM<T>(w.value().data().data(), in, outd);
  if (b) {
    O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
        b->value().data().data(), static_cast<Eigen::Index>(outd));
  }
  const Var<T> bias = b ? *b : Var<T>();
  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  return x.tape()->record(
      std::move(out), rg,
      [x, w, bias, rows, in, outd](Tape<T>& tape, const Tensor<T>& g) {
        auto G = detail::CMapRM<T>(g.data().data(), rows, outd);
        if (x.requires_grad()) {
          detail::MapRM<T>(tape.grad_ref(x.id()).data().data(), rows, in).noalias() +=
              G * detail::CMapRM<T>(w.value().data().data(), in, outd).transpose();
        }
        if (w.requires_grad()) {
          detail::MapRM<T>(tape.grad_ref(w.id()).data().data(), in, outd).noalias() +=
              detail::CMapRM<T>(x.value().data().data(), rows, in).transpose() * G;
        }
        if (bias.tape() && bias.requires_grad()) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(
              tape.grad_ref(bias.id()).data().data(), static_cast<Eigen::Index>(outd)) +=
              G.colwise().sum();
        }
      });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  return linear_impl<T>(x, w, nullptr);
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_same_tape(x, b);
  return linear_impl<T>(x, w, &b);
}

// Batched product over the leading axis: alpha * a[G, m, k] * op(b) where
// op(b) is b[G, k, n] or, with transpose_b, b[G, n, k]^T.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false, T alpha = T(1)) {
  detail::require_same_tape(a, b);
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw DimensionError("bmm: inner dimension mismatch " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  using detail::CMapRM;
  using detail::MapRM;
  Tensor<T> out({groups, m, n});
  const T* ap = a.value().data().data();
  const T* bp = b.value().data().data();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    auto A = CMapRM<T>(ap + gi * m * k, m, k);
    auto O = MapRM<T>(out.data().data() + gi * m * n, m, n);
    if (transpose_b)
      O.noalias() = alpha * (A * CMapRM<T>(bp + gi * n * k, n, k).transpose());
    else
      O.noalias() = alpha * (A * CMapRM<T>(bp + gi * k * n, k, n));
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(
      std::move(out), rg,
      [a, b, transpose_b, alpha, groups, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
        const T* ap = a.value().data().data();
        const T* bp = b.value().data().data();
        T* ga = a.requires_grad() ? tape.grad_ref(a.id()).data().data() : nullptr;
        T* gb = b.requires_grad() ? tape.grad_ref(b.id()).data().data() : nullptr;
        for (std::size_t gi = 0; gi < groups; ++gi) {
          auto G = CMapRM<T>(g.data().data() + gi * m * n, m, n);
          auto A = CMapRM<T>(ap + gi * m * k, m, k);
          if (transpose_b) {
            auto B = CMapRM<T>(bp + gi * n * k, n, k);
            if (ga) MapRM<T>(ga + gi * m * k, m, k).noalias() += alpha * (G * B);
            if (gb)
              MapRM<T>(gb + gi * n * k, n, k).noalias() +=
                  alpha * (G.transpose() * A);
          } else {
            auto B = CMapRM<T>(bp + gi * k * n, k, n);
            if (ga)
              MapRM<T>(ga + gi * m * k, m, k).noalias() +=
                  alpha * (G * B.transpose());
            if (gb)
              MapRM<T>(gb + gi * k * n, k, n).noalias() +=
                  alpha * (A.transpose() * G);
          }
        }
      });
}

// y[g] = adj[g or 0] * x[g] for x[..., L, d] (leading axes flattened into
// groups G) and a constant adjacency adj[1 or G, L, L]. The adjacency carries
// no gradient.
template <class T>
Var<T> aggregate(const Tensor<T>& adj, const Var<T>& x) {
  if (x.rank() < 3 || adj.rank() != 3) {
    throw DimensionError("aggregate: adjacency " + shape_string(adj.shape()) +
                         " vs features " + shape_string(x.shape()));
  }
  const std::size_t len = x.dim(x.rank() - 2), d = x.dim(x.rank() - 1);
  const std::size_t groups = x.value().size() / (len * d);
  if (adj.dim(1) != len || adj.dim(2) != len ||
      (adj.dim(0) != 1 && adj.dim(0) != groups)) {
    throw DimensionError("aggregate: adjacency " + shape_string(adj.shape()) +
                         " vs features " + shape_string(x.shape()));
  }
  const bool shared = adj.dim(0) == 1;
  Tensor<T> out(x.shape());
  for (std::size_t gi = 0; gi < groups; ++gi)
    detail::MapRM<T>(out.data().data() + gi * len * d, len, d).noalias() =
        detail::CMapRM<T>(adj.data().data() + (shared ? 0 : gi) * len * len, len, len) *
        detail::CMapRM<T>(x.value().data().data() + gi * len * d, len, d);
  return x.tape()->record(
      std::move(out), x.requires_grad(),
      [adj, x, groups, len, d, shared](Tape<T>& tape, const Tensor<T>& g) {
        T* gx = tape.grad_ref(x.id()).data().data();
        for (std::size_t gi = 0; gi < groups; ++gi) {
          auto A = detail::CMapRM<T>(
              adj.data().data() + (shared ? 0 : gi) * len * len, len, len);
          detail::MapRM<T>(gx + gi * len * d, len, d).noalias() +=
              A.transpose() * detail::CMapRM<T>(g.data().data() + gi * len * d, len, d);
        }
      });
}

// ------------------------------------------------------------- attention heads

// qkv[..., L, 3 * heads * dh] -> part (0 = q, 1 = k, 2 = v) laid out as
// [G * heads, L, dh], G the product of the leading axes.
template <class T>
Var<T> split_heads(const Var<T>& qkv, std::size_t part, std::size_t heads) {
  if (qkv.rank() < 2 || part > 2 || heads == 0 || qkv.shape().back() % (3 * heads) != 0)
    throw DimensionError("split_heads: cannot split " + shape_string(qkv.shape()) +
                         " into 3 x " + std::to_string(heads) + " heads");
  const std::size_t c = qkv.shape().back(), len = qkv.dim(qkv.rank() - 2);
  const std::size_t dh = c / (3 * heads), d = heads * dh;
  const std::size_t groups = qkv.value().size() / (len * c);
  Tensor<T> out({groups * heads, len, dh});
  const T* src = qkv.value().data().data();
  T* dst = out.data().data();
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(src + (gi * len + l) * c + part * d + h * dh, dh,
                    dst + ((gi * heads + h) * len + l) * dh);
  return qkv.tape()->record(
      std::move(out), qkv.requires_grad(),
      [qkv, part, heads, groups, len, c, dh, d](Tape<T>& tape, const Tensor<T>& g) {
        T* gq = tape.grad_ref(qkv.id()).data().data();
        const T* src = g.data().data();
        for (std::size_t gi = 0; gi < groups; ++gi)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < len; ++l) {
              T* row = gq + (gi * len + l) * c + part * d + h * dh;
              const T* gr = src + ((gi * heads + h) * len + l) * dh;
              for (std::size_t i = 0; i < dh; ++i) row[i] += gr[i];
            }
      });
}

// Inverse layout of split_heads for one part: [G * heads, L, dh] ->
// [G, L, heads * dh], reshaped to `shape`.
template <class T>
Var<T> merge_heads(const Var<T>& x, std::size_t heads, Shape shape) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0)
    throw DimensionError("merge_heads: bad input " + shape_string(x.shape()));
  const std::size_t groups = x.dim(0) / heads, len = x.dim(1), dh = x.dim(2);
  const std::size_t d = heads * dh;
  if (shape_size(shape) != x.value().size() || shape.back() != d)
    throw DimensionError("merge_heads: target shape " + shape_string(shape));
  Tensor<T> out(std::move(shape));
  const T* src = x.value().data().data();
  T* dst = out.data().data();
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(src + ((gi * heads + h) * len + l) * dh, dh,
                    dst + (gi * len + l) * d + h * dh);
  return x.tape()->record(
      std::move(out), x.requires_grad(),
      [x, heads, groups, len, dh, d](Tape<T>& tape, const Tensor<T>& g) {
        T* gx = tape.grad_ref(x.id()).data().data();
        const T* src = g.data().data();
        for (std::size_t gi = 0; gi < groups; ++gi)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < len; ++l) {
              T* row = gx + ((gi * heads + h) * len + l) * dh;
              const T* gr = src + (gi * len + l) * d + h * dh;
              for (std::size_t i = 0; i < dh; ++i) row[i] += gr[i];
            }
      });
}

// ------------------------------------------------------------- normalization

namespace detail {

struct AxisLayout {
  std::size_t outer, len, inner;
};

inline AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  AxisLayout l{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace detail

// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t r = 0; r < l.inner; ++r) {
      const std::size_t base = o * l.len * l.inner + r;
      T mx = x[base];
      for (std::size_t i = 1; i < l.len; ++i) mx = std::max(mx, x[base + i * l.inner]);
      for (std::size_t i = 0; i < l.len; ++i)
        out[base + i * l.inner] = x[base + i * l.inner] - mx;
    }
  }
  detail::arr(out) = detail::arr(out).exp();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t r = 0; r < l.inner; ++r) {
      const std::size_t base = o * l.len * l.inner + r;
      T total = T(0);
      for (std::size_t i = 0; i < l.len; ++i) total += out[base + i * l.inner];
      const T inv = T(1) / total;
      for (std::size_t i = 0; i < l.len; ++i) out[base + i * l.inner] *= inv;
    }
  }
  return out;
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor<T> out = softmax(x.value(), axis);
  Tape<T>* tape = x.tape();
  // The output node id is known only after record(); it is the next id.
  const std::size_t out_id = tape->size();
  return tape->record(
      std::move(out), x.requires_grad(),
      [x, l, out_id](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& y = tape.value(out_id);
        Tensor<T>& dst = tape.grad_ref(x.id());
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t r = 0; r < l.inner; ++r) {
            const std::size_t base = o * l.len * l.inner + r;
            T dot = T(0);
            for (std::size_t i = 0; i < l.len; ++i)
              dot += g[base + i * l.inner] * y[base + i * l.inner];
            for (std::size_t i = 0; i < l.len; ++i) {
              const std::size_t j = base + i * l.inner;
              dst[j] += y[j] * (g[j] - dot);
            }
          }
        }
      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = detail::leading_rows(x.shape());
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: affine parameters must have length " +
                         std::to_string(c));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * c;
    T mean = T(0);
    for (std::size_t i = 0; i < c; ++i) mean += in[i];
    mean /= T(c);
    T var = T(0);
    for (std::size_t i = 0; i < c; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i)
      out[r * c + i] = (in[i] - mean) * inv * gain[i] + bias[i];
  }
  return out;
}

// Normalizes over the last axis, then applies gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  detail::require_same_tape(x, gain);
  detail::require_same_tape(x, bias);
  const std::size_t c = x.shape().back();
  const std::size_t rows = detail::leading_rows(x.shape());
  if (gain.value().size() != c || bias.value().size() != c) {
    throw DimensionError("layer_norm: affine parameters must have length " +
                         std::to_string(c));
  }
  // Keep the normalized values and inverse std for the backward pass.
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(x.shape());
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data().data() + r * c;
    T mean = T(0);
    for (std::size_t i = 0; i < c; ++i) mean += in[i];
    mean /= T(c);
    T var = T(0);
    for (std::size_t i = 0; i < c; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < c; ++i) {
      const T h = (in[i] - mean) * inv;
      xhat[r * c + i] = h;
      out[r * c + i] = h * gv[i] + bv[i];
    }
  }
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return x.tape()->record(
      std::move(out), rg,
      [x, gain, bias, c, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& gv = gain.value();
        if (gain.requires_grad() || bias.requires_grad()) {
          Tensor<T>* gg = gain.requires_grad() ? &tape.grad_ref(gain.id()) : nullptr;
          Tensor<T>* gb = bias.requires_grad() ? &tape.grad_ref(bias.id()) : nullptr;
          for (std::size_t o = 0; o < g.size(); o += c) {
            for (std::size_t i = 0; i < c; ++i) {
              if (gg) (*gg)[i] += g[o + i] * xhat[o + i];
              if (gb) (*gb)[i] += g[o + i];
            }
          }
        }
        if (!x.requires_grad()) return;
        Tensor<T>& dx = tape.grad_ref(x.id());
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_dh = T(0), sum_dh_h = T(0);
          for (std::size_t i = 0; i < c; ++i) {
            const T dh = g[r * c + i] * gv[i];
            sum_dh += dh;
            sum_dh_h += dh * xhat[r * c + i];
          }
          const T mean_dh = sum_dh / T(c);
          const T mean_dh_h = sum_dh_h / T(c);
          for (std::size_t i = 0; i < c; ++i) {
            const T dh = g[r * c + i] * gv[i];
            dx[r * c + i] +=
                inv_std[r] * (dh - mean_dh - xhat[r * c + i] * mean_dh_h);
          }
        }
      });
}

// ------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape()->record(std::move(out), x.requires_grad(),
                          [x](Tape<T>& tape, const Tensor<T>& g) {
                            tape.accumulate_grad(x.id(), g);
                          });
}

namespace detail {

// Gather map for an axis permutation, expressed over contiguous blocks:
// out block i copies `block` elements starting at in[map[i]]. Trailing axes
// that stay in place form the block.
struct PermutationMap {
  std::vector<std::size_t> map;
  std::size_t block = 1;
};

inline PermutationMap permutation_map(const Shape& in_shape,
                                      const std::vector<std::size_t>& perm) {
  const std::size_t rank = in_shape.size();
  if (perm.size() != rank) throw DimensionError("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  PermutationMap pm;
  std::size_t keep = rank;
  while (keep > 0 && perm[keep - 1] == keep - 1) {
    pm.block *= in_shape[keep - 1];
    --keep;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::size_t total = 1;
  for (std::size_t i = 0; i < keep; ++i) total *= in_shape[perm[i]];
  pm.map.resize(total);
  std::vector<std::size_t> idx(keep, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < keep; ++i) src += idx[i] * in_stride[perm[i]];
    pm.map[flat] = src;
    for (std::size_t i = keep; i-- > 0;) {
      if (++idx[i] < in_shape[perm[i]]) break;
      idx[i] = 0;
    }
  }
  return pm;
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto pm = detail::permutation_map(x.shape(), perm);
  Shape shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shape[i] = x.dim(perm[i]);
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < pm.map.size(); ++i)
    std::copy_n(x.data().data() + pm.map[i], pm.block, out.data().data() + i * pm.block);
  return out;
}

template <class T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  auto pm = detail::permutation_map(x.shape(), perm);
  Shape shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shape[i] = x.dim(perm[i]);
  Tensor<T> out(shape);
  const T* in = x.value().data().data();
  for (std::size_t i = 0; i < pm.map.size(); ++i)
    std::copy_n(in + pm.map[i], pm.block, out.data().data() + i * pm.block);
  return x.tape()->record(std::move(out), x.requires_grad(),
                          [x, pm = std::move(pm)](Tape<T>& tape, const Tensor<T>& g) {
                            T* dst = tape.grad_ref(x.id()).data().data();
                            for (std::size_t i = 0; i < pm.map.size(); ++i) {
                              const T* src = g.data().data() + i * pm.block;
                              for (std::size_t k = 0; k < pm.block; ++k)
                                dst[pm.map[i] + k] += src[k];
                            }
                          });
}

template <class T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  Shape sa = a.shape(), sb = b.shape();
  const std::size_t ca = sa.back(), cb = sb.back();
  sa.pop_back();
  sb.pop_back();
  if (sa != sb) {
    throw DimensionError("concat_last: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t rows = shape_size(sa);
  sa.push_back(ca + cb);
  Tensor<T> out(sa);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data().data() + r * ca, ca, out.data().data() + r * (ca + cb));
    std::copy_n(bv.data().data() + r * cb, cb, out.data().data() + r * (ca + cb) + ca);
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.tape()->record(std::move(out), rg,
                          [a, b, rows, ca, cb](Tape<T>& tape, const Tensor<T>& g) {
                            const std::size_t c = ca + cb;
                            if (a.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(a.id());
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t i = 0; i < ca; ++i)
                                  dst[r * ca + i] += g[r * c + i];
                            }
                            if (b.requires_grad()) {
                              Tensor<T>& dst = tape.grad_ref(b.id());
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t i = 0; i < cb; ++i)
                                  dst[r * cb + i] += g[r * c + ca + i];
                            }
                          });
}

template <class T>
Var<T> slice_last(const Var<T>& x, std::size_t start, std::size_t len) {
  const std::size_t c = x.shape().back();
  if (start + len > c) throw DimensionError("slice_last: range out of bounds");
  const std::size_t rows = detail::leading_rows(x.shape());
  Shape shape = x.shape();
  shape.back() = len;
  Tensor<T> out(shape);
  const Tensor<T>& in = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.data().data() + r * c + start, len, out.data().data() + r * len);
  return x.tape()->record(std::move(out), x.requires_grad(),
                          [x, rows, c, start, len](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T>& dst = tape.grad_ref(x.id());
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < len; ++i)
                                dst[r * c + start + i] += g[r * len + i];
                          });
}

// ------------------------------------------------------------- stochastic

// Inverted dropout; identity when p == 0 or rng is null. Each 64-bit draw
// decides four elements through 16-bit lanes, so the drop probability is p
// rounded to a multiple of 2^-16.
template <class T>
Var<T> dropout(const Var<T>& x, T p, Rng* rng) {
  if (p <= T(0) || rng == nullptr) return x;
  if (p >= T(1)) throw ConfigError("dropout probability must be < 1");
  const auto cutoff = static_cast<std::uint64_t>(std::llround(static_cast<double>(p) * 65536.0));
  Tensor<T> mask(x.shape());
  const T s = T(1) / (T(1) - p);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i % 4 == 0) bits = (*rng)();
    mask[i] = (bits & 0xFFFF) >= cutoff ? s : T(0);
    bits >>= 16;
  }
  Tensor<T> out = x.value();
  detail::arr(out) *= detail::arr(mask);
  return x.tape()->record(std::move(out), x.requires_grad(),
                          [x, mask = std::move(mask)](Tape<T>& tape, const Tensor<T>& g) {
                            detail::arr(tape.grad_ref(x.id())) +=
                                detail::arr(g) * detail::arr(mask);
                          });
}

// ------------------------------------------------------------- reductions

// Euclidean norm over the last axis; x[..., c] -> [...].
template <class T>
Var<T> row_norm(const Var<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = detail::leading_rows(x.shape());
  Shape shape = x.shape();
  shape.pop_back();
  Tensor<T> out(shape);
  const Tensor<T>& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t i = 0; i < c; ++i) s += in[r * c + i] * in[r * c + i];
    out[r] = std::sqrt(s);
  }
  const std::size_t out_id = x.tape()->size();
  return x.tape()->record(
      std::move(out), x.requires_grad(),
      [x, c, rows, out_id](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& in = x.value();
        const Tensor<T>& norm = tape.value(out_id);
        Tensor<T>& dst = tape.grad_ref(x.id());
        for (std::size_t r = 0; r < rows; ++r) {
          if (norm[r] == T(0)) continue;  // subgradient 0 at the kink
          const T k = g[r] / norm[r];
          for (std::size_t i = 0; i < c; ++i) dst[r * c + i] += k * in[r * c + i];
        }
      });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().data()) s += v;
  return x.tape()->record(Tensor<T>(Shape{}, std::vector<T>{s}), x.requires_grad(),
                          [x](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T>& dst = tape.grad_ref(x.id());
                            for (auto& v : dst.storage()) v += g[0];
                          });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

}  // namespace poselift::numerics
