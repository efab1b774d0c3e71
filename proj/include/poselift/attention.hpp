#pragma once

#include <cmath>
#include <functional>

#include "poselift/autodiff.hpp"

namespace poselift::dualstream {

using numerics::Tape;
using numerics::Var;

template <class T>
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; unused in eval mode
  T dropout = T(0);
  // Called with every attention matrix [groups*heads, L, L] after softmax.
  std::function<void(const Tensor<T>&)> on_attention;

  Rng* dropout_rng() const { return training ? rng : nullptr; }
};

template <class T>
struct MhsaWeights {
  Var<T> qkv_weight;  // [d, 3d]
  Var<T> qkv_bias;    // [3d]
  Var<T> proj_weight; // [d, d]
  Var<T> proj_bias;   // [d]
};

// Multi-head self-attention over tokens [..., L, d], every leading index an
// independent sequence: per head softmax(Q K^T / sqrt(d / heads)) V, heads
// concatenated, then projected.
template <class T>
Var<T> mhsa(const Var<T>& tokens, const MhsaWeights<T>& w, std::size_t heads,
            const ForwardContext<T>* ctx = nullptr) {
  using namespace numerics;
  if (tokens.rank() < 2) throw DimensionError("mhsa expects tokens [..., L, d]");
  const std::size_t d = tokens.shape().back();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("mhsa: d=" + std::to_string(d) + " not divisible by heads=" +
                      std::to_string(heads));
  const std::size_t dh = d / heads;

  Var<T> qkv = linear(tokens, w.qkv_weight, w.qkv_bias);     // [..., L, 3d]
  Var<T> q = split_heads(qkv, 0, heads);                     // [G*H, L, dh]
  Var<T> k = split_heads(qkv, 1, heads);
  Var<T> v = split_heads(qkv, 2, heads);

  Var<T> scores = bmm(q, k, /*transpose_b=*/true, T(1) / std::sqrt(T(dh)));
  Var<T> attn = softmax(scores, 2);
  if (ctx && ctx->on_attention) ctx->on_attention(attn.value());

  Var<T> mixed = merge_heads(bmm(attn, v), heads, tokens.shape());
  return linear(mixed, w.proj_weight, w.proj_bias);
}

}  // namespace poselift::dualstream
