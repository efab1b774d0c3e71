#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "poselift/attention.hpp"
#include "poselift/autodiff.hpp"
#include "poselift/params.hpp"
#include "poselift/pde.hpp"
#include "poselift/rng.hpp"
#include "poselift/skeleton.hpp"

namespace poselift::dualstream {

using numerics::Binding;
using numerics::ParamStore;

// How the Transformer and GCN streams are combined inside a block.
enum class StreamMode {
  parallel,              // both streams from the same input, adaptive fusion
  transformer_only,
  gcn_only,
  gcn_then_transformer,  // sequential
  transformer_then_gcn,  // sequential
};

inline std::string to_string(StreamMode m) {
  switch (m) {
    case StreamMode::parallel: return "parallel";
    case StreamMode::transformer_only: return "transformer";
    case StreamMode::gcn_only: return "gcn";
    case StreamMode::gcn_then_transformer: return "gcn_then_transformer";
    case StreamMode::transformer_then_gcn: return "transformer_then_gcn";
  }
  return "parallel";
}

inline StreamMode stream_mode_from_string(const std::string& s) {
  for (auto m : {StreamMode::parallel, StreamMode::transformer_only, StreamMode::gcn_only,
                 StreamMode::gcn_then_transformer, StreamMode::transformer_then_gcn}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown backbone.mode '" + s + "'");
}

struct BackboneConfig {
  std::size_t d = 128;        // token embedding
  std::size_t d_prime = 512;  // pre-head expansion
  std::size_t depth = 8;
  std::size_t heads = 8;
  std::size_t k = 3;          // temporal KNN neighbours
  double dropout = 0.1;
  std::size_t mlp_ratio = 4;  // hidden width of the attention MLPs; 0 disables them
  std::size_t frames = 27;
  std::size_t joints = 17;
  StreamMode mode = StreamMode::parallel;
  pde::PdeConfig pde;

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0)
      throw ConfigError("backbone.d must be a positive multiple of backbone.heads");
    if (d % 2 != 0) throw ConfigError("backbone.d must be even (sinusoidal step embedding)");
    if (d_prime == 0) throw ConfigError("backbone.d_prime must be positive");
    if (depth < 1) throw ConfigError("backbone.depth must be >= 1");
    if (frames < 2) throw ConfigError("backbone frames must be >= 2");
    if (k < 1 || k >= frames) throw ConfigError("backbone.k must satisfy 1 <= K < N");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("backbone.dropout must lie in [0, 1)");
    pde.validate();
  }

  bool uses_transformer() const { return mode != StreamMode::gcn_only; }
  bool uses_gcn() const { return mode != StreamMode::transformer_only; }
  bool uses_fusion() const { return mode == StreamMode::parallel; }
};

// Input features per joint token: 2D (2) + noisy 3D (3) + step embedding (d).
inline std::size_t token_input_dim(const BackboneConfig& cfg) { return 5 + cfg.d; }

// ---------------------------------------------------------------- rearrange

// [B, N, J, d] -> [B*N, J, d]: tokens are joints of one frame.
template <class T>
Var<T> rearrange_spatial(const Var<T>& state) {
  const auto& s = state.shape();
  return numerics::reshape(state, {s[0] * s[1], s[2], s[3]});
}

template <class T>
Var<T> restore_spatial(const Var<T>& tokens, std::size_t batch) {
  const auto& s = tokens.shape();
  return numerics::reshape(tokens, {batch, s[0] / batch, s[1], s[2]});
}

// [B, N, J, d] -> [B*J, N, d]: tokens are frames of one joint.
template <class T>
Var<T> rearrange_temporal(const Var<T>& state) {
  const auto& s = state.shape();
  Var<T> p = numerics::permute(state, {0, 2, 1, 3});
  return numerics::reshape(p, {s[0] * s[2], s[1], s[3]});
}

template <class T>
Var<T> restore_temporal(const Var<T>& tokens, std::size_t batch) {
  const auto& s = tokens.shape();
  Var<T> r = numerics::reshape(tokens, {batch, s[0] / batch, s[1], s[2]});
  return numerics::permute(r, {0, 2, 1, 3});
}

// ---------------------------------------------------------------- graphs

// S[i][j] = f_i . f_j for f [N, d].
template <class T>
Tensor<T> temporal_similarity(const Tensor<T>& f) {
  if (f.rank() != 2 || f.dim(0) < 2)
    throw DimensionError("temporal_similarity expects [N >= 2, d]");
  const std::size_t n = f.dim(0), d = f.dim(1);
  Tensor<T> s({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      T dot = T(0);
      for (std::size_t c = 0; c < d; ++c) dot += f.at(i, c) * f.at(j, c);
      s.at(i, j) = dot;
      s.at(j, i) = dot;
    }
  }
  return s;
}

// Marks, per row, the k most similar other columns (ties to the lower
// index), then symmetrizes with logical OR. No self-loops.
template <class T>
Tensor<T> knn_adjacency(const Tensor<T>& s, std::size_t k) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) throw DimensionError("knn_adjacency expects [N, N]");
  const std::size_t n = s.dim(0);
  if (k < 1 || k + 1 > n)
    throw ConfigError("knn_adjacency: k=" + std::to_string(k) + " outside [1, N-1]");
  Tensor<T> a({n, n});
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) {
    idx.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t x, std::size_t y) {
                        if (s.at(i, x) != s.at(i, y)) return s.at(i, x) > s.at(i, y);
                        return x < y;
                      });
    for (std::size_t r = 0; r < k; ++r) {
      a.at(i, idx[r]) = T(1);
      a.at(idx[r], i) = T(1);
    }
  }
  return a;
}

// D^{-1/2} (a + I) D^{-1/2}, D the degree matrix of a + I. Works on a
// single [L, L] matrix or a batch [G, L, L].
template <class T>
Tensor<T> gcn_normalize(const Tensor<T>& a) {
  const bool batched = a.rank() == 3;
  if (!(a.rank() == 2 || batched)) throw DimensionError("gcn_normalize expects [L, L] or [G, L, L]");
  const std::size_t groups = batched ? a.dim(0) : 1;
  const std::size_t n = a.dim(a.rank() - 1);
  if (a.dim(a.rank() - 2) != n) throw DimensionError("adjacency must be square");
  Tensor<T> out(a.shape());
  std::vector<T> inv_sqrt_deg(n);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* src = a.data().data() + g * n * n;
    T* dst = out.data().data() + g * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      T deg = T(1);
      for (std::size_t j = 0; j < n; ++j) {
        if (src[i * n + j] < T(0)) throw ContractError("adjacency must be non-negative");
        deg += src[i * n + j];
      }
      inv_sqrt_deg[i] = T(1) / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        dst[i * n + j] = (src[i * n + j] + (i == j ? T(1) : T(0))) * inv_sqrt_deg[i] *
                         inv_sqrt_deg[j];
  }
  return out;
}

// act(Â x w) over x [..., L, d] and raw adjacency a [L, L] or [1 or G, L, L].
template <class T>
Var<T> gcn_layer(const Var<T>& x, const Tensor<T>& a, const Var<T>& w, bool use_activation) {
  const Tensor<T> norm = gcn_normalize(a.rank() == 2 ? a.reshaped({1, a.dim(0), a.dim(1)}) : a);
  Var<T> h = numerics::linear(numerics::aggregate(norm, x), w);
  return use_activation ? numerics::gelu(h) : h;
}

// ---------------------------------------------------------------- fusion

// Per channel, (α_T, α_G) = softmax of the two logits produced by the
// linear map of [f_t ‖ f_g]; output = α_T ∘ f_t + α_G ∘ f_g.
template <class T>
Var<T> adaptive_fusion(const Var<T>& f_t, const Var<T>& f_g, const Var<T>& w, const Var<T>& b) {
  using namespace numerics;
  detail::require_same_shape(f_t, f_g, "adaptive_fusion");
  const std::size_t d = f_t.shape().back();
  Shape split = f_t.shape();
  split.back() = 2;
  split.push_back(d);
  Var<T> logits = linear(concat_last(f_t, f_g), w, b);
  Var<T> alpha = softmax(reshape(logits, split), split.size() - 2);
  Shape flat = f_t.shape();
  flat.back() = 2 * d;
  alpha = reshape(alpha, flat);
  return add(mul(slice_last(alpha, 0, d), f_t), mul(slice_last(alpha, d, d), f_g));
}

// ---------------------------------------------------------------- backbone

namespace detail {

template <class T>
Tensor<T> step_embedding(std::size_t t, std::size_t dim) {
  Tensor<T> e({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                 static_cast<double>(half));
    e[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    e[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return e;
}

// Linear resampling matrix [n_out, n_in] used when the window length differs
// from the trained temporal table.
template <class T>
Tensor<T> resample_matrix(std::size_t n_out, std::size_t n_in) {
  Tensor<T> m({n_out, n_in});
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = n_out == 1 ? 0.0
                                  : static_cast<double>(i) * static_cast<double>(n_in - 1) /
                                        static_cast<double>(n_out - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    const double frac = pos - static_cast<double>(lo);
    m.at(i, lo) += static_cast<T>(1.0 - frac);
    m.at(i, hi) += static_cast<T>(frac);
  }
  return m;
}

}  // namespace detail

template <class T>
class Backbone {
 public:
  Backbone(BackboneConfig cfg, skeleton::SkeletonTopology topo)
      : cfg_(std::move(cfg)), topo_(std::move(topo)) {
    cfg_.validate();
    topo_.validate();
    if (topo_.joint_count != cfg_.joints)
      throw ConfigError("backbone joints (" + std::to_string(cfg_.joints) +
                        ") do not match the topology (" + std::to_string(topo_.joint_count) + ")");
    Tensor<double> adj = topo_.adjacency();
    body_adjacency_ = adj.cast<T>().reshaped({1, cfg_.joints, cfg_.joints});
    declare();
  }

  const BackboneConfig& config() const { return cfg_; }
  const skeleton::SkeletonTopology& topology() const { return topo_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Tensor<T>& body_adjacency() const { return body_adjacency_; }

  // Kaiming-style uniform fan-in init for weight matrices; fusion starts at
  // zero so both streams begin with weight 0.5.
  void init(std::uint64_t seed) {
    Rng rng = make_rng(seed, "init");
    std::normal_distribution<double> pos(0.0, 0.02);
    for (auto& p : params_.params()) {
      const std::string& n = p.name;
      auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
      };
      if (n.find(".fusion.") != std::string::npos || ends_with(".bias")) {
        p.value.fill(T(0));
      } else if (ends_with(".gain")) {
        p.value.fill(T(1));
      } else if (n.rfind("pos.", 0) == 0) {
        for (auto& v : p.value.storage()) v = static_cast<T>(pos(rng));
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.dim(0)));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : p.value.storage()) v = static_cast<T>(u(rng));
      }
    }
  }

  // x2d [B, N, J, 2], y_noisy [B, N, J, 3], one diffusion step per sample.
  // Returns the clean-pose estimate [B, N, J, 3].
  Var<T> forward(Binding<T>& bind, const Tensor<T>& x2d, const Tensor<T>& y_noisy,
                 const std::vector<std::size_t>& steps, const ForwardContext<T>& ctx) const {
    using namespace numerics;
    if (x2d.rank() != 4 || y_noisy.rank() != 4 || x2d.dim(3) != 2 || y_noisy.dim(3) != 3 ||
        x2d.dim(0) != y_noisy.dim(0) || x2d.dim(1) != y_noisy.dim(1) ||
        x2d.dim(2) != y_noisy.dim(2))
      throw DimensionError("backbone inputs must be [B, N, J, 2] and [B, N, J, 3], got " +
                           shape_string(x2d.shape()) + " and " + shape_string(y_noisy.shape()));
    const std::size_t batch = x2d.dim(0), n = x2d.dim(1), j = x2d.dim(2);
    if (j != cfg_.joints)
      throw DimensionError("backbone expects " + std::to_string(cfg_.joints) + " joints");
    if (steps.size() != batch) throw DimensionError("one diffusion step per sample required");
    if (n < 2) throw DimensionError("backbone needs at least two frames");
    Tape<T>& tape = bind.tape();

    const std::size_t in_dim = token_input_dim(cfg_);
    Tensor<T> tokens({batch, n, j, in_dim});
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor<T> emb = detail::step_embedding<T>(steps[b], cfg_.d);
      for (std::size_t f = 0; f < n; ++f) {
        for (std::size_t q = 0; q < j; ++q) {
          T* dst = &tokens.at(b, f, q, std::size_t{0});
          dst[0] = x2d.at(b, f, q, std::size_t{0});
          dst[1] = x2d.at(b, f, q, std::size_t{1});
          for (std::size_t c = 0; c < 3; ++c) dst[2 + c] = y_noisy.at(b, f, q, c);
          std::copy(emb.data().begin(), emb.data().end(), dst + 5);
        }
      }
    }
    Var<T> x = linear(tape.constant(std::move(tokens)), bind("embed.weight"), bind("embed.bias"));
    x = add_table(x, bind("pos.spatial"), 2);
    Var<T> temporal_pos = bind("pos.temporal");
    if (n != cfg_.frames)
      temporal_pos = matmul(tape.constant(detail::resample_matrix<T>(n, cfg_.frames)), temporal_pos);
    x = add_table(x, temporal_pos, 1);

    for (std::size_t i = 0; i < cfg_.depth; ++i) x = dual_block(bind, x, i, ctx);

    const std::string h = "head.";
    x = layer_norm(x, bind(h + "norm.gain"), bind(h + "norm.bias"));
    x = numerics::tanh(linear(x, bind(h + "expand.weight"), bind(h + "expand.bias")));
    return linear(x, bind(h + "out.weight"), bind(h + "out.bias"));
  }

  Var<T> dual_block(Binding<T>& bind, const Var<T>& x, std::size_t block,
                    const ForwardContext<T>& ctx) const {
    switch (cfg_.mode) {
      case StreamMode::parallel: {
        const Var<T> ft = transformer_stream(bind, x, block, ctx);
        const Var<T> fg = gcn_stream(bind, x, block, ctx);
        const std::string p = prefix(block) + "fusion.";
        return adaptive_fusion(ft, fg, bind(p + "weight"), bind(p + "bias"));
      }
      case StreamMode::transformer_only: return transformer_stream(bind, x, block, ctx);
      case StreamMode::gcn_only: return gcn_stream(bind, x, block, ctx);
      case StreamMode::gcn_then_transformer:
        return transformer_stream(bind, gcn_stream(bind, x, block, ctx), block, ctx);
      case StreamMode::transformer_then_gcn:
        return gcn_stream(bind, transformer_stream(bind, x, block, ctx), block, ctx);
    }
    return x;
  }

  // Spatial then temporal attention (each followed by its MLP when enabled).
  // [B, N, J, d] already groups joints per frame; the temporal view is the
  // [B, J, N, d] permutation. Both are the rearrangements above without the
  // flattening copy.
  Var<T> transformer_stream(Binding<T>& bind, const Var<T>& x, std::size_t block,
                            const ForwardContext<T>& ctx) const {
    const std::string p = prefix(block);
    Var<T> s = attention_sublayer(bind, x, p + "spatial_attn.", ctx);
    if (cfg_.mlp_ratio > 0) s = mlp_sublayer(bind, s, p + "spatial_mlp.", ctx);
    Var<T> t = numerics::permute(s, {0, 2, 1, 3});
    t = attention_sublayer(bind, t, p + "temporal_attn.", ctx);
    if (cfg_.mlp_ratio > 0) t = mlp_sublayer(bind, t, p + "temporal_mlp.", ctx);
    return numerics::permute(t, {0, 2, 1, 3});
  }

  // Spatial GCN over the body graph, then temporal GCN over the KNN graph of
  // frame similarities.
  Var<T> gcn_stream(Binding<T>& bind, const Var<T>& x, std::size_t block,
                    const ForwardContext<T>& ctx) const {
    using namespace numerics;
    const std::string p = prefix(block);
    Var<T> s = x;
    {
      const std::string q = p + "spatial_gcn.";
      Var<T> normed = layer_norm(s, bind(q + "norm.gain"), bind(q + "norm.bias"));
      Var<T> g = gcn_layer(normed, body_adjacency_, bind(q + "weight"), true);
      s = add(s, dropout(g, T(ctx.dropout), ctx.dropout_rng()));
    }
    Var<T> t = permute(s, {0, 2, 1, 3});
    {
      const std::string q = p + "temporal_gcn.";
      Var<T> normed = layer_norm(t, bind(q + "norm.gain"), bind(q + "norm.bias"));
      Var<T> g = gcn_layer(normed, temporal_adjacency(normed.value()), bind(q + "weight"), true);
      t = add(t, dropout(g, T(ctx.dropout), ctx.dropout_rng()));
    }
    return permute(t, {0, 2, 1, 3});
  }

  // KNN adjacency per temporal group of features [..., N, d] -> [G, N, N].
  Tensor<T> temporal_adjacency(const Tensor<T>& feats) const {
    const std::size_t n = feats.dim(feats.rank() - 2), d = feats.dim(feats.rank() - 1);
    const std::size_t groups = feats.size() / (n * d);
    Tensor<T> out({groups, n, n});
    Tensor<T> f({n, d});
    for (std::size_t g = 0; g < groups; ++g) {
      std::copy_n(feats.data().data() + g * n * d, n * d, f.data().data());
      const Tensor<T> a = knn_adjacency(temporal_similarity(f), std::min(cfg_.k, n - 1));
      std::copy(a.data().begin(), a.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(g * n * n));
    }
    return out;
  }

  MhsaWeights<T> mhsa_weights(Binding<T>& bind, const std::string& p) const {
    return {bind(p + "qkv.weight"), bind(p + "qkv.bias"), bind(p + "proj.weight"),
            bind(p + "proj.bias")};
  }

 private:
  static std::string prefix(std::size_t block) {
    return "blocks." + std::to_string(block) + ".";
  }

  // Pre-norm attention treated as a PDE step (or a plain residual update when
  // the PDE is disabled).
  Var<T> attention_sublayer(Binding<T>& bind, const Var<T>& x, const std::string& p,
                            const ForwardContext<T>& ctx) const {
    using namespace numerics;
    const MhsaWeights<T> w = mhsa_weights(bind, p);
    const Var<T> gain = bind(p + "norm.gain");
    const Var<T> bias = bind(p + "norm.bias");
    return pde::pde_attention_layer<T>(
        x,
        [&](const Var<T>& y) {
          Var<T> a = mhsa(layer_norm(y, gain, bias), w, cfg_.heads, &ctx);
          return dropout(a, T(ctx.dropout), ctx.dropout_rng());
        },
        cfg_.pde);
  }

  Var<T> mlp_sublayer(Binding<T>& bind, const Var<T>& x, const std::string& p,
                      const ForwardContext<T>& ctx) const {
    using namespace numerics;
    Var<T> h = layer_norm(x, bind(p + "norm.gain"), bind(p + "norm.bias"));
    h = gelu(linear(h, bind(p + "fc1.weight"), bind(p + "fc1.bias")));
    h = linear(h, bind(p + "fc2.weight"), bind(p + "fc2.bias"));
    return add(x, dropout(h, T(ctx.dropout), ctx.dropout_rng()));
  }

  void declare() {
    const std::size_t d = cfg_.d;
    auto add = [&](const std::string& name, Shape shape) { params_.add(name, Tensor<T>(shape)); };
    auto norm = [&](const std::string& p) {
      add(p + "norm.gain", {d});
      add(p + "norm.bias", {d});
    };
    add("embed.weight", {token_input_dim(cfg_), d});
    add("embed.bias", {d});
    add("pos.spatial", {cfg_.joints, d});
    add("pos.temporal", {cfg_.frames, d});
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::string p = prefix(i);
      if (cfg_.uses_transformer()) {
        for (const char* axis : {"spatial", "temporal"}) {
          const std::string a = p + axis + "_attn.";
          norm(a);
          add(a + "qkv.weight", {d, 3 * d});
          add(a + "qkv.bias", {3 * d});
          add(a + "proj.weight", {d, d});
          add(a + "proj.bias", {d});
          if (cfg_.mlp_ratio > 0) {
            const std::string m = p + axis + "_mlp.";
            const std::size_t hidden = cfg_.mlp_ratio * d;
            norm(m);
            add(m + "fc1.weight", {d, hidden});
            add(m + "fc1.bias", {hidden});
            add(m + "fc2.weight", {hidden, d});
            add(m + "fc2.bias", {d});
          }
        }
      }
      if (cfg_.uses_gcn()) {
        for (const char* axis : {"spatial", "temporal"}) {
          const std::string g = p + axis + "_gcn.";
          norm(g);
          add(g + "weight", {d, d});
        }
      }
      if (cfg_.uses_fusion()) {
        add(p + "fusion.weight", {2 * d, 2 * d});
        add(p + "fusion.bias", {2 * d});
      }
    }
    norm("head.");
    add("head.expand.weight", {d, cfg_.d_prime});
    add("head.expand.bias", {cfg_.d_prime});
    add("head.out.weight", {cfg_.d_prime, 3});
    add("head.out.bias", {3});
  }

  BackboneConfig cfg_;
  skeleton::SkeletonTopology topo_;
  ParamStore<T> params_;
  Tensor<T> body_adjacency_;
};

// Inference convenience: one forward pass without recording gradients.
template <class T>
Tensor<T> backbone_forward(const Backbone<T>& model, const Tensor<T>& x2d,
                           const Tensor<T>& y_noisy, const std::vector<std::size_t>& steps,
                           const ForwardContext<T>& ctx = {}) {
  numerics::Tape<T> tape;
  Binding<T> bind(tape, model.params());
  return model.forward(bind, x2d, y_noisy, steps, ctx).value();
}

}  // namespace poselift::dualstream
