#pragma once

// Multi-head self-attention with optional key/value sequence reduction and
// 3D rotary positions, plus the pre-norm transformer block.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hyseg/embedding.hpp"
#include "hyseg/module.hpp"
#include "hyseg/ops.hpp"

namespace hyseg {

// K [B,N,C] -> reshape [B, N/r, C*r] -> linear(C*r -> C).
template <typename T>
Tensor<T> reduce_keys(const Tensor<T>& keys, std::size_t ratio, const LinearParams<T>& proj) {
  const Shape& s = keys.shape();
  if (s.size() != 3) throw DimensionError("reduce_keys expects [B,N,C], got " + to_string(s));
  if (ratio < 1) throw ArgumentError("reduction ratio must be >= 1");
  if (s[1] % ratio != 0) {
    throw ArgumentError("sequence length " + std::to_string(s[1]) + " not divisible by reduction ratio " +
                        std::to_string(ratio));
  }
  auto reshaped = reshape(keys, {s[0], s[1] / ratio, s[2] * ratio});
  return apply(proj, reshaped);
}

template <typename T>
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t reduction = 1;
  LinearParams<T> q, k, v, out;
  std::optional<LinearParams<T>> reduce;  // present when reduction > 1

  std::size_t head_dim() const { return channels / heads; }

  static void validate(std::size_t channels, std::size_t heads, std::size_t reduction, bool use_rope) {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
    }
    if (use_rope && (channels / heads) % 6 != 0) {
      throw ConfigError("head_dim " + std::to_string(channels / heads) + " not divisible by 6 (3D rotary embedding)");
    }
    if (reduction < 1) throw ConfigError("reduction ratio must be >= 1");
  }

  static AttentionParams init(InitRng& rng, std::size_t channels, std::size_t heads, std::size_t reduction,
                              bool use_rope = true) {
    validate(channels, heads, reduction, use_rope);
    AttentionParams p;
    p.channels = channels;
    p.heads = heads;
    p.reduction = reduction;
    p.q = LinearParams<T>::init(rng, channels, channels);
    p.k = LinearParams<T>::init(rng, channels, channels);
    p.v = LinearParams<T>::init(rng, channels, channels);
    if (reduction > 1) p.reduce = LinearParams<T>::init(rng, channels * reduction, channels);
    p.out = LinearParams<T>::init(rng, channels, channels);
    return p;
  }

  void collect(ParamList<T>& out_list, const std::string& prefix) const {
    q.collect(out_list, prefix + ".q");
    k.collect(out_list, prefix + ".k");
    v.collect(out_list, prefix + ".v");
    if (reduce) reduce->collect(out_list, prefix + ".reduce");
    out.collect(out_list, prefix + ".out");
  }
};

// Positions and rotary table for one stage; empty coords disables rotation.
struct RopeContext {
  std::vector<Coord3> coords;
  RotaryFrequencies freqs;

  bool enabled() const { return !coords.empty(); }

  static RopeContext for_grid(const Triple& grid, std::size_t head_dim, double base = 10000.0) {
    return {grid_coords(grid), RotaryFrequencies(head_dim, base)};
  }
};

// Receives the attention probabilities [B, heads, N, N/r] when attached.
template <typename T>
struct AttentionProbe {
  Tensor<T> probs;
};

namespace detail {

// [B,N,C] -> [B,heads,N,head_dim]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const Shape& s = x.shape();
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

// [B,heads,N,head_dim] -> [B,N,C]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const Shape& s = x.shape();
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

}  // namespace detail

// x [B,N,C]. RoPE rotates Q and K at their token positions before K/V are
// reduced; V shares K's reduction map.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p, const RopeContext& rope,
                               AttentionProbe<T>* probe = nullptr) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != p.channels) {
    throw ConfigError("attention built for " + std::to_string(p.channels) + " channels, got " + to_string(s));
  }
  if (s[1] == 0) throw ArgumentError("attention over an empty sequence");
  auto q = detail::split_heads(apply(p.q, x), p.heads);
  auto k = detail::split_heads(apply(p.k, x), p.heads);
  auto v = apply(p.v, x);
  if (rope.enabled()) {
    q = apply_rope3d(q, rope.coords, rope.freqs);
    k = apply_rope3d(k, rope.coords, rope.freqs);
  }
  if (p.reduction > 1) {
    k = detail::split_heads(reduce_keys(detail::merge_heads(k), p.reduction, *p.reduce), p.heads);
    v = reduce_keys(v, p.reduction, *p.reduce);
  }
  v = detail::split_heads(v, p.heads);
  auto kt = permute(k, {0, 1, 3, 2});
  auto scores = scale(matmul(q, kt), T(1) / std::sqrt(static_cast<T>(p.head_dim())));
  auto probs = softmax(scores, 3);
  if (probe) probe->probs = probs;
  auto ctx = detail::merge_heads(matmul(probs, v));
  return apply(p.out, ctx);
}

template <typename T>
struct TransformerBlockParams {
  std::size_t channels = 0;
  NormParams<T> norm1;
  AttentionParams<T> attn;
  NormParams<T> norm2;
  MlpParams<T> mlp;

  static TransformerBlockParams init(InitRng& rng, std::size_t channels, std::size_t heads, std::size_t reduction,
                                     std::size_t mlp_ratio, bool use_rope = true) {
    TransformerBlockParams p;
    p.channels = channels;
    p.norm1 = NormParams<T>::init(channels);
    p.attn = AttentionParams<T>::init(rng, channels, heads, reduction, use_rope);
    p.norm2 = NormParams<T>::init(channels);
    p.mlp = MlpParams<T>::init(rng, channels, mlp_ratio);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    attn.collect(out, prefix + ".attn");
    norm2.collect(out, prefix + ".norm2");
    mlp.collect(out, prefix + ".mlp");
  }
};

template <typename T>
Tensor<T> transformer_block_tokens(const Tensor<T>& x, const TransformerBlockParams<T>& p, const RopeContext& rope) {
  auto x1 = add(x, multi_head_attention(apply(p.norm1, x), p.attn, rope));
  return add(x1, apply(p.mlp, apply(p.norm2, x1)));
}

// Volume-level block: [B,C,D,H,W] -> same shape; positions from the volume grid.
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& volume, const TransformerBlockParams<T>& p, bool use_rope = true,
                            double rope_base = 10000.0) {
  if (volume.dim() != 5 || volume.shape()[1] != p.channels) {
    throw ConfigError("transformer block built for " + std::to_string(p.channels) + " channels, got " +
                      to_string(volume.shape()));
  }
  const Triple grid{volume.shape()[2], volume.shape()[3], volume.shape()[4]};
  RopeContext rope;
  if (use_rope) rope = RopeContext::for_grid(grid, p.attn.head_dim(), rope_base);
  return tokens_to_volume(transformer_block_tokens(volume_to_tokens(volume), p, rope), grid);
}

}  // namespace hyseg
