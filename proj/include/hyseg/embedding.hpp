#pragma once

// Overlapped 3D patch embedding and 3D rotary position embedding.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "hyseg/module.hpp"
#include "hyseg/ops.hpp"

namespace hyseg {

struct PatchEmbedConfig {
  std::size_t in_channels = 1;
  std::size_t embed_dim = 24;
  Triple kernel{7, 7, 7};
  Triple stride{4, 4, 4};
  Triple padding{3, 3, 3};

  void validate() const {
    if (in_channels == 0 || embed_dim == 0) throw ConfigError("patch embedding needs non-zero channels");
    for (int a = 0; a < 3; ++a) {
      if (stride[a] == 0 || kernel[a] == 0) throw ConfigError("patch kernel and stride must be >= 1");
      if (kernel[a] < stride[a]) {
        throw ConfigError("patch kernel " + std::to_string(kernel[a]) + " smaller than stride " +
                          std::to_string(stride[a]) + " (embedding must overlap)");
      }
    }
  }

  Triple output_grid(const Triple& input) const {
    return {conv_out_extent(input[0], kernel[0], stride[0], padding[0]),
            conv_out_extent(input[1], kernel[1], stride[1], padding[1]),
            conv_out_extent(input[2], kernel[2], stride[2], padding[2])};
  }
};

template <typename T>
struct PatchEmbedParams {
  PatchEmbedConfig cfg;
  Tensor<T> weight;  // [embed_dim, in_channels, kd, kh, kw]
  Tensor<T> bias;
  NormParams<T> norm;

  static PatchEmbedParams init(InitRng& rng, const PatchEmbedConfig& cfg) {
    cfg.validate();
    PatchEmbedParams p;
    p.cfg = cfg;
    const std::size_t fan_in = cfg.in_channels * cfg.kernel[0] * cfg.kernel[1] * cfg.kernel[2];
    p.weight = rng.uniform_tensor<T>({cfg.embed_dim, cfg.in_channels, cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]},
                                     1.0 / std::sqrt(static_cast<double>(fan_in)));
    p.bias = Tensor<T>::zeros({cfg.embed_dim}, true);
    p.norm = NormParams<T>::init(cfg.embed_dim);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".conv.weight", weight);
    out.emplace_back(prefix + ".conv.bias", bias);
    norm.collect(out, prefix + ".norm");
  }
};

// Token sequence plus the grid it was flattened from (row-major z, y, x).
template <typename T>
struct TokenGrid {
  Tensor<T> tokens;  // [B, N, C]
  Triple grid{};

  std::size_t count() const { return grid[0] * grid[1] * grid[2]; }

  std::array<std::size_t, 3> coord(std::size_t index) const {
    return {index / (grid[1] * grid[2]), (index / grid[2]) % grid[1], index % grid[2]};
  }
};

// conv3d -> flatten -> layer_norm over channels.
template <typename T>
TokenGrid<T> patch_embed(const Tensor<T>& volume, const PatchEmbedParams<T>& p) {
  const auto& c = p.cfg;
  auto conv = conv3d(volume, p.weight, p.bias, c.stride, c.padding);
  const Triple grid{conv.shape()[2], conv.shape()[3], conv.shape()[4]};
  return {apply(p.norm, volume_to_tokens(conv)), grid};
}

// Per-axis frequency table: theta_j = base^(-2j / (head_dim/3)), j < head_dim/6.
struct RotaryFrequencies {
  std::size_t head_dim = 0;
  double base = 10000.0;
  std::vector<double> theta;

  RotaryFrequencies() = default;
  explicit RotaryFrequencies(std::size_t head_dim_, double base_ = 10000.0) : head_dim(head_dim_), base(base_) {
    if (head_dim == 0 || head_dim % 6 != 0) {
      throw ConfigError("rotary head_dim " + std::to_string(head_dim) + " is not divisible by 6");
    }
    const std::size_t group = head_dim / 3;
    for (std::size_t j = 0; j < group / 2; ++j)
      theta.push_back(std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(group)));
  }

  std::size_t group_width() const { return head_dim / 3; }
};

using Coord3 = std::array<double, 3>;

inline std::vector<Coord3> grid_coords(const Triple& grid) {
  std::vector<Coord3> out;
  out.reserve(grid[0] * grid[1] * grid[2]);
  for (std::size_t z = 0; z < grid[0]; ++z)
    for (std::size_t y = 0; y < grid[1]; ++y)
      for (std::size_t x = 0; x < grid[2]; ++x)
        out.push_back({static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)});
  return out;
}

// Rotates x [B, heads, N, head_dim]. Channel group a in {z, y, x} spans
// [a*g, (a+1)*g) with g = head_dim/3; each (even, odd) pair j inside it turns
// by coord[a] * theta_j.
template <typename T>
Tensor<T> apply_rope3d(const Tensor<T>& x, const std::vector<Coord3>& coords, const RotaryFrequencies& freqs) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("apply_rope3d expects [B,heads,N,head_dim], got " + to_string(s));
  const std::size_t N = s[2], d = s[3];
  if (d % 6 != 0) throw ConfigError("rotary head_dim " + std::to_string(d) + " is not divisible by 6");
  if (d != freqs.head_dim) throw ConfigError("rotary table built for head_dim " + std::to_string(freqs.head_dim));
  if (coords.size() != N) throw ArgumentError("apply_rope3d: " + std::to_string(coords.size()) + " coords for " +
                                              std::to_string(N) + " tokens");
  const std::size_t g = d / 3, half = d / 2;
  std::vector<T> cs(N * half), sn(N * half);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t j = 0; j < g / 2; ++j) {
        const double angle = coords[n][a] * freqs.theta[j];
        cs[n * half + a * (g / 2) + j] = static_cast<T>(std::cos(angle));
        sn[n * half + a * (g / 2) + j] = static_cast<T>(std::sin(angle));
      }
  const std::size_t rows = s[0] * s[1];
  auto rotate = [=](const std::vector<T>& in, std::vector<T>& out, T dir) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = in.data() + (r * N + n) * d;
        T* dst = out.data() + (r * N + n) * d;
        const T* c = cs.data() + n * half;
        const T* sv = sn.data() + n * half;
        for (std::size_t k = 0; k < half; ++k) {
          const T a = src[2 * k], b = src[2 * k + 1], si = dir * sv[k];
          dst[2 * k] += a * c[k] - b * si;
          dst[2 * k + 1] += a * si + b * c[k];
        }
      }
  };
  std::vector<T> out(x.numel(), T(0));
  rotate(x.values(), out, T(1));
  return detail::make_result<T>(s, std::move(out), {&x}, "rope3d", [rotate](Node<T>& self) {
    if (Node<T>* p = detail::grad_parent(self, 0)) rotate(self.grad, p->grad_buffer(), T(-1));
  });
}

template <typename T>
Tensor<T> apply_rope3d(const Tensor<T>& x, const Triple& grid, const RotaryFrequencies& freqs) {
  return apply_rope3d(x, grid_coords(grid), freqs);
}

}  // namespace hyseg
