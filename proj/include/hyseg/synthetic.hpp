#pragma once

// Nested-ellipsoid phantoms. Class k+1 always lies inside class k, the way an
// enhancing core sits inside a tumour core inside the whole tumour.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hyseg/errors.hpp"
#include "hyseg/losses.hpp"
#include "hyseg/tensor.hpp"

namespace hyseg {

struct SyntheticDataSpec {
  std::array<std::size_t, 3> extent{32, 32, 32};
  std::size_t channels = 4;
  std::size_t num_classes = 4;  // background + nested foreground classes
  double noise_sigma = 0.1;
  double outer_radius_min = 10.0;  // per-axis radius range of the outermost ellipsoid
  double outer_radius_max = 13.0;
  double inner_scale_min = 0.62;  // each nested ellipsoid is the parent scaled by s in this range
  double inner_scale_max = 0.75;
  double center_jitter = 2.0;
  std::uint64_t seed = 1234;

  void validate() const {
    if (channels == 0) throw ConfigError("data.channels must be >= 1");
    if (num_classes < 2 || num_classes > 255) throw ConfigError("data.num_classes must be in [2, 255]");
    if (noise_sigma < 0) throw ConfigError("data.noise_sigma must be >= 0");
    if (!(outer_radius_min > 0) || outer_radius_max < outer_radius_min) {
      throw ConfigError("data.outer_radius_min/max must satisfy 0 < min <= max");
    }
    if (!(inner_scale_min > 0) || inner_scale_max < inner_scale_min || !(inner_scale_max < 1)) {
      throw ConfigError("data.inner_scale_min/max must satisfy 0 < min <= max < 1");
    }
    if (center_jitter < 0) throw ConfigError("data.center_jitter must be >= 0");
    for (int a = 0; a < 3; ++a) {
      if (extent[a] == 0) throw ConfigError("data.extent must be positive");
      if (outer_radius_max + center_jitter > 0.5 * static_cast<double>(extent[a])) {
        throw ConfigError("data: outer radius " + std::to_string(outer_radius_max) + " plus jitter " +
                          std::to_string(center_jitter) + " exceeds half the extent " + std::to_string(extent[a]));
      }
    }
  }
};

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};

  bool contains(double z, double y, double x) const {
    const double dz = (z - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dx = (x - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }

  double volume() const { return 4.0 / 3.0 * std::numbers::pi * radii[0] * radii[1] * radii[2]; }
};

struct Phantom {
  Shape volume_shape;  // [C, D, H, W]
  std::vector<float> volume;
  LabelVolume labels;  // [D, H, W]
  std::vector<Ellipsoid> shells;  // shells[k-1] bounds class k
};

// Mean intensity of class k in channel c. Channel 0 is graded with the class
// index; every further channel flags one foreground class and those nested in it.
inline double class_intensity(std::size_t channel, std::size_t k, std::size_t classes) {
  if (channel == 0) return static_cast<double>(k) / static_cast<double>(classes - 1);
  const std::size_t threshold = 1 + (channel - 1) % (classes - 1);
  return k >= threshold ? 1.0 : 0.0;
}

inline Phantom generate_synthetic(const SyntheticDataSpec& spec, std::uint64_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const auto [D, H, W] = spec.extent;
  const std::size_t V = D * H * W;
  const std::size_t fg = spec.num_classes - 1;

  Phantom ph;
  for (int attempt = 0; attempt < 64; ++attempt) {
    ph.shells.clear();
    Ellipsoid outer;
    for (int a = 0; a < 3; ++a) {
      outer.center[a] = 0.5 * static_cast<double>(spec.extent[a]) + uniform(-spec.center_jitter, spec.center_jitter);
      outer.radii[a] = uniform(spec.outer_radius_min, spec.outer_radius_max);
    }
    ph.shells.push_back(outer);
    for (std::size_t k = 1; k < fg; ++k) {
      const Ellipsoid& parent = ph.shells.back();
      const double s = uniform(spec.inner_scale_min, spec.inner_scale_max);
      // A shift of at most (1-s) in parent-normalized units keeps the child inside.
      std::array<double, 3> dir{};
      double norm = 0;
      for (auto& d : dir) {
        d = uniform(-1.0, 1.0);
        norm += d * d;
      }
      norm = std::sqrt(norm) + 1e-12;
      const double reach = 0.9 * (1.0 - s) * unit(rng);
      Ellipsoid child;
      for (int a = 0; a < 3; ++a) {
        child.radii[a] = s * parent.radii[a];
        child.center[a] = parent.center[a] + reach * dir[a] / norm * parent.radii[a];
      }
      ph.shells.push_back(child);
    }

    ph.labels.shape = {D, H, W};
    ph.labels.data.assign(V, 0);
    std::vector<std::size_t> counts(spec.num_classes, 0);
    std::size_t i = 0;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x, ++i) {
          const double cz = static_cast<double>(z) + 0.5, cy = static_cast<double>(y) + 0.5,
                       cx = static_cast<double>(x) + 0.5;
          std::uint8_t label = 0;
          while (label < fg && ph.shells[label].contains(cz, cy, cx)) ++label;
          ph.labels.data[i] = label;
          ++counts[label];
        }
    bool all_present = true;
    for (std::size_t k = 0; k < spec.num_classes; ++k) all_present = all_present && counts[k] > 0;
    if (all_present) break;
    if (attempt == 63) throw ConfigError("data: could not place every class inside the volume");
  }

  ph.volume_shape = {spec.channels, D, H, W};
  ph.volume.resize(spec.channels * V);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < spec.channels; ++c)
    for (std::size_t v = 0; v < V; ++v) {
      double value = class_intensity(c, ph.labels.data[v], spec.num_classes);
      if (spec.noise_sigma > 0) value += spec.noise_sigma * noise(rng);
      ph.volume[c * V + v] = static_cast<float>(value);
    }
  return ph;
}

// Stacks phantoms into a batch tensor [B,C,D,H,W] and labels [B,D,H,W].
template <typename T>
std::pair<Tensor<T>, LabelVolume> make_batch(const std::vector<const Phantom*>& items) {
  if (items.empty()) throw ArgumentError("make_batch: empty batch");
  const Shape& vs = items[0]->volume_shape;
  Shape shape{items.size()};
  shape.insert(shape.end(), vs.begin(), vs.end());
  std::vector<T> data;
  data.reserve(numel(shape));
  LabelVolume labels;
  labels.shape = {items.size(), vs[1], vs[2], vs[3]};
  for (const Phantom* p : items) {
    if (p->volume_shape != vs) throw DimensionError("make_batch: phantoms differ in shape");
    for (float v : p->volume) data.push_back(static_cast<T>(v));
    labels.data.insert(labels.data.end(), p->labels.data.begin(), p->labels.data.end());
  }
  return {Tensor<T>::from(std::move(shape), std::move(data)), std::move(labels)};
}

}  // namespace hyseg
