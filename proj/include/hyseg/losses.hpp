#pragma once

// Segmentation losses, overlap metrics, AdamW and the warmup-cosine schedule.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "hyseg/module.hpp"
#include "hyseg/ops.hpp"

namespace hyseg {

// Integer label volume [B, D, H, W] (or [D, H, W] for one sample).
struct LabelVolume {
  Shape shape;
  std::vector<std::uint8_t> data;
};

namespace detail {

inline void check_labels(const Shape& logit_shape, const LabelVolume& labels) {
  if (logit_shape.size() != 5) throw DimensionError("logits must be [B,K,D,H,W], got " + to_string(logit_shape));
  const Shape expect{logit_shape[0], logit_shape[2], logit_shape[3], logit_shape[4]};
  if (labels.shape != expect) {
    throw DimensionError("labels " + to_string(labels.shape) + " do not match logits " + to_string(logit_shape));
  }
  const std::size_t K = logit_shape[1];
  for (std::uint8_t v : labels.data) {
    if (v >= K) throw DataError("label " + std::to_string(v) + " outside [0," + std::to_string(K) + ")");
  }
}

}  // namespace detail

template <typename T>
Tensor<T> one_hot(const LabelVolume& labels, std::size_t classes) {
  const Shape& s = labels.shape;
  const std::size_t B = s[0], V = labels.data.size() / B;
  std::vector<T> out(B * classes * V, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t k = labels.data[b * V + v];
      if (k >= classes) throw DataError("label " + std::to_string(k) + " outside [0," + std::to_string(classes) + ")");
      out[(b * classes + k) * V + v] = T(1);
    }
  return Tensor<T>::from({B, classes, s[1], s[2], s[3]}, std::move(out));
}

namespace detail {

// [B,K,...] -> per-class sums [K].
template <typename T>
Tensor<T> class_sums(const Tensor<T>& x) {
  const Shape& s = x.shape();
  auto moved = permute(x, {1, 0, 2, 3, 4});
  return sum_last(reshape(moved, {s[1], x.numel() / s[1]}));
}

}  // namespace detail

// Mean voxel cross-entropy of logits [B,K,D,H,W] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelVolume& labels) {
  detail::check_labels(logits.shape(), labels);
  const std::size_t K = logits.shape()[1];
  auto target = one_hot<T>(labels, K);
  auto picked = sum(mul(log_softmax(logits, 1), target));
  return scale(picked, T(-1) / static_cast<T>(labels.data.size()));
}

// 1 - mean_k (2 sum p_k t_k + eps) / (sum p_k + sum t_k + eps), p = softmax over classes.
// Sums run over batch and voxels.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const LabelVolume& labels, T smooth = T(1e-5)) {
  detail::check_labels(logits.shape(), labels);
  const std::size_t K = logits.shape()[1];
  auto probs = softmax(logits, 1);
  auto target = one_hot<T>(labels, K);
  auto inter = detail::class_sums(mul(probs, target));
  auto psum = detail::class_sums(probs);
  auto tsum = detail::class_sums(target);
  auto num = add_scalar(scale(inter, T(2)), smooth);
  auto den = add_scalar(add(psum, tsum), smooth);
  return add_scalar(neg(mean(div(num, den))), T(1));
}

// Nearest-neighbour label downsampling to a coarser grid.
inline LabelVolume downsample_labels(const LabelVolume& labels, const std::array<std::size_t, 3>& grid) {
  const Shape& s = labels.shape;
  LabelVolume out;
  out.shape = {s[0], grid[0], grid[1], grid[2]};
  out.data.resize(numel(out.shape));
  std::size_t o = 0;
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t z = 0; z < grid[0]; ++z)
      for (std::size_t y = 0; y < grid[1]; ++y)
        for (std::size_t x = 0; x < grid[2]; ++x) {
          const std::size_t sz = z * s[1] / grid[0], sy = y * s[2] / grid[1], sx = x * s[3] / grid[2];
          out.data[o++] = labels.data[((b * s[1] + sz) * s[2] + sy) * s[3] + sx];
        }
  return out;
}

struct LossWeights {
  double dice = 1.0;
  double ce = 1.0;
};

// lambda_d * dice + lambda_c * CE. A zero weight drops the term entirely.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelVolume& labels, const LossWeights& w) {
  if (w.dice < 0 || w.ce < 0 || (w.dice == 0 && w.ce == 0)) {
    throw ConfigError("loss weights must be >= 0 and not both zero");
  }
  Tensor<T> total;
  if (w.dice != 0) total = scale(dice_loss(logits, labels), static_cast<T>(w.dice));
  if (w.ce != 0) {
    auto ce = scale(cross_entropy(logits, labels), static_cast<T>(w.ce));
    total = total.defined() ? add(total, ce) : ce;
  }
  return total;
}

// Main loss on full-resolution logits plus weighted auxiliary terms against
// nearest-neighbour downsampled targets.
template <typename T>
Tensor<T> deep_supervised_loss(const Tensor<T>& full_logits, const std::vector<Tensor<T>>& aux,
                               const std::vector<double>& aux_weights, const LabelVolume& labels, const LossWeights& w) {
  auto total = combined_loss(full_logits, labels, w);
  for (std::size_t i = 0; i < aux.size(); ++i) {
    const Shape& s = aux[i].shape();
    auto target = downsample_labels(labels, {s[2], s[3], s[4]});
    total = add(total, scale(combined_loss(aux[i], target, w), static_cast<T>(aux_weights.at(i))));
  }
  return total;
}

// Hard Dice of class k between two label arrays; 1 when both are empty.
inline double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target,
                         std::uint8_t k) {
  if (pred.size() != target.size()) throw DimensionError("dice_score: label arrays differ in size");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == k, t = target[i] == k;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

// Argmax over the class axis of [B,K,D,H,W] -> labels [B,D,H,W].
template <typename T>
LabelVolume argmax_labels(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  const std::size_t B = s[0], K = s[1], V = s[2] * s[3] * s[4];
  LabelVolume out{{B, s[2], s[3], s[4]}, std::vector<std::uint8_t>(B * V)};
  const auto& v = logits.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < V; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (v[(b * K + k) * V + i] > v[(b * K + best) * V + i]) best = k;
      out.data[b * V + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay: theta -= lr*wd*theta, then the
// bias-corrected adaptive step.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  void step(const ParamList<T>& params, double lr) {
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p.numel(), T(0));
        v_.emplace_back(p.numel(), T(0));
      }
    }
    if (m_.size() != params.size()) throw ArgumentError("AdamW: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, p] = params[i];
      if (!p.has_grad()) continue;
      for (T g : p.node().grad) {
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + name);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> p = params[i].second;
      if (!p.has_grad()) continue;
      const auto& g = p.node().grad;
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj);
        v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj);
        double wj = w[j];
        wj -= lr * cfg_.weight_decay * wj;
        const double mhat = m[j] / bc1, vhat = v[j] / bc2;
        wj -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

  // Moment buffers, parallel to the parameter list.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct ScheduleConfig {
  double base_lr = 3e-4;
  double min_lr = 1e-6;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

// Linear warmup from min_lr to base_lr, then cosine annealing to min_lr.
inline double lr_at(std::size_t step, const ScheduleConfig& c) {
  if (c.warmup_steps >= c.total_steps) throw ConfigError("warmup_steps must be < total_steps");
  if (step > c.total_steps) {
    throw ArgumentError("step " + std::to_string(step) + " outside [0," + std::to_string(c.total_steps) + "]");
  }
  // Blended as base*w + min*(1-w) so both endpoints come out exact.
  double w;
  if (step < c.warmup_steps) {
    w = static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  } else {
    const double progress =
        static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
    w = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return c.base_lr * w + c.min_lr * (1.0 - w);
}

}  // namespace hyseg
