#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hyseg/ops.hpp"
#include "hyseg/tensor.hpp"

namespace hyseg {

// Named parameters in declaration order. Checkpoints and the optimizer both
// iterate this order.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

// Deterministic initializer stream shared by every module of a model.
class InitRng {
 public:
  explicit InitRng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double bound) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when the layer has no bias

  static LinearParams init(InitRng& rng, std::size_t in, std::size_t out, bool with_bias = true) {
    LinearParams p;
    p.weight = rng.uniform_tensor<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static NormParams init(std::size_t c) { return {Tensor<T>::full({c}, T(1), true), Tensor<T>::zeros({c}, true)}; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// Expand-contract feed-forward with GELU.
template <typename T>
struct MlpParams {
  LinearParams<T> fc1;
  LinearParams<T> fc2;

  static MlpParams init(InitRng& rng, std::size_t c, std::size_t ratio) {
    return {LinearParams<T>::init(rng, c, c * ratio), LinearParams<T>::init(rng, c * ratio, c)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

template <typename T>
Tensor<T> apply(const LinearParams<T>& p, const Tensor<T>& x) {
  return linear(x, p.weight, p.bias);
}

template <typename T>
Tensor<T> apply(const NormParams<T>& p, const Tensor<T>& x) {
  return layer_norm(x, p.gamma, p.beta);
}

template <typename T>
Tensor<T> apply(const MlpParams<T>& p, const Tensor<T>& x) {
  return apply(p.fc2, gelu(apply(p.fc1, x)));
}

}  // namespace hyseg
