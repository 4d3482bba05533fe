#pragma once

// Central finite-difference gradient checks for every differentiable op, both
// block types, the full network and the losses. Each check reduces the op's
// output with a fixed random weighting (so every output element matters),
// back-propagates once and compares against (f(x+h) - f(x-h)) / 2h on every
// input coordinate, or on a random sample of them for large inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hyseg/attention.hpp"
#include "hyseg/embedding.hpp"
#include "hyseg/losses.hpp"
#include "hyseg/network.hpp"
#include "hyseg/ops.hpp"
#include "hyseg/ssm.hpp"

namespace hyseg {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords_per_input = 48;
  std::uint64_t seed = 7;
  std::string filter;  // module or op name; empty runs everything
  bool inject_fault = false;
};

struct GradCheckResult {
  std::string module;
  std::string op;
  std::string shape;
  double max_rel_err = 0;
  std::size_t coords = 0;
  bool passed = false;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

inline GradCheckResult check_gradient(const std::string& module, const std::string& op, const std::string& shape,
                                      const std::vector<Tensor<double>>& inputs, const GradFn& f,
                                      std::mt19937_64& rng, const GradCheckOptions& opt,
                                      std::size_t max_coords = 0) {
  if (max_coords == 0) max_coords = opt.max_coords_per_input;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto out = f(inputs);
  std::vector<double> weights(out.numel());
  for (auto& w : weights) w = unit(rng);
  auto project = [&](const Tensor<double>& y) {
    double s = 0;
    const auto& v = y.values();
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * weights[i];
    return s;
  };

  for (auto t : inputs) t.zero_grad();
  auto loss = sum(mul(out, Tensor<double>::from(out.shape(), weights)));
  loss.backward();

  GradCheckResult r{module, op, shape, 0.0, 0, true};
  NoGradGuard no_grad;
  for (auto t : inputs) {
    const auto analytic = t.grad();
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    auto data = t.mutable_data();
    for (std::size_t c : coords) {
      const double saved = data[c];
      data[c] = saved + opt.step;
      const double up = project(f(inputs));
      data[c] = saved - opt.step;
      const double down = project(f(inputs));
      data[c] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      r.max_rel_err = std::max(r.max_rel_err, grad_rel_error(analytic[c], numeric));
      ++r.coords;
    }
  }
  r.passed = r.max_rel_err <= opt.tolerance;
  return r;
}

namespace detail {

inline Tensor<double> random_leaf(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

// Moves every parameter off its structured init (unit gammas, zero biases) so
// no gradient path is trivially zero.
inline void jitter(const ParamList<double>& params, std::mt19937_64& rng, double amount = 0.2) {
  std::uniform_real_distribution<double> d(-amount, amount);
  for (const auto& [name, p] : params) {
    Tensor<double> q = p;
    for (auto& x : q.mutable_data()) x += d(rng);
  }
}

inline std::vector<Tensor<double>> tensors_of(const ParamList<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

inline std::string shape_list(std::initializer_list<Shape> shapes) {
  std::string s;
  for (const auto& sh : shapes) s += (s.empty() ? "" : " ") + to_string(sh);
  return s;
}

// y = x^2 whose backward deliberately drops the factor 2.
inline Tensor<double> faulty_square(const Tensor<double>& x) {
  std::vector<double> v(x.values());
  for (auto& e : v) e *= e;
  return make_result(x.shape(), std::move(v), {&x}, "faulty_square", [](Node<double>& self) {
    Node<double>* px = grad_parent(self, 0);
    if (!px) return;
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * px->value[i];
  });
}

}  // namespace detail

struct GradCase {
  std::string module;
  std::string op;
  std::function<GradCheckResult(std::mt19937_64&, const GradCheckOptions&)> run;
};

inline std::vector<GradCase> grad_cases(bool inject_fault) {
  using T = Tensor<double>;
  using detail::random_leaf;
  using detail::shape_list;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string module, std::string op, auto fn) { cases.push_back({module, op, fn}); };

  // Elementwise unary ops: three shapes each.
  auto unary = [&](const std::string& op, std::function<T(const T&)> fn, double lo, double hi) {
    for (const Shape& s : {Shape{7}, Shape{3, 4}, Shape{2, 3, 5}}) {
      add_case("tensor", op, [=](std::mt19937_64& rng, const GradCheckOptions& o) {
        auto x = random_leaf(rng, s, lo, hi);
        return check_gradient("tensor", op, to_string(s), {x}, [&](const std::vector<T>& in) { return fn(in[0]); },
                              rng, o);
      });
    }
  };
  unary("neg", [](const T& x) { return neg(x); }, -1, 1);
  unary("scale", [](const T& x) { return scale(x, 1.7); }, -1, 1);
  unary("add_scalar", [](const T& x) { return add_scalar(x, -0.3); }, -1, 1);
  unary("exp", [](const T& x) { return exp(x); }, -1, 1);
  unary("log", [](const T& x) { return log(x); }, 0.5, 2);
  unary("sigmoid", [](const T& x) { return sigmoid(x); }, -3, 3);
  unary("silu", [](const T& x) { return silu(x); }, -3, 3);
  unary("gelu", [](const T& x) { return gelu(x); }, -3, 3);
  unary("softplus", [](const T& x) { return softplus(x); }, -3, 3);
  unary("sum", [](const T& x) { return sum(x); }, -1, 1);
  unary("mean", [](const T& x) { return mean(x); }, -1, 1);
  unary("sum_last", [](const T& x) { return sum_last(x); }, -1, 1);

  // Binary ops with equal, suffix-broadcast and scalar-broadcast operands.
  auto binary = [&](const std::string& op, std::function<T(const T&, const T&)> fn, double lo, double hi) {
    const std::vector<std::pair<Shape, Shape>> shapes{{{3, 4}, {3, 4}}, {{2, 3, 4}, {4}}, {{5}, {1}}};
    for (const auto& [sa, sb] : shapes) {
      add_case("tensor", op, [=](std::mt19937_64& rng, const GradCheckOptions& o) {
        auto a = random_leaf(rng, sa, -1, 1), b = random_leaf(rng, sb, lo, hi);
        return check_gradient("tensor", op, shape_list({sa, sb}), {a, b},
                              [&](const std::vector<T>& in) { return fn(in[0], in[1]); }, rng, o);
      });
    }
  };
  binary("add", [](const T& a, const T& b) { return add(a, b); }, -1, 1);
  binary("sub", [](const T& a, const T& b) { return sub(a, b); }, -1, 1);
  binary("mul", [](const T& a, const T& b) { return mul(a, b); }, -1, 1);
  binary("div", [](const T& a, const T& b) { return div(a, b); }, 0.5, 2);

  for (const auto& [s, target] : std::vector<std::pair<Shape, Shape>>{{{12}, {3, 4}}, {{2, 3, 4}, {6, 4}}, {{2, 2, 2}, {8}}}) {
    add_case("tensor", "reshape", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s);
      return check_gradient("tensor", "reshape", to_string(s), {x},
                            [&](const std::vector<T>& in) { return scale(reshape(in[0], target), 1.0); }, rng, o);
    });
  }
  for (const auto& [s, perm] : std::vector<std::pair<Shape, std::vector<std::size_t>>>{
           {{3, 4}, {1, 0}}, {{2, 3, 4}, {2, 0, 1}}, {{2, 1, 3, 2}, {0, 3, 1, 2}}}) {
    add_case("tensor", "permute", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s);
      return check_gradient("tensor", "permute", to_string(s), {x},
                            [&](const std::vector<T>& in) { return permute(in[0], perm); }, rng, o);
    });
  }
  for (const auto& [sa, sb, axis] : std::vector<std::tuple<Shape, Shape, std::size_t>>{
           {{2, 3}, {2, 2}, 1}, {{1, 3}, {2, 3}, 0}, {{2, 2, 3}, {2, 1, 3}, 1}}) {
    add_case("tensor", "concat", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto a = random_leaf(rng, sa), b = random_leaf(rng, sb);
      return check_gradient("tensor", "concat", shape_list({sa, sb}), {a, b},
                            [&](const std::vector<T>& in) { return concat(in, axis); }, rng, o);
    });
  }
  for (const auto& [s, axis, start, len] : std::vector<std::tuple<Shape, std::size_t, std::size_t, std::size_t>>{
           {{6}, 0, 1, 3}, {{3, 5}, 1, 2, 2}, {{2, 4, 3}, 1, 0, 2}}) {
    add_case("tensor", "slice", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s);
      return check_gradient("tensor", "slice", to_string(s), {x},
                            [&](const std::vector<T>& in) { return slice(in[0], axis, start, len); }, rng, o);
    });
  }
  for (const auto& [s, axis] : std::vector<std::pair<Shape, std::size_t>>{{{5}, 0}, {{3, 4}, 1}, {{2, 3, 4}, 1}}) {
    add_case("tensor", "softmax", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2);
      return check_gradient("tensor", "softmax", to_string(s), {x},
                            [&](const std::vector<T>& in) { return softmax(in[0], axis); }, rng, o);
    });
    add_case("tensor", "log_softmax", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2);
      return check_gradient("tensor", "log_softmax", to_string(s), {x},
                            [&](const std::vector<T>& in) { return log_softmax(in[0], axis); }, rng, o);
    });
  }
  for (const Shape& s : {Shape{2, 5}, Shape{2, 3, 6}, Shape{1, 4}}) {
    add_case("tensor", "layer_norm", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2), g = random_leaf(rng, {s.back()}, 0.5, 1.5), b = random_leaf(rng, {s.back()});
      return check_gradient("tensor", "layer_norm", to_string(s), {x, g, b},
                            [&](const std::vector<T>& in) { return layer_norm(in[0], in[1], in[2]); }, rng, o);
    });
  }
  for (const auto& [sa, sb] : std::vector<std::pair<Shape, Shape>>{
           {{3, 4}, {4, 2}}, {{2, 3, 4}, {2, 4, 5}}, {{2, 2, 3, 2}, {2, 3}}}) {
    add_case("tensor", "matmul", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto a = random_leaf(rng, sa), b = random_leaf(rng, sb);
      return check_gradient("tensor", "matmul", shape_list({sa, sb}), {a, b},
                            [&](const std::vector<T>& in) { return matmul(in[0], in[1]); }, rng, o);
    });
  }
  for (const auto& [sx, out] : std::vector<std::pair<Shape, std::size_t>>{{{4, 3}, 5}, {{2, 3, 4}, 2}, {{1, 1, 6}, 6}}) {
    add_case("tensor", "linear", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, sx), w = random_leaf(rng, {sx.back(), out}), b = random_leaf(rng, {out});
      return check_gradient("tensor", "linear", shape_list({sx, {sx.back(), out}}), {x, w, b},
                            [&](const std::vector<T>& in) { return linear(in[0], in[1], in[2]); }, rng, o);
    });
  }
  struct ConvShape {
    Shape x;
    std::size_t out;
    Triple k, s, p;
  };
  for (const auto& cs : std::vector<ConvShape>{{{1, 1, 4, 4, 4}, 2, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
                                               {{2, 2, 5, 4, 6}, 3, {3, 2, 3}, {2, 2, 2}, {1, 0, 1}},
                                               {{1, 3, 8, 8, 8}, 2, {7, 7, 7}, {4, 4, 4}, {3, 3, 3}}}) {
    add_case("tensor", "conv3d", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      const Shape ws{cs.out, cs.x[1], cs.k[0], cs.k[1], cs.k[2]};
      auto x = random_leaf(rng, cs.x), w = random_leaf(rng, ws, -0.5, 0.5), b = random_leaf(rng, {cs.out});
      return check_gradient("tensor", "conv3d", shape_list({cs.x, ws}), {x, w, b},
                            [&](const std::vector<T>& in) { return conv3d(in[0], in[1], in[2], cs.s, cs.p); }, rng,
                            o);
    });
  }
  for (const auto& [s, f] : std::vector<std::pair<Shape, Triple>>{
           {{1, 1, 2, 2, 2}, {2, 2, 2}}, {{1, 2, 3, 2, 1}, {2, 3, 4}}, {{2, 1, 1, 2, 2}, {4, 1, 2}}}) {
    add_case("tensor", "upsample_trilinear", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s);
      return check_gradient("tensor", "upsample_trilinear", to_string(s), {x},
                            [&](const std::vector<T>& in) { return upsample_trilinear(in[0], f); }, rng, o);
    });
  }
  for (const Shape& s : {Shape{1, 2, 2, 2, 2}, Shape{2, 3, 1, 2, 3}, Shape{1, 1, 3, 1, 2}}) {
    add_case("tensor", "volume_to_tokens", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s);
      return check_gradient("tensor", "volume_to_tokens", to_string(s), {x},
                            [&](const std::vector<T>& in) { return volume_to_tokens(in[0]); }, rng, o);
    });
    add_case("tensor", "tokens_to_volume", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      const Shape ts{s[0], s[2] * s[3] * s[4], s[1]};
      auto x = random_leaf(rng, ts);
      return check_gradient("tensor", "tokens_to_volume", to_string(ts), {x},
                            [&](const std::vector<T>& in) { return tokens_to_volume(in[0], {s[2], s[3], s[4]}); },
                            rng, o);
    });
  }

  // Embedding.
  for (const auto& [x_shape, pc] : std::vector<std::pair<Shape, PatchEmbedConfig>>{
           {{1, 1, 8, 8, 8}, {1, 6, {7, 7, 7}, {4, 4, 4}, {3, 3, 3}}},
           {{2, 2, 4, 4, 4}, {2, 4, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}},
           {{1, 3, 4, 6, 2}, {3, 5, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}}}) {
    add_case("embedding", "patch_embed", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      auto p = PatchEmbedParams<double>::init(init, pc);
      ParamList<double> params;
      p.collect(params, "embed");
      detail::jitter(params, rng);
      auto x = random_leaf(rng, x_shape);
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("embedding", "patch_embed", to_string(x_shape), inputs,
                            [&](const std::vector<T>&) { return patch_embed(x, p).tokens; }, rng, o);
    });
  }
  for (const auto& [grid, d, heads] : std::vector<std::tuple<Triple, std::size_t, std::size_t>>{
           {{2, 2, 2}, 6, 1}, {{1, 3, 2}, 12, 2}, {{3, 1, 1}, 18, 1}}) {
    add_case("embedding", "rope3d", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      const Shape s{2, heads, grid[0] * grid[1] * grid[2], d};
      auto x = random_leaf(rng, s);
      const RotaryFrequencies freqs(d, 10000.0);
      return check_gradient("embedding", "rope3d", to_string(s), {x},
                            [&](const std::vector<T>& in) { return apply_rope3d(in[0], grid, freqs); }, rng, o);
    });
  }

  // State-space ops.
  for (const auto& [B, L, c, n] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>{
           {1, 5, 2, 3}, {2, 4, 3, 2}, {1, 9, 1, 4}}) {
    add_case("ssm", "selective_scan", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, {B, L, c}), delta = random_leaf(rng, {B, L, c}, 0.1, 1.0);
      auto A = random_leaf(rng, {c, n}, -2.0, -0.1), bs = random_leaf(rng, {B, L, n}), cs = random_leaf(rng, {B, L, n});
      auto d = random_leaf(rng, {c});
      return check_gradient("ssm", "selective_scan", shape_list({{B, L, c}, {c, n}}), {x, delta, A, bs, cs, d},
                            [&](const std::vector<T>& in) {
                              return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]);
                            },
                            rng, o);
    });
  }
  for (const auto& [B, L, E, k] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>{
           {1, 6, 2, 4}, {2, 3, 3, 4}, {1, 5, 4, 2}}) {
    add_case("ssm", "causal_conv1d", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, {B, L, E}), w = random_leaf(rng, {E, k}), b = random_leaf(rng, {E});
      return check_gradient("ssm", "causal_conv1d", shape_list({{B, L, E}, {E, k}}), {x, w, b},
                            [&](const std::vector<T>& in) { return causal_depthwise_conv1d(in[0], in[1], in[2]); },
                            rng, o);
    });
  }
  const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> seq_shapes{
      {1, 5, 4, 4}, {2, 3, 6, 2}, {1, 8, 3, 3}};
  for (const auto& [B, L, C, n] : seq_shapes) {
    add_case("ssm", "mamba_layer", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      SsmConfig cfg;
      cfg.state_dim = n;
      auto p = MambaLayerParams<double>::init(init, C, cfg);
      ParamList<double> params;
      p.collect(params, "mamba");
      detail::jitter(params, rng, 0.1);
      auto x = random_leaf(rng, {B, L, C});
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("ssm", "mamba_layer", to_string({B, L, C}), inputs,
                            [&](const std::vector<T>&) { return mamba_layer(x, p); }, rng, o, 24);
    });
    add_case("ssm", "mamba_block", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      SsmConfig cfg;
      cfg.state_dim = n;
      auto p = MambaBlockParams<double>::init(init, C, cfg, 2);
      ParamList<double> params;
      p.collect(params, "block");
      detail::jitter(params, rng, 0.1);
      auto x = random_leaf(rng, {B, L, C});
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("ssm", "mamba_block", to_string({B, L, C}), inputs,
                            [&](const std::vector<T>&) { return mamba_block_tokens(x, p); }, rng, o, 24);
    });
  }

  // Attention.
  struct AttnShape {
    std::size_t B;
    Triple grid;
    std::size_t C, heads, reduction;
    bool rope;
  };
  const std::vector<AttnShape> attn_shapes{
      {1, {1, 2, 2}, 6, 1, 1, true}, {2, {2, 2, 1}, 12, 2, 2, true}, {1, {2, 1, 3}, 6, 1, 3, false}};
  for (const auto& a : attn_shapes) {
    const std::size_t N = a.grid[0] * a.grid[1] * a.grid[2];
    const std::string desc = to_string({a.B, N, a.C}) + " h=" + std::to_string(a.heads) + " r=" +
                             std::to_string(a.reduction) + (a.rope ? " rope" : "");
    add_case("attention", "reduce_keys", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      const std::size_t r = std::max<std::size_t>(a.reduction, 2);
      auto proj = LinearParams<double>::init(init, a.C * r, a.C);
      detail::jitter({{"w", proj.weight}, {"b", proj.bias}}, rng);
      auto k = random_leaf(rng, {a.B, N - N % r, a.C});
      return check_gradient("attention", "reduce_keys", to_string(k.shape()), {k, proj.weight, proj.bias},
                            [&](const std::vector<T>& in) { return reduce_keys(in[0], r, proj); }, rng, o);
    });
    add_case("attention", "multi_head_attention", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      auto p = AttentionParams<double>::init(init, a.C, a.heads, a.reduction, a.rope);
      ParamList<double> params;
      p.collect(params, "attn");
      detail::jitter(params, rng);
      RopeContext rope;
      if (a.rope) rope = RopeContext::for_grid(a.grid, a.C / a.heads);
      auto x = random_leaf(rng, {a.B, N, a.C});
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("attention", "multi_head_attention", desc, inputs,
                            [&](const std::vector<T>&) { return multi_head_attention(x, p, rope); }, rng, o, 24);
    });
    add_case("attention", "transformer_block", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      InitRng init(rng());
      auto p = TransformerBlockParams<double>::init(init, a.C, a.heads, a.reduction, 2, a.rope);
      ParamList<double> params;
      p.collect(params, "block");
      detail::jitter(params, rng);
      RopeContext rope;
      if (a.rope) rope = RopeContext::for_grid(a.grid, a.C / a.heads);
      auto x = random_leaf(rng, {a.B, N, a.C});
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("attention", "transformer_block", desc, inputs,
                            [&](const std::vector<T>&) { return transformer_block_tokens(x, p, rope); }, rng, o, 24);
    });
  }

  // Whole network on a tiny config.
  auto tiny = [](std::size_t in_channels, std::size_t classes, bool ds) {
    ModelConfig c = ModelConfig::defaults();
    const std::array<std::size_t, 4> dims{6, 6, 12, 12}, heads{1, 1, 2, 2};
    for (std::size_t i = 0; i < 4; ++i) {
      c.stages[i].embed_dim = dims[i];
      c.stages[i].heads = heads[i];
      c.stages[i].depth = 1;
    }
    c.in_channels = in_channels;
    c.num_classes = classes;
    c.decoder_dim = 6;
    c.mlp_ratio = 2;
    c.ssm.state_dim = 4;
    c.deep_supervision = ds;
    return c;
  };
  struct NetShape {
    Shape x;
    std::size_t classes;
    bool ds;
  };
  for (const auto& ns : std::vector<NetShape>{{{1, 1, 16, 16, 16}, 2, false},
                                              {{2, 2, 8, 16, 16}, 3, true},
                                              {{1, 1, 16, 8, 8}, 4, false}}) {
    add_case("network", "model_forward", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      Model<double> model(tiny(ns.x[1], ns.classes, ns.ds), rng());
      const auto params = model.parameters();
      detail::jitter(params, rng, 0.1);
      auto x = random_leaf(rng, ns.x);
      auto inputs = detail::tensors_of(params);
      inputs.push_back(x);
      return check_gradient("network", "model_forward", to_string(ns.x) + (ns.ds ? " ds" : ""), inputs,
                            [&](const std::vector<T>&) {
                              auto out = model.forward(x);
                              std::vector<T> parts{reshape(out.full_logits, {out.full_logits.numel()})};
                              for (const auto& a : out.aux) parts.push_back(reshape(a, {a.numel()}));
                              return concat(parts, 0);
                            },
                            rng, o, 3);
    });
  }

  // Losses.
  auto labels_for = [](std::mt19937_64& rng, const Shape& logit_shape) {
    LabelVolume l;
    l.shape = {logit_shape[0], logit_shape[2], logit_shape[3], logit_shape[4]};
    std::uniform_int_distribution<int> cls(0, static_cast<int>(logit_shape[1]) - 1);
    l.data.resize(numel(l.shape));
    for (auto& v : l.data) v = static_cast<std::uint8_t>(cls(rng));
    return l;
  };
  for (const Shape& s : {Shape{1, 2, 2, 2, 2}, Shape{2, 3, 2, 1, 3}, Shape{1, 4, 3, 3, 1}}) {
    add_case("training", "cross_entropy", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2);
      const auto l = labels_for(rng, s);
      return check_gradient("training", "cross_entropy", to_string(s), {x},
                            [&](const std::vector<T>& in) { return cross_entropy(in[0], l); }, rng, o);
    });
    add_case("training", "dice_loss", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2);
      const auto l = labels_for(rng, s);
      return check_gradient("training", "dice_loss", to_string(s), {x},
                            [&](const std::vector<T>& in) { return dice_loss(in[0], l); }, rng, o);
    });
    add_case("training", "combined_loss", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, s, -2, 2);
      const auto l = labels_for(rng, s);
      return check_gradient("training", "combined_loss", to_string(s), {x},
                            [&](const std::vector<T>& in) { return combined_loss(in[0], l, {0.7, 1.3}); }, rng, o);
    });
  }
  for (const auto& [full, aux] : std::vector<std::pair<Shape, Shape>>{
           {{1, 2, 4, 4, 4}, {1, 2, 2, 2, 2}}, {{2, 3, 2, 4, 2}, {2, 3, 1, 2, 1}}, {{1, 4, 4, 2, 2}, {1, 4, 1, 1, 1}}}) {
    add_case("training", "deep_supervised_loss", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
      auto x = random_leaf(rng, full, -2, 2), a = random_leaf(rng, aux, -2, 2);
      const auto l = labels_for(rng, full);
      return check_gradient("training", "deep_supervised_loss", shape_list({full, aux}), {x, a},
                            [&](const std::vector<T>& in) {
                              return deep_supervised_loss<double>(in[0], {in[1]}, {0.5}, l, {1.0, 1.0});
                            },
                            rng, o);
    });
  }

  if (inject_fault) {
    for (const Shape& s : {Shape{4}, Shape{2, 3}, Shape{3, 1, 2}}) {
      add_case("fault", "faulty_square", [=](std::mt19937_64& rng, const GradCheckOptions& o) {
        auto x = random_leaf(rng, s, 0.5, 1.5);
        return check_gradient("fault", "faulty_square", to_string(s), {x},
                              [&](const std::vector<T>& in) { return detail::faulty_square(in[0]); }, rng, o);
      });
    }
  }
  return cases;
}

// Runs every case whose module or op matches the filter (all when empty).
inline std::vector<GradCheckResult> run_grad_suite(const GradCheckOptions& opt) {
  std::vector<GradCheckResult> out;
  std::size_t idx = 0;
  for (const auto& c : grad_cases(opt.inject_fault)) {
    ++idx;
    if (!opt.filter.empty() && c.module != opt.filter && c.op != opt.filter && c.module != "fault") continue;
    std::mt19937_64 rng(opt.seed * 1000003ull + idx);
    out.push_back(c.run(rng, opt));
  }
  return out;
}

inline bool all_passed(const std::vector<GradCheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const GradCheckResult& r) { return r.passed; });
}

}  // namespace hyseg
