#pragma once

// Selective state-space scan, the Mamba layer built on it, and the gated
// 3D Mamba mixer block used in the high-resolution encoder stages.

#include <cmath>
#include <string>
#include <vector>

#include "hyseg/module.hpp"
#include "hyseg/ops.hpp"

namespace hyseg {

// Sequential selective scan with diagonal A.
//
//   h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
//   y_t = <C_t, h_t> + D * x_t
//
// Shapes: x, delta [B,L,c]; A [c,n]; b_sel, c_sel [B,L,n]; d_skip [c].
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& b_sel,
                         const Tensor<T>& c_sel, const Tensor<T>& d_skip) {
  const Shape& sx = x.shape();
  if (sx.size() != 3) throw DimensionError("selective_scan: x must be [B,L,c], got " + to_string(sx));
  const std::size_t B = sx[0], L = sx[1], c = sx[2];
  if (A.dim() != 2 || A.shape()[0] != c) throw DimensionError("selective_scan: A " + to_string(A.shape()));
  const std::size_t n = A.shape()[1];
  if (delta.shape() != sx || b_sel.shape() != Shape{B, L, n} || c_sel.shape() != Shape{B, L, n} ||
      d_skip.shape() != Shape{c}) {
    throw DimensionError("selective_scan: inconsistent shapes x" + to_string(sx) + " delta" + to_string(delta.shape()) +
                         " B" + to_string(b_sel.shape()) + " C" + to_string(c_sel.shape()) + " D" +
                         to_string(d_skip.shape()));
  }
  const auto& xv = x.values();
  const auto& dv = delta.values();
  const auto& av = A.values();
  const auto& bv = b_sel.values();
  const auto& cv = c_sel.values();
  const auto& sv = d_skip.values();
  for (T v : dv) {
    if (!(v > T(0))) throw NumericError("selective_scan: step size must be positive, got " + std::to_string(v));
  }

  // States h[b][t][ch][s] are kept for the reverse sweep.
  std::vector<T> h(B * L * c * n);
  std::vector<T> y(B * L * c);
  std::vector<T> state(n);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::fill(state.begin(), state.end(), T(0));
      const T* a_row = av.data() + ch * n;
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t bt = b * L + t;
        const T dt = dv[bt * c + ch];
        const T xt = xv[bt * c + ch];
        const T* bt_row = bv.data() + bt * n;
        const T* ct_row = cv.data() + bt * n;
        T acc = T(0);
        T* hs = h.data() + (bt * c + ch) * n;
        for (std::size_t s = 0; s < n; ++s) {
          state[s] = std::exp(dt * a_row[s]) * state[s] + dt * bt_row[s] * xt;
          hs[s] = state[s];
          acc += ct_row[s] * state[s];
        }
        y[bt * c + ch] = acc + sv[ch] * xt;
      }
    }
  }

  return detail::make_result<T>(
      sx, std::move(y), {&x, &delta, &A, &b_sel, &c_sel, &d_skip}, "selective_scan",
      [B, L, c, n, h = std::move(h)](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& dv = self.parents[1]->value;
        const auto& av = self.parents[2]->value;
        const auto& bv = self.parents[3]->value;
        const auto& cv = self.parents[4]->value;
        const auto& sv = self.parents[5]->value;
        const auto& dy = self.grad;
        Node<T>* px = detail::grad_parent(self, 0);
        Node<T>* pd = detail::grad_parent(self, 1);
        Node<T>* pa = detail::grad_parent(self, 2);
        Node<T>* pb = detail::grad_parent(self, 3);
        Node<T>* pc = detail::grad_parent(self, 4);
        Node<T>* ps = detail::grad_parent(self, 5);
        std::vector<T> dx(B * L * c, T(0)), ddelta(B * L * c, T(0)), dA(c * n, T(0)), dB(B * L * n, T(0)),
            dC(B * L * n, T(0)), dD(c, T(0));
        std::vector<T> carry(n);  // dL/dh_t flowing back from t+1
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::fill(carry.begin(), carry.end(), T(0));
            const T* a_row = av.data() + ch * n;
            for (std::size_t t = L; t-- > 0;) {
              const std::size_t bt = b * L + t;
              const std::size_t at = bt * c + ch;
              const T g = dy[at];
              const T dt = dv[at];
              const T xt = xv[at];
              const T* hs = h.data() + at * n;
              const T* hprev = t > 0 ? h.data() + ((bt - 1) * c + ch) * n : nullptr;
              const T* b_row = bv.data() + bt * n;
              const T* c_row = cv.data() + bt * n;
              T gx = g * sv[ch];
              T gdt = T(0);
              dD[ch] += g * xt;
              for (std::size_t s = 0; s < n; ++s) {
                dC[bt * n + s] += g * hs[s];
                const T gh = carry[s] + g * c_row[s];
                const T decay = std::exp(dt * a_row[s]);
                if (hprev) {
                  const T gdecay = gh * hprev[s] * decay;
                  gdt += gdecay * a_row[s];
                  dA[ch * n + s] += gdecay * dt;
                }
                gdt += gh * b_row[s] * xt;
                dB[bt * n + s] += gh * dt * xt;
                gx += gh * dt * b_row[s];
                carry[s] = gh * decay;
              }
              dx[at] += gx;
              ddelta[at] += gdt;
            }
          }
        }
        auto add_into = [](Node<T>* p, const std::vector<T>& src) {
          if (!p) return;
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        };
        add_into(px, dx);
        add_into(pd, ddelta);
        add_into(pa, dA);
        add_into(pb, dB);
        add_into(pc, dC);
        add_into(ps, dD);
      });
}

// Depthwise causal 1-D convolution over the sequence axis.
// x [B,L,E], weight [E,k], bias [E]; y_t = bias + sum_j w[j] * x_{t-k+1+j}.
template <typename T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("causal conv expects [B,L,E], got " + to_string(s));
  const std::size_t B = s[0], L = s[1], E = s[2];
  if (weight.dim() != 2 || weight.shape()[0] != E || bias.shape() != Shape{E}) {
    throw DimensionError("causal conv weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                         " vs channels " + std::to_string(E));
  }
  const std::size_t k = weight.shape()[1];
  const auto& xv = x.values();
  const auto& wv = weight.values();
  const auto& bv = bias.values();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* o = out.data() + (b * L + t) * E;
      for (std::size_t e = 0; e < E; ++e) o[e] = bv[e];
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(t + j) - static_cast<long>(k - 1);
        if (src < 0) continue;
        const T* xi = xv.data() + (b * L + static_cast<std::size_t>(src)) * E;
        for (std::size_t e = 0; e < E; ++e) o[e] += wv[e * k + j] * xi[e];
      }
    }
  return detail::make_result<T>(s, std::move(out), {&x, &weight, &bias}, "causal_conv1d", [B, L, E, k](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const auto& dy = self.grad;
    Node<T>* px = detail::grad_parent(self, 0);
    Node<T>* pw = detail::grad_parent(self, 1);
    Node<T>* pb = detail::grad_parent(self, 2);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const T* g = dy.data() + (b * L + t) * E;
        if (pb) {
          auto& gb = pb->grad_buffer();
          for (std::size_t e = 0; e < E; ++e) gb[e] += g[e];
        }
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(t + j) - static_cast<long>(k - 1);
          if (src < 0) continue;
          const std::size_t row = (b * L + static_cast<std::size_t>(src)) * E;
          if (px) {
            auto& gx = px->grad_buffer();
            for (std::size_t e = 0; e < E; ++e) gx[row + e] += wv[e * k + j] * g[e];
          }
          if (pw) {
            auto& gw = pw->grad_buffer();
            for (std::size_t e = 0; e < E; ++e) gw[e * k + j] += xv[row + e] * g[e];
          }
        }
      }
  });
}

struct SsmConfig {
  std::size_t state_dim = 16;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  double dt_min = 1e-3;
  double dt_max = 1e-1;

  static std::size_t dt_rank(std::size_t channels) { return (channels + 15) / 16; }
};

// Reference Mamba-1 layer parameters.
template <typename T>
struct MambaLayerParams {
  std::size_t channels = 0;
  SsmConfig cfg;
  LinearParams<T> in_proj;   // C -> 2E, no bias
  Tensor<T> conv_weight;     // [E, k]
  Tensor<T> conv_bias;       // [E]
  LinearParams<T> x_proj;    // E -> R + 2n, no bias
  LinearParams<T> dt_proj;   // R -> E
  Tensor<T> A_log;           // [E, n]
  Tensor<T> D;               // [E]
  LinearParams<T> out_proj;  // E -> C, no bias

  std::size_t inner() const { return cfg.expand * channels; }

  static MambaLayerParams init(InitRng& rng, std::size_t channels, const SsmConfig& cfg) {
    MambaLayerParams p;
    p.channels = channels;
    p.cfg = cfg;
    const std::size_t E = cfg.expand * channels, n = cfg.state_dim, R = SsmConfig::dt_rank(channels);
    p.in_proj = LinearParams<T>::init(rng, channels, 2 * E, false);
    p.conv_weight = rng.uniform_tensor<T>({E, cfg.conv_width}, 1.0 / std::sqrt(static_cast<double>(cfg.conv_width)));
    p.conv_bias = Tensor<T>::zeros({E}, true);
    p.x_proj = LinearParams<T>::init(rng, E, R + 2 * n, false);
    p.dt_proj = LinearParams<T>::init(rng, R, E, true);
    // Bias = softplus^-1(dt) with dt ~ U[dt_min, dt_max].
    auto bias = p.dt_proj.bias.mutable_data();
    for (auto& b : bias) {
      const double dt = rng.uniform(cfg.dt_min, cfg.dt_max);
      b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    std::vector<T> a_log(E * n);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t s = 0; s < n; ++s) a_log[e * n + s] = static_cast<T>(std::log(static_cast<double>(s + 1)));
    p.A_log = Tensor<T>::from({E, n}, std::move(a_log), true);
    p.D = Tensor<T>::full({E}, T(1), true);
    p.out_proj = LinearParams<T>::init(rng, E, channels, false);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    in_proj.collect(out, prefix + ".in_proj");
    out.emplace_back(prefix + ".conv1d.weight", conv_weight);
    out.emplace_back(prefix + ".conv1d.bias", conv_bias);
    x_proj.collect(out, prefix + ".x_proj");
    dt_proj.collect(out, prefix + ".dt_proj");
    out.emplace_back(prefix + ".A_log", A_log);
    out.emplace_back(prefix + ".D", D);
    out_proj.collect(out, prefix + ".out_proj");
  }
};

// x [B,L,C] -> [B,L,C]: in_proj -> (x-branch: causal conv, SiLU, scan) * SiLU(z) -> out_proj.
template <typename T>
Tensor<T> mamba_layer(const Tensor<T>& x, const MambaLayerParams<T>& p) {
  if (x.dim() != 3 || x.shape()[2] != p.channels) {
    throw ConfigError("mamba layer built for " + std::to_string(p.channels) + " channels, got input " +
                      to_string(x.shape()));
  }
  const std::size_t E = p.inner(), n = p.cfg.state_dim, R = SsmConfig::dt_rank(p.channels);
  auto xz = apply(p.in_proj, x);
  auto xb = slice(xz, 2, 0, E);
  auto z = slice(xz, 2, E, E);
  auto u = silu(causal_depthwise_conv1d(xb, p.conv_weight, p.conv_bias));
  auto proj = apply(p.x_proj, u);
  auto dt_raw = slice(proj, 2, 0, R);
  auto b_sel = slice(proj, 2, R, n);
  auto c_sel = slice(proj, 2, R + n, n);
  auto delta = softplus(apply(p.dt_proj, dt_raw));
  auto A = neg(exp(p.A_log));
  auto y = selective_scan(u, delta, A, b_sel, c_sel, p.D);
  return apply(p.out_proj, mul(y, silu(z)));
}

// Gated mixer block parameters: LN, Mamba, the three channel maps W_a, W_b,
// W_p, a second LN and the feed-forward.
template <typename T>
struct MambaBlockParams {
  std::size_t channels = 0;
  NormParams<T> norm1;
  MambaLayerParams<T> mamba;
  LinearParams<T> w_a;
  LinearParams<T> w_b;
  LinearParams<T> w_p;
  NormParams<T> norm2;
  MlpParams<T> mlp;

  static MambaBlockParams init(InitRng& rng, std::size_t channels, const SsmConfig& cfg, std::size_t mlp_ratio) {
    MambaBlockParams p;
    p.channels = channels;
    p.norm1 = NormParams<T>::init(channels);
    p.mamba = MambaLayerParams<T>::init(rng, channels, cfg);
    p.w_a = LinearParams<T>::init(rng, channels, channels);
    p.w_b = LinearParams<T>::init(rng, channels, channels);
    p.w_p = LinearParams<T>::init(rng, channels, channels);
    p.norm2 = NormParams<T>::init(channels);
    p.mlp = MlpParams<T>::init(rng, channels, mlp_ratio);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    mamba.collect(out, prefix + ".mamba");
    w_a.collect(out, prefix + ".w_a");
    w_b.collect(out, prefix + ".w_b");
    w_p.collect(out, prefix + ".w_p");
    norm2.collect(out, prefix + ".norm2");
    mlp.collect(out, prefix + ".mlp");
  }
};

// Token-level block on X_seq [B,N,C].
template <typename T>
Tensor<T> mamba_block_tokens(const Tensor<T>& x_seq, const MambaBlockParams<T>& p) {
  auto x_hat = apply(p.norm1, x_seq);
  auto g = mamba_layer(x_hat, p.mamba);
  auto g_hat = silu(apply(p.w_a, g));
  auto h = silu(apply(p.w_b, x_hat));
  auto f = apply(p.w_p, mul(g_hat, h));
  auto x1 = add(x_seq, f);
  auto z = apply(p.norm2, x1);
  return add(x1, apply(p.mlp, z));
}

// Volume-level block: [B,C,D,H,W] -> same shape.
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& volume, const MambaBlockParams<T>& p) {
  if (volume.dim() != 5 || volume.shape()[1] != p.channels) {
    throw ConfigError("mamba block built for " + std::to_string(p.channels) + " channels, got " +
                      to_string(volume.shape()));
  }
  const Triple grid{volume.shape()[2], volume.shape()[3], volume.shape()[4]};
  return tokens_to_volume(mamba_block_tokens(volume_to_tokens(volume), p), grid);
}

}  // namespace hyseg
