#pragma once

// Closed-form parameter and FLOP accounting. Nothing here touches a Model: the
// counts are pure functions of (config, input extent), which is what lets the
// tests compare them against a brute-force enumeration of real tensors.
//
// FLOP conventions (batch 1):
//   matmul / linear     2 per multiply-accumulate, +1 per output for a bias
//   layer norm          8 per element
//   softmax             5 per element
//   SiLU 4, GELU 8, softplus 4 per element
//   residual add, gating multiply, attention scale   1 per element
//   rotary embedding    3 per rotated element
//   trilinear upsample  16 per output element (0 when the factor is 1)
//   selective scan      8 per (token, channel, state) + 2 per (token, channel)
//   causal depthwise conv  2*k per (token, channel) + 1 for the bias
// Parameter-only transforms (A = -exp(A_log)) are not counted: they do not
// depend on the input and would break exact linearity in N.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hyseg/network.hpp"

namespace hyseg {

using Count = std::uint64_t;

inline constexpr double kReferenceParams = 2.02e6;
inline constexpr double kReferenceGflops = 15.2;

namespace cost {

inline Count linear_params(Count in, Count out, bool bias = true) { return in * out + (bias ? out : 0); }
inline Count conv3d_params(Count in, Count out, const Triple& k) { return out * in * k[0] * k[1] * k[2] + out; }
inline Count norm_params(Count c) { return 2 * c; }
inline Count mlp_params(Count c, Count ratio) { return linear_params(c, c * ratio) + linear_params(c * ratio, c); }

inline Count mamba_layer_params(Count c, const SsmConfig& s) {
  const Count e = s.expand * c, r = SsmConfig::dt_rank(c), n = s.state_dim;
  return linear_params(c, 2 * e, false) + e * s.conv_width + e + linear_params(e, r + 2 * n, false) +
         linear_params(r, e) + e * n + e + linear_params(e, c, false);
}

inline Count mamba_block_params(Count c, const SsmConfig& s, Count ratio) {
  return 2 * norm_params(c) + mamba_layer_params(c, s) + 3 * linear_params(c, c) + mlp_params(c, ratio);
}

inline Count attention_params(Count c, Count reduction) {
  return 4 * linear_params(c, c) + (reduction > 1 ? linear_params(c * reduction, c) : 0);
}

inline Count transformer_block_params(Count c, Count reduction, Count ratio) {
  return 2 * norm_params(c) + attention_params(c, reduction) + mlp_params(c, ratio);
}

inline Count linear_flops(Count rows, Count in, Count out, bool bias = true) {
  return 2 * rows * in * out + (bias ? rows * out : 0);
}

inline Count mlp_flops(Count n, Count c, Count ratio) {
  return linear_flops(n, c, c * ratio) + 8 * n * c * ratio + linear_flops(n, c * ratio, c);
}

inline Count mamba_layer_flops(Count n_tok, Count c, const SsmConfig& s) {
  const Count e = s.expand * c, r = SsmConfig::dt_rank(c), n = s.state_dim, N = n_tok;
  Count f = linear_flops(N, c, 2 * e, false);
  f += 2 * N * e * s.conv_width + N * e;  // causal conv + bias
  f += 4 * N * e;                          // SiLU
  f += linear_flops(N, e, r + 2 * n, false);
  f += linear_flops(N, r, e) + 4 * N * e;  // dt_proj + softplus
  f += 8 * N * e * n + 2 * N * e;          // scan incl. skip
  f += 4 * N * e + N * e;                  // SiLU(z) gate
  f += linear_flops(N, e, c, false);
  return f;
}

inline Count mamba_block_flops(Count n_tok, Count c, const SsmConfig& s, Count ratio) {
  const Count N = n_tok;
  Count f = 8 * N * c + mamba_layer_flops(N, c, s);
  f += 2 * (linear_flops(N, c, c) + 4 * N * c);  // SiLU(W_a g), SiLU(W_b x)
  f += N * c + linear_flops(N, c, c) + N * c;    // gate, W_p, residual
  f += 8 * N * c + mlp_flops(N, c, ratio) + N * c;
  return f;
}

struct AttentionFlops {
  Count total = 0;
  Count score_terms = 0;  // QK^T plus attn*V
};

inline AttentionFlops transformer_block_flops(Count n_tok, Count c, Count heads, Count reduction, Count ratio,
                                              bool rope) {
  const Count N = n_tok, M = n_tok / reduction, dh = c / heads;
  AttentionFlops a;
  a.score_terms = 2 * (2 * N * M * dh * heads);
  Count f = 8 * N * c + 3 * linear_flops(N, c, c);
  if (rope) f += 2 * 3 * N * c;
  if (reduction > 1) f += 2 * linear_flops(M, c * reduction, c);
  f += a.score_terms + N * M * heads + 5 * N * M * heads;
  f += linear_flops(N, c, c) + N * c;
  f += 8 * N * c + mlp_flops(N, c, ratio) + N * c;
  a.total = f;
  return a;
}

inline Count upsample_flops(Count channels, const Triple& out_grid, const Triple& factor) {
  if (factor == Triple{1, 1, 1}) return 0;
  return 16 * channels * out_grid[0] * out_grid[1] * out_grid[2];
}

}  // namespace cost

struct ComplexityRow {
  std::string module;
  Count params = 0;
  Count flops = 0;
};

struct ComplexityReport {
  Triple extent{0, 0, 0};  // all zero when only parameters were counted
  std::vector<ComplexityRow> rows;

  Count total_params() const {
    Count n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  Count total_flops() const {
    Count n = 0;
    for (const auto& r : rows) n += r.flops;
    return n;
  }
  const ComplexityRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.module == name) return r;
    throw ArgumentError("no complexity row named " + name);
  }
  bool has_row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.module == name) return true;
    return false;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "module,params,flops\n";
    for (const auto& r : rows) os << r.module << ',' << r.params << ',' << r.flops << '\n';
    os << "total," << total_params() << ',' << total_flops() << '\n';
    return os.str();
  }

  std::string text() const {
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.module.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w)) << "module" << std::right << std::setw(14) << "params"
       << std::setw(20) << "flops" << '\n';
    auto line = [&](const std::string& m, Count p, Count f) {
      os << std::left << std::setw(static_cast<int>(w)) << m << std::right << std::setw(14) << p << std::setw(20) << f
         << '\n';
    };
    for (const auto& r : rows) line(r.module, r.params, r.flops);
    line("total", total_params(), total_flops());
    return os.str();
  }
};

namespace detail {

inline ComplexityReport build_report(const ModelConfig& cfg, const Triple* extent) {
  ComplexityReport rep;
  std::array<Triple, 4> grids{};
  auto tokens = [](const Triple& g) -> Count { return g[0] * g[1] * g[2]; };
  if (extent) {
    rep.extent = *extent;
    grids = cfg.stage_grids(*extent);
  }
  const Count ratio = cfg.mlp_ratio;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = cfg.stages[i];
    const auto pc = cfg.patch_config(i);
    const std::string pre = "encoder.stage" + std::to_string(i + 1);
    const Count C = s.embed_dim, N = extent ? tokens(grids[i]) : 0;

    ComplexityRow embed{pre + ".embed", cost::conv3d_params(pc.in_channels, C, pc.kernel) + cost::norm_params(C), 0};
    if (extent) {
      const Count kvol = pc.kernel[0] * pc.kernel[1] * pc.kernel[2];
      embed.flops = 2 * N * C * pc.in_channels * kvol + N * C + 8 * N * C;
    }
    rep.rows.push_back(embed);

    ComplexityRow blocks{pre + ".blocks", 0, 0};
    if (s.mixer == MixerKind::kMamba) {
      if (cfg.use_rope && extent) rep.rows.push_back({pre + ".rope", 0, 3 * N * C});
      blocks.params = s.depth * cost::mamba_block_params(C, cfg.ssm, ratio);
      if (extent) blocks.flops = s.depth * cost::mamba_block_flops(N, C, cfg.ssm, ratio);
    } else {
      blocks.params = s.depth * cost::transformer_block_params(C, s.reduction, ratio);
      if (extent) blocks.flops = s.depth * cost::transformer_block_flops(N, C, s.heads, s.reduction, ratio, cfg.use_rope).total;
    }
    rep.rows.push_back(blocks);
  }

  const Count Cd = cfg.decoder_dim, K = cfg.num_classes;
  const Count N1 = extent ? tokens(grids[0]) : 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Count Ci = cfg.stages[i].embed_dim;
    ComplexityRow proj{"decoder.proj" + std::to_string(i + 1), cost::linear_params(Ci, Cd), 0};
    if (extent) {
      const Triple factor{grids[0][0] / grids[i][0], grids[0][1] / grids[i][1], grids[0][2] / grids[i][2]};
      proj.flops = cost::linear_flops(tokens(grids[i]), Ci, Cd) + cost::upsample_flops(Cd, grids[0], factor);
    }
    rep.rows.push_back(proj);
  }
  rep.rows.push_back({"decoder.fuse", cost::linear_params(4 * Cd, Cd), cost::linear_flops(N1, 4 * Cd, Cd)});
  rep.rows.push_back({"decoder.head", cost::linear_params(Cd, K), cost::linear_flops(N1, Cd, K)});
  if (extent) rep.rows.push_back({"decoder.upsample", 0, cost::upsample_flops(K, *extent, cfg.stages[0].stride)});
  if (cfg.deep_supervision) {
    for (std::size_t i = 1; i < 4; ++i) {
      const Count Ci = cfg.stages[i].embed_dim;
      rep.rows.push_back({"ds.head" + std::to_string(i + 1), cost::linear_params(Ci, K),
                          extent ? cost::linear_flops(tokens(grids[i]), Ci, K) : 0});
    }
  }
  return rep;
}

}  // namespace detail

inline ComplexityReport count_params(const ModelConfig& cfg) { return detail::build_report(cfg, nullptr); }

inline ComplexityReport count_flops(const ModelConfig& cfg, const Triple& extent) {
  return detail::build_report(cfg, &extent);
}

// Same widths, depths and heads with every stage mixing by attention.
inline ModelConfig all_attention_variant(ModelConfig cfg) {
  for (auto& s : cfg.stages) s.mixer = MixerKind::kAttention;
  return cfg;
}

struct ScalingRow {
  Triple extent{};
  Count tokens = 0;           // stage-1 sequence length
  Count mamba_flops = 0;      // every Mamba stage: embedding, rotary, blocks
  Count attention_flops = 0;  // the same stages mixed by single-head attention instead
  Count attention_score_flops = 0;
};

inline std::vector<ScalingRow> scaling_report(const ModelConfig& cfg, const std::vector<Triple>& extents) {
  if (extents.size() < 2) throw ArgumentError("scaling_report needs at least two extents");
  std::vector<ScalingRow> out;
  for (const auto& e : extents) {
    const auto rep = count_flops(cfg, e);
    const auto grids = cfg.stage_grids(e);
    ScalingRow row{e, grids[0][0] * grids[0][1] * grids[0][2], 0, 0, 0};
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = cfg.stages[i];
      if (s.mixer != MixerKind::kMamba) continue;
      const std::string pre = "encoder.stage" + std::to_string(i + 1);
      const Count N = grids[i][0] * grids[i][1] * grids[i][2];
      row.mamba_flops += rep.row(pre + ".embed").flops + rep.row(pre + ".blocks").flops;
      if (rep.has_row(pre + ".rope")) row.mamba_flops += rep.row(pre + ".rope").flops;
      const auto a = cost::transformer_block_flops(N, s.embed_dim, 1, 1, cfg.mlp_ratio, cfg.use_rope);
      row.attention_flops += rep.row(pre + ".embed").flops + s.depth * a.total;
      row.attention_score_flops += s.depth * a.score_terms;
    }
    out.push_back(row);
  }
  return out;
}

inline std::string format_scaling(const std::vector<ScalingRow>& rows) {
  std::ostringstream os;
  os << std::setw(14) << "extent" << std::setw(12) << "tokens" << std::setw(18) << "mamba_flops" << std::setw(10)
     << "ratio" << std::setw(20) << "attention_flops" << std::setw(20) << "attn_score_flops" << std::setw(10)
     << "ratio" << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::ostringstream ext;
    ext << r.extent[0] << 'x' << r.extent[1] << 'x' << r.extent[2];
    os << std::setw(14) << ext.str() << std::setw(12) << r.tokens << std::setw(18) << r.mamba_flops;
    auto ratio = [&](Count a, Count b) {
      std::ostringstream s;
      if (i == 0 || b == 0) s << "-";
      else s << std::fixed << std::setprecision(2) << static_cast<double>(a) / static_cast<double>(b);
      return s.str();
    };
    os << std::setw(10) << ratio(r.mamba_flops, i ? rows[i - 1].mamba_flops : 0) << std::setw(20) << r.attention_flops
       << std::setw(20) << r.attention_score_flops
       << std::setw(10) << ratio(r.attention_score_flops, i ? rows[i - 1].attention_score_flops : 0) << '\n';
  }
  return os.str();
}

}  // namespace hyseg
