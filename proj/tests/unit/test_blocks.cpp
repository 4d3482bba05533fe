#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "hyseg/attention.hpp"
#include "hyseg/embedding.hpp"
#include "hyseg/gradcheck.hpp"
#include "hyseg/ssm.hpp"

using namespace hyseg;
using TD = Tensor<double>;

namespace {

TD leaf(const oracle::Vec& v, Shape s, bool grad = false) { return TD::from(std::move(s), v, grad); }

void zero(TD& t) {
  for (auto& v : t.mutable_data()) v = 0;
}

void zero(LinearParams<double>& p) {
  zero(p.weight);
  if (p.bias.defined()) zero(p.bias);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---- patch embedding and rotary positions

TEST(PatchEmbed, OutputGrids) {
  PatchEmbedConfig c{4, 24, {7, 7, 7}, {4, 4, 4}, {3, 3, 3}};
  EXPECT_EQ(c.output_grid({32, 32, 32}), (Triple{8, 8, 8}));
  EXPECT_EQ(c.output_grid({128, 128, 128}), (Triple{32, 32, 32}));
  PatchEmbedConfig s{4, 24, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}};
  EXPECT_EQ(s.output_grid({16, 16, 16}), (Triple{8, 8, 8}));
}

TEST(PatchEmbed, TokensMatchConvOracle) {
  std::mt19937_64 rng(1);
  InitRng init(2);
  const PatchEmbedConfig c{2, 6, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}};
  auto p = PatchEmbedParams<double>::init(init, c);
  const auto x = oracle::random_vec(rng, 2 * 4 * 4 * 6);
  const auto tg = patch_embed(leaf(x, {1, 2, 4, 4, 6}), p);
  EXPECT_EQ(tg.grid, (Triple{2, 2, 3}));
  EXPECT_EQ(tg.tokens.shape(), (Shape{1, 12, 6}));

  const std::size_t in[3] = {4, 4, 6}, k[3] = {3, 3, 3}, st[3] = {2, 2, 2}, pd[3] = {1, 1, 1};
  std::size_t out[3];
  const auto conv = oracle::conv3d(x, p.weight.values(), p.bias.values(), 1, 2, in, 6, k, st, pd, out);
  // Unit gamma and zero beta: each token must be its conv column standardized.
  for (std::size_t t = 0; t < 12; ++t) {
    double mean = 0, var = 0;
    for (std::size_t ch = 0; ch < 6; ++ch) mean += conv[ch * 12 + t] / 6;
    for (std::size_t ch = 0; ch < 6; ++ch) var += (conv[ch * 12 + t] - mean) * (conv[ch * 12 + t] - mean) / 6;
    for (std::size_t ch = 0; ch < 6; ++ch)
      EXPECT_NEAR(tg.tokens.values()[t * 6 + ch], (conv[ch * 12 + t] - mean) / std::sqrt(var + 1e-5), 1e-10);
  }
}

TEST(Rope, IdentityAtOrigin) {
  std::mt19937_64 rng(3);
  const auto v = oracle::random_vec(rng, 2 * 12);
  const auto y = apply_rope3d(leaf(v, {1, 2, 1, 12}), std::vector<Coord3>{{0, 0, 0}}, RotaryFrequencies(12));
  EXPECT_EQ(y.values(), v);
}

TEST(Rope, SinglePairRotation) {
  const auto y =
      apply_rope3d(leaf({1, 0, 0, 0, 0, 0}, {1, 1, 1, 6}), std::vector<Coord3>{{1, 0, 0}}, RotaryFrequencies(6));
  EXPECT_NEAR(y.values()[0], std::cos(1.0), 1e-15);
  EXPECT_NEAR(y.values()[1], std::sin(1.0), 1e-15);
  EXPECT_NEAR(y.values()[0], 0.5403, 1e-4);
  EXPECT_NEAR(y.values()[1], 0.8415, 1e-4);
}

TEST(Rope, MatchesRotationOracle) {
  std::mt19937_64 rng(4);
  const std::size_t d = 18;
  const Triple grid{2, 3, 2};
  const auto coords = grid_coords(grid);
  const auto v = oracle::random_vec(rng, 2 * 3 * 12 * d);
  const auto y = apply_rope3d(leaf(v, {2, 3, 12, d}), grid, RotaryFrequencies(d)).values();
  auto ref = v;
  for (std::size_t row = 0; row < 6; ++row)
    for (std::size_t t = 0; t < 12; ++t) oracle::rotate(&ref[(row * 12 + t) * d], d, coords[t].data());
  EXPECT_LE(max_abs_diff(y, ref), 1e-12);
}

TEST(Rope, RelativeInnerProductAndNorm) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(-8, 8);
  const std::size_t d = 12;
  const RotaryFrequencies f(d);
  auto rot = [&](const oracle::Vec& v, Coord3 c) {
    return apply_rope3d(leaf(v, {1, 1, 1, d}), std::vector<Coord3>{c}, f).values();
  };
  for (int i = 0; i < 120; ++i) {
    const auto q = oracle::random_vec(rng, d), k = oracle::random_vec(rng, d);
    const Coord3 p{pos(rng), pos(rng), pos(rng)}, delta{pos(rng), pos(rng), pos(rng)};
    const auto a = rot(q, p), b = rot(k, {p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]});
    const auto a0 = rot(q, {0, 0, 0}), b0 = rot(k, delta);
    double lhs = 0, rhs = 0, n0 = 0, n1 = 0;
    for (std::size_t j = 0; j < d; ++j) lhs += a[j] * b[j], rhs += a0[j] * b0[j], n0 += q[j] * q[j], n1 += a[j] * a[j];
    EXPECT_NEAR(lhs, rhs, 1e-6);
    EXPECT_NEAR(std::sqrt(n0), std::sqrt(n1), 1e-6);
  }
}

TEST(Rope, RejectsWidthNotDivisibleBySix) {
  EXPECT_THROW(RotaryFrequencies(8), ConfigError);
  EXPECT_THROW(apply_rope3d(TD::zeros({1, 1, 1, 8}), std::vector<Coord3>{{0, 0, 0}}, RotaryFrequencies(6)), ConfigError);
}

// ---- selective scan and Mamba blocks

TEST(Scan, HandSingleStep) {
  const auto y = selective_scan(leaf({2}, {1, 1, 1}), leaf({1}, {1, 1, 1}), leaf({-1}, {1, 1}), leaf({1}, {1, 1, 1}),
                                leaf({1}, {1, 1, 1}), leaf({0}, {1}));
  EXPECT_DOUBLE_EQ(y.item(), 2.0);
}

TEST(Scan, VanishingStepLeavesOnlySkip) {
  std::mt19937_64 rng(6);
  const std::size_t L = 10, c = 3, n = 4;
  const auto x = oracle::random_vec(rng, L * c), D = oracle::random_vec(rng, c);
  const auto y = selective_scan(leaf(x, {1, L, c}), TD::full({1, L, c}, 1e-12), leaf(oracle::random_vec(rng, c * n, -2, -0.1), {c, n}),
                                leaf(oracle::random_vec(rng, L * n), {1, L, n}),
                                leaf(oracle::random_vec(rng, L * n), {1, L, n}), leaf(D, {c}))
                     .values();
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(y[t * c + ch], D[ch] * x[t * c + ch], 1e-10);
}

TEST(Scan, MatchesNaiveRecurrence) {
  std::mt19937_64 rng(7);
  const std::size_t B = 1, L = 16, c = 4, n = 8;
  const auto x = oracle::random_vec(rng, L * c), dt = oracle::random_vec(rng, L * c, 0.01, 0.5);
  const auto A = oracle::random_vec(rng, c * n, -3, -0.1), Bs = oracle::random_vec(rng, L * n);
  const auto Cs = oracle::random_vec(rng, L * n), D = oracle::random_vec(rng, c);
  const auto y = selective_scan(leaf(x, {B, L, c}), leaf(dt, {B, L, c}), leaf(A, {c, n}), leaf(Bs, {B, L, n}),
                                leaf(Cs, {B, L, n}), leaf(D, {c}));
  EXPECT_LE(max_abs_diff(y.values(), oracle::scan(x, dt, A, Bs, Cs, D, B, L, c, n)), 1e-6);
}

TEST(Scan, LinearInInput) {
  std::mt19937_64 rng(8);
  const std::size_t L = 12, c = 3, n = 5;
  const auto dt = leaf(oracle::random_vec(rng, L * c, 0.01, 0.5), {1, L, c});
  const auto A = leaf(oracle::random_vec(rng, c * n, -2, -0.1), {c, n});
  const auto Bs = leaf(oracle::random_vec(rng, L * n), {1, L, n}), Cs = leaf(oracle::random_vec(rng, L * n), {1, L, n});
  const auto D = leaf(oracle::random_vec(rng, c), {c});
  const auto x1 = oracle::random_vec(rng, L * c), x2 = oracle::random_vec(rng, L * c);
  const double a = 0.7, b = -1.3;
  oracle::Vec mix(L * c);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x1[i] + b * x2[i];
  auto run = [&](const oracle::Vec& x) { return selective_scan(leaf(x, {1, L, c}), dt, A, Bs, Cs, D).values(); };
  const auto y1 = run(x1), y2 = run(x2), ym = run(mix);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], a * y1[i] + b * y2[i], 1e-6);
}

TEST(Scan, StableOverLongConstantInput) {
  std::mt19937_64 rng(9);
  const std::size_t L = 1024, c = 4, n = 16;
  oracle::Vec A_log = oracle::random_vec(rng, c * n, -1, 2.5), A(c * n);
  for (std::size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(A_log[i]);
  const auto y = selective_scan(TD::full({1, L, c}, 1.0), leaf(oracle::random_vec(rng, L * c, 1e-3, 1.0), {1, L, c}),
                                leaf(A, {c, n}), leaf(oracle::random_vec(rng, L * n), {1, L, n}),
                                leaf(oracle::random_vec(rng, L * n), {1, L, n}), leaf(oracle::random_vec(rng, c), {c}));
  for (double v : y.values()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_LT(std::abs(v), 1e3);
  }
}

TEST(MambaLayer, ShapeCausalityAndZeroInput) {
  std::mt19937_64 rng(10);
  InitRng init(11);
  auto p = MambaLayerParams<double>::init(init, 6, SsmConfig{4, 2, 4});
  const std::size_t L = 8, C = 6;
  const auto x = oracle::random_vec(rng, 2 * L * C);
  const auto y = mamba_layer(leaf(x, {2, L, C}), p).values();
  EXPECT_EQ(y.size(), x.size());
  for (std::size_t t = 0; t < L; ++t) {
    auto xp = x;
    for (std::size_t ch = 0; ch < C; ++ch) xp[t * C + ch] += 0.5;
    const auto yp = mamba_layer(leaf(xp, {2, L, C}), p).values();
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t ch = 0; ch < C; ++ch) EXPECT_EQ(yp[s * C + ch], y[s * C + ch]) << "t=" << t << " s=" << s;
  }
  for (std::size_t L2 : {1, 5, 13}) EXPECT_EQ(mamba_layer(TD::zeros({1, L2, C}), p).shape(), (Shape{1, L2, C}));
  // dt_proj bias is the only nonzero bias; SiLU(0) = 0 still zeroes the output.
  const auto silent = mamba_layer(TD::zeros({1, 7, C}), p);
  for (double v : silent.values()) EXPECT_EQ(v, 0.0);
}

TEST(MambaBlock, ShapeContract) {
  InitRng init(12);
  auto p = MambaBlockParams<double>::init(init, 32, SsmConfig{}, 4);
  std::mt19937_64 rng(13);
  const auto y = mamba_block(leaf(oracle::random_vec(rng, 2 * 32 * 64), {2, 32, 4, 4, 4}), p);
  EXPECT_EQ(y.shape(), (Shape{2, 32, 4, 4, 4}));
}

TEST(MambaBlock, ZeroGatesLeaveResidualPath) {
  InitRng init(14);
  auto p = MambaBlockParams<double>::init(init, 12, SsmConfig{4, 2, 4}, 2);
  zero(p.w_a);
  zero(p.w_b);
  std::mt19937_64 rng(15);
  const auto x = oracle::random_vec(rng, 10 * 12);
  const auto xs = leaf(x, {1, 10, 12});
  // With the gate branch off the block reduces to x + MLP(LN(x)).
  const auto expect = add(xs, apply(p.mlp, apply(p.norm2, xs))).values();
  EXPECT_EQ(mamba_block_tokens(xs, p).values(), expect);
}

TEST(MambaBlock, GradientMatchesFiniteDifferences) {
  InitRng init(16);
  auto p = MambaBlockParams<double>::init(init, 8, SsmConfig{4, 2, 4}, 2);
  std::mt19937_64 rng(17);
  auto x = leaf(oracle::random_vec(rng, 8 * 8), {1, 8, 2, 2, 2}, true);
  const auto r = check_gradient("ssm", "mamba_block", "[1,8,2,2,2]", {x},
                                [&](const std::vector<TD>& in) { return sum(mamba_block(in[0], p)); }, rng,
                                GradCheckOptions{}, 64);
  EXPECT_TRUE(r.passed) << r.max_rel_err;
}

// ---- attention

TEST(ReduceKeys, IdentityAndHandProjection) {
  LinearParams<double> id{leaf({1, 0, 0, 1}, {2, 2}), TD::zeros({2})};
  const oracle::Vec k{1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(reduce_keys(leaf(k, {1, 4, 2}), 1, id).values(), k);

  // 4 -> 2 map: output 0 = in0 + in2, output 1 = in3.
  LinearParams<double> w{leaf({1, 0, 0, 0, 1, 0, 0, 1}, {4, 2}), TD::zeros({2})};
  const auto y = reduce_keys(leaf(k, {1, 4, 2}), 2, w);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  // rows [1,2,3,4] and [5,6,7,8]
  EXPECT_EQ(y.values(), (std::vector<double>{1 + 3, 4, 5 + 7, 8}));
  EXPECT_THROW(reduce_keys(leaf(k, {1, 4, 2}), 3, w), ArgumentError);
}

TEST(Attention, SingleTokenReturnsProjectedValue) {
  InitRng init(18);
  auto p = AttentionParams<double>::init(init, 6, 1, 1, false);
  std::mt19937_64 rng(19);
  const auto x = oracle::random_vec(rng, 6);
  const auto expect = apply(p.out, apply(p.v, leaf(x, {1, 1, 6}))).values();
  EXPECT_LE(max_abs_diff(multi_head_attention(leaf(x, {1, 1, 6}), p, RopeContext{}).values(), expect), 1e-14);
}

TEST(Attention, ConstantScoresAverageValues) {
  InitRng init(20);
  auto p = AttentionParams<double>::init(init, 6, 2, 1, false);
  zero(p.q);  // Q = 0 makes every score row constant
  std::mt19937_64 rng(21);
  const std::size_t N = 5;
  const auto x = leaf(oracle::random_vec(rng, N * 6), {1, N, 6});
  const auto v = apply(p.v, x).values();
  oracle::Vec mean(6, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < 6; ++c) mean[c] += v[i * 6 + c] / N;
  const auto one = apply(p.out, leaf(mean, {1, 1, 6})).values();
  const auto y = multi_head_attention(x, p, RopeContext{}).values();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y[i * 6 + c], one[c], 1e-12);
}

TEST(Attention, MatchesDenseOracle) {
  std::mt19937_64 rng(22);
  InitRng init(23);
  auto p = AttentionParams<double>::init(init, 6, 1, 1, false);
  ParamList<double> params;
  p.collect(params, "a");
  detail::jitter(params, rng);
  const oracle::AttentionWeights w{p.q.weight.values(), p.q.bias.values(), p.k.weight.values(), p.k.bias.values(),
                                   p.v.weight.values(), p.v.bias.values(), p.out.weight.values(), p.out.bias.values(),
                                   {}, {}};
  const auto x = oracle::random_vec(rng, 2 * 6);
  const auto got = multi_head_attention(leaf(x, {1, 2, 6}), p, RopeContext{}).values();
  EXPECT_LE(max_abs_diff(got, oracle::attention(x, w, 2, 6, 1, 1, nullptr)), 1e-6);
}

TEST(Attention, ProbabilityRowsSumToOne) {
  std::mt19937_64 rng(24);
  InitRng init(25);
  auto p = AttentionParams<double>::init(init, 12, 2, 2, true);
  AttentionProbe<double> probe;
  const auto ctx = RopeContext::for_grid({2, 2, 2}, 6);
  multi_head_attention(leaf(oracle::random_vec(rng, 2 * 8 * 12), {2, 8, 12}), p, ctx, &probe);
  ASSERT_EQ(probe.probs.shape(), (Shape{2, 2, 8, 4}));
  const auto& v = probe.probs.values();
  for (std::size_t r = 0; r < v.size() / 4; ++r) EXPECT_NEAR(v[r * 4] + v[r * 4 + 1] + v[r * 4 + 2] + v[r * 4 + 3], 1.0, 1e-6);
}

TEST(Attention, PermutationEquivarianceOnlyWithoutRope) {
  std::mt19937_64 rng(26);
  InitRng init(27);
  const std::size_t N = 8, C = 6;
  auto p = AttentionParams<double>::init(init, C, 1, 1, true);
  const auto x = oracle::random_vec(rng, N * C);
  const std::vector<std::size_t> perm{5, 2, 7, 0, 1, 6, 4, 3};
  oracle::Vec xp(N * C);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) xp[i * C + c] = x[perm[i] * C + c];
  auto gap = [&](const RopeContext& ctx) {
    const auto y = multi_head_attention(leaf(x, {1, N, C}), p, ctx).values();
    const auto yp = multi_head_attention(leaf(xp, {1, N, C}), p, ctx).values();
    double g = 0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) g = std::max(g, std::abs(yp[i * C + c] - y[perm[i] * C + c]));
    return g;
  };
  EXPECT_LE(gap(RopeContext{}), 1e-12);
  EXPECT_GT(gap(RopeContext::for_grid({2, 2, 2}, C)), 1e-3);
}

TEST(TransformerBlock, ShapeContract) {
  InitRng init(28);
  auto p = TransformerBlockParams<double>::init(init, 160, 5, 1, 4, false);
  std::mt19937_64 rng(29);
  const auto y = transformer_block(leaf(oracle::random_vec(rng, 2 * 160 * 8), {2, 160, 2, 2, 2}), p, false);
  EXPECT_EQ(y.shape(), (Shape{2, 160, 2, 2, 2}));
}

TEST(TransformerBlock, ZeroWeightsGiveIdentity) {
  InitRng init(30);
  auto p = TransformerBlockParams<double>::init(init, 12, 2, 1, 4, true);
  zero(p.attn.q), zero(p.attn.k), zero(p.attn.v), zero(p.attn.out);
  zero(p.mlp.fc1), zero(p.mlp.fc2);
  std::mt19937_64 rng(31);
  const auto x = oracle::random_vec(rng, 12 * 8);
  EXPECT_EQ(transformer_block(leaf(x, {1, 12, 2, 2, 2}), p).values(), x);
}

TEST(TransformerBlock, GradientMatchesFiniteDifferences) {
  InitRng init(32);
  auto p = TransformerBlockParams<double>::init(init, 12, 2, 1, 4, true);
  std::mt19937_64 rng(33);
  auto x = leaf(oracle::random_vec(rng, 12 * 8), {1, 12, 2, 2, 2}, true);
  const auto r = check_gradient("attention", "transformer_block", "[1,12,2,2,2]", {x},
                                [&](const std::vector<TD>& in) { return transformer_block(in[0], p); }, rng,
                                GradCheckOptions{}, 96);
  EXPECT_TRUE(r.passed) << r.max_rel_err;
}

TEST(AttentionConfig, RejectsBadHeadsAndRotaryWidth) {
  InitRng init(34);
  EXPECT_THROW(AttentionParams<double>::init(init, 12, 5, 1, false), ConfigError);
  EXPECT_THROW(AttentionParams<double>::init(init, 16, 2, 1, true), ConfigError);
}
