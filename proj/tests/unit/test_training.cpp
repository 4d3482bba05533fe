#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "../oracles.hpp"
#include "hyseg/gradcheck.hpp"
#include "hyseg/trainer.hpp"

using namespace hyseg;
using TD = Tensor<double>;

namespace {

TD leaf(const oracle::Vec& v, Shape s, bool grad = false) { return TD::from(std::move(s), v, grad); }

// One-hot logits with the given margin: target class gets `margin`, others 0.
TD margin_logits(const LabelVolume& l, std::size_t K, double margin) {
  const std::size_t B = l.shape[0], V = l.data.size() / B;
  oracle::Vec v(B * K * V, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < V; ++i) v[(b * K + l.data[b * V + i]) * V + i] = margin;
  Shape s{B, K};
  s.insert(s.end(), l.shape.begin() + 1, l.shape.end());
  return leaf(v, s);
}

// Cross-entropy and soft Dice written out with plain loops.
double ce_oracle(const oracle::Vec& z, const LabelVolume& l, std::size_t K) {
  const std::size_t B = l.shape[0], V = l.data.size() / B;
  double total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < V; ++i) {
      double mx = -1e300, s = 0;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z[(b * K + k) * V + i]);
      for (std::size_t k = 0; k < K; ++k) s += std::exp(z[(b * K + k) * V + i] - mx);
      total -= z[(b * K + l.data[b * V + i]) * V + i] - mx - std::log(s);
    }
  return total / static_cast<double>(B * V);
}

double dice_oracle(const oracle::Vec& z, const LabelVolume& l, std::size_t K, double eps) {
  const std::size_t B = l.shape[0], V = l.data.size() / B;
  oracle::Vec inter(K, 0), ps(K, 0), ts(K, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < V; ++i) {
      double mx = -1e300, s = 0;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z[(b * K + k) * V + i]);
      for (std::size_t k = 0; k < K; ++k) s += std::exp(z[(b * K + k) * V + i] - mx);
      for (std::size_t k = 0; k < K; ++k) {
        const double p = std::exp(z[(b * K + k) * V + i] - mx) / s, t = l.data[b * V + i] == k ? 1.0 : 0.0;
        inter[k] += p * t, ps[k] += p, ts[k] += t;
      }
    }
  double mean = 0;
  for (std::size_t k = 0; k < K; ++k) mean += (2 * inter[k] + eps) / (ps[k] + ts[k] + eps) / static_cast<double>(K);
  return 1.0 - mean;
}

LabelVolume random_labels(std::mt19937_64& rng, Shape s, std::size_t K) {
  LabelVolume l{s, std::vector<std::uint8_t>(numel(s))};
  std::uniform_int_distribution<int> d(0, static_cast<int>(K) - 1);
  for (auto& v : l.data) v = static_cast<std::uint8_t>(d(rng));
  return l;
}

// Half-overlap masks on a 2x2x4 grid: |A| = |B| = 8, |A & B| = 4.
std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> half_overlap() {
  std::vector<std::uint8_t> a(16, 0), b(16, 0);
  for (std::size_t i = 0; i < 8; ++i) a[i] = 1;   // voxels 0..7
  for (std::size_t i = 4; i < 12; ++i) b[i] = 1;  // voxels 4..11
  return {a, b};
}

}  // namespace

TEST(Dice, ScoreHandCases) {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1};
  EXPECT_EQ(dice_score(a, a, 1), 1.0);
  EXPECT_EQ(dice_score(a, b, 1), 0.0);
  const std::vector<std::uint8_t> none(4, 0);
  EXPECT_EQ(dice_score(none, none, 2), 1.0);
  const auto [p, t] = half_overlap();
  EXPECT_DOUBLE_EQ(dice_score(p, t, 1), 0.5);
}

TEST(Dice, LossHandCases) {
  const auto [p, t] = half_overlap();
  const LabelVolume target{{1, 2, 2, 4}, t}, pred{{1, 2, 2, 4}, p};
  // Perfect prediction at margin 20 drives the loss to zero.
  EXPECT_LE(dice_loss(margin_logits(target, 2, 20.0), target).item(), 1e-3);
  // Huge margins make probabilities hard; the class-1 term becomes 2*4/(8+8).
  const auto hard = margin_logits(pred, 2, 200.0);
  const double class1 = 0.5, class0 = 2.0 * 4 / (8 + 8);
  EXPECT_NEAR(dice_loss(hard, target, 0.0).item(), 1.0 - (class0 + class1) / 2, 1e-12);
  // Disjoint single-class masks: dice of that class collapses to eps/(|A|+|B|+eps).
  LabelVolume all0{{1, 1, 1, 4}, {0, 0, 0, 0}}, all1{{1, 1, 1, 4}, {1, 1, 1, 1}};
  const double loss = dice_loss(margin_logits(all1, 2, 200.0), all0, 1e-5).item();
  const double d0 = 1e-5 / (0 + 4 + 1e-5), d1 = 1e-5 / (4 + 0 + 1e-5);
  EXPECT_NEAR(loss, 1.0 - (d0 + d1) / 2, 1e-12);
  EXPECT_GT(loss, 0.999);
}

TEST(Loss, MatchesLoopOracles) {
  std::mt19937_64 rng(1);
  for (auto s : {Shape{1, 2, 2, 2}, Shape{2, 3, 2, 4}, Shape{3, 1, 4, 2}}) {
    const std::size_t K = 3;
    const auto labels = random_labels(rng, s, K);
    const auto z = oracle::random_vec(rng, s[0] * K * s[1] * s[2] * s[3], -3, 3);
    const auto logits = leaf(z, {s[0], K, s[1], s[2], s[3]});
    EXPECT_NEAR(cross_entropy(logits, labels).item(), ce_oracle(z, labels, K), 1e-12);
    EXPECT_NEAR(dice_loss(logits, labels).item(), dice_oracle(z, labels, K, 1e-5), 1e-12);
    const double both = combined_loss(logits, labels, {1.0, 1.0}).item();
    EXPECT_NEAR(both, ce_oracle(z, labels, K) + dice_oracle(z, labels, K, 1e-5), 1e-12);
    EXPECT_EQ(combined_loss(logits, labels, {0.0, 1.0}).item(), cross_entropy(logits, labels).item());
    EXPECT_EQ(combined_loss(logits, labels, {1.0, 0.0}).item(), dice_loss(logits, labels).item());
    EXPECT_GE(both, 0.0);
    const double d = dice_loss(logits, labels).item();
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
  EXPECT_THROW(combined_loss(TD::zeros({1, 2, 1, 1, 1}), LabelVolume{{1, 1, 1, 1}, {0}}, {0.0, 0.0}), ConfigError);
}

TEST(Loss, InvariantToBatchOrder) {
  std::mt19937_64 rng(2);
  const std::size_t K = 3, V = 8;
  const auto labels = random_labels(rng, {2, 2, 2, 2}, K);
  const auto z = oracle::random_vec(rng, 2 * K * V, -2, 2);
  oracle::Vec zs(z.size());
  LabelVolume swapped{labels.shape, labels.data};
  for (std::size_t b = 0; b < 2; ++b) {
    std::copy(z.begin() + b * K * V, z.begin() + (b + 1) * K * V, zs.begin() + (1 - b) * K * V);
    std::copy(labels.data.begin() + b * V, labels.data.begin() + (b + 1) * V, swapped.data.begin() + (1 - b) * V);
  }
  EXPECT_NEAR(combined_loss(leaf(z, {2, K, 2, 2, 2}), labels, {}).item(),
              combined_loss(leaf(zs, {2, K, 2, 2, 2}), swapped, {}).item(), 1e-14);
}

TEST(Loss, PerfectPredictionTendsToZero) {
  std::mt19937_64 rng(3);
  const auto labels = random_labels(rng, {1, 2, 2, 2}, 4);
  double prev = 1e9;
  for (double m : {1.0, 4.0, 10.0, 30.0}) {
    const double l = combined_loss(margin_logits(labels, 4, m), labels, {}).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  GradCheckOptions opt;
  opt.filter = "training";
  const auto results = run_grad_suite(opt);
  ASSERT_GE(results.size(), 12u);
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.op << " " << r.shape << " " << r.max_rel_err;
}

TEST(Loss, DeepSupervisionDownsamplesLabels) {
  LabelVolume l{{1, 4, 4, 4}, std::vector<std::uint8_t>(64)};
  for (std::size_t i = 0; i < 64; ++i) l.data[i] = static_cast<std::uint8_t>(i % 3);
  const auto d = downsample_labels(l, {2, 2, 2});
  EXPECT_EQ(d.shape, (Shape{1, 2, 2, 2}));
  // Nearest neighbour keeps the label at the top-left-front voxel of each cell.
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) EXPECT_EQ(d.data[(z * 2 + y) * 2 + x], l.data[((2 * z) * 4 + 2 * y) * 4 + 2 * x]);
}

TEST(Schedule, Boundaries) {
  const ScheduleConfig s{3e-4, 1e-6, 50, 1000};
  EXPECT_EQ(lr_at(0, s), s.min_lr);
  EXPECT_EQ(lr_at(50, s), s.base_lr);
  EXPECT_EQ(lr_at(1000, s), s.min_lr);
  EXPECT_NEAR(lr_at(525, s), s.min_lr + 0.5 * (s.base_lr - s.min_lr), 1e-15);
  EXPECT_NEAR(lr_at(25, s), 0.5 * (s.base_lr + s.min_lr), 1e-15);
  for (std::size_t t = 51; t <= 1000; ++t) EXPECT_LE(lr_at(t, s), lr_at(t - 1, s));
  EXPECT_THROW(lr_at(1001, s), ArgumentError);
  EXPECT_THROW(lr_at(0, {1e-3, 0, 10, 10}), ConfigError);
}

TEST(Schedule, DefaultWarmupIsFivePercent) {
  TrainConfig tc;
  tc.total_steps = 400;
  EXPECT_EQ(tc.effective_warmup(), 20u);
  tc.warmup_steps = 7;
  EXPECT_EQ(tc.schedule().warmup_steps, 7u);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  auto t = leaf({0.5, -1.5, 2.0}, {3}, true);
  sum(scale(t, 0.0)).backward();
  AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 3; ++i) opt.step({{"t", t}}, 1e-2);
  EXPECT_EQ(t.values(), (std::vector<double>{0.5, -1.5, 2.0}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  auto t = leaf({1.0}, {1}, true);
  sum(t).backward();
  AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  opt.step({{"t", t}}, 1e-3);
  EXPECT_NEAR(1.0 - t.item(), 1e-3 / (1 + 1e-8), 1e-15);
}

TEST(AdamW, MatchesHandTraceOnQuadratic) {
  auto t = leaf({1.0}, {1}, true);
  AdamW<double> opt;
  oracle::HandAdamW hand;
  oracle::Vec ref{1.0};
  for (int i = 0; i < 10; ++i) {
    t.zero_grad();
    sum(mul(t, t)).backward();
    opt.step({{"t", t}}, 0.05);
    hand.step(ref, {2 * ref[0]}, 0.05);
    EXPECT_NEAR(t.item(), ref[0], 1e-10) << "step " << i;
  }
  EXPECT_LT(t.item(), 1.0);
}

TEST(AdamW, RejectsNonFiniteGradient) {
  auto t = leaf({1.0, 2.0}, {2}, true);
  t.node().grad_buffer()[1] = std::numeric_limits<double>::quiet_NaN();
  AdamW<double> opt;
  EXPECT_THROW(opt.step({{"t", t}}, 1e-3), NumericError);
}

TEST(Synthetic, DeterministicPerIndex) {
  const SyntheticDataSpec spec;
  const auto a = generate_synthetic(spec, 3), b = generate_synthetic(spec, 3), c = generate_synthetic(spec, 4);
  EXPECT_EQ(a.volume, b.volume);
  EXPECT_EQ(a.labels.data, b.labels.data);
  EXPECT_NE(a.labels.data, c.labels.data);
  SyntheticDataSpec other = spec;
  other.seed = 99;
  EXPECT_NE(generate_synthetic(other, 3).labels.data, a.labels.data);
}

TEST(Synthetic, NoiselessIntensityIsClassFunction) {
  SyntheticDataSpec spec;
  spec.noise_sigma = 0;
  const auto ph = generate_synthetic(spec, 0);
  const std::size_t V = ph.labels.data.size();
  for (std::size_t c = 0; c < spec.channels; ++c)
    for (std::size_t v = 0; v < V; ++v)
      ASSERT_EQ(ph.volume[c * V + v], static_cast<float>(class_intensity(c, ph.labels.data[v], spec.num_classes)));
}

TEST(Synthetic, NestedShellsWithExpectedVolumes) {
  const SyntheticDataSpec spec;
  for (std::uint64_t idx = 0; idx < 8; ++idx) {
    const auto ph = generate_synthetic(spec, idx);
    std::vector<std::size_t> at_least(spec.num_classes, 0);
    for (auto v : ph.labels.data) {
      ASSERT_LT(v, spec.num_classes);
      for (std::size_t k = 0; k <= v; ++k) ++at_least[k];
    }
    for (std::size_t k = 1; k < spec.num_classes; ++k) {
      // Voxels labelled >= k fill shell k-1; compare against the ellipsoid volume.
      const double expect = ph.shells[k - 1].volume();
      EXPECT_NEAR(static_cast<double>(at_least[k]) / expect, 1.0, 0.2) << "index " << idx << " class " << k;
      EXPECT_GT(at_least[k] - (k + 1 < spec.num_classes ? at_least[k + 1] : 0), 0u);
    }
    // Nesting: each voxel labelled k lies inside every shell below k.
    const auto [D, H, W] = spec.extent;
    for (std::size_t z = 0, i = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x, ++i)
          for (std::size_t k = 1; k <= ph.labels.data[i]; ++k)
            ASSERT_TRUE(ph.shells[k - 1].contains(z + 0.5, y + 0.5, x + 0.5));
  }
}

TEST(Synthetic, RejectsShapesThatDoNotFit) {
  SyntheticDataSpec spec;
  spec.extent = {16, 16, 16};
  EXPECT_THROW(generate_synthetic(spec, 0), ConfigError);
}

TEST(Synthetic, BatchStacksItems) {
  const SyntheticDataSpec spec;
  const auto a = generate_synthetic(spec, 0), b = generate_synthetic(spec, 1);
  auto [x, l] = make_batch<float>({&a, &b});
  EXPECT_EQ(x.shape(), (Shape{2, 4, 32, 32, 32}));
  EXPECT_EQ(l.shape, (Shape{2, 32, 32, 32}));
  EXPECT_EQ(x.values()[a.volume.size()], b.volume[0]);
}

namespace {

ModelConfig small_model() {
  ModelConfig c = ModelConfig::defaults();
  const std::size_t dims[4] = {6, 6, 12, 12}, heads[4] = {1, 1, 2, 2};
  for (std::size_t i = 0; i < 4; ++i) c.stages[i].embed_dim = dims[i], c.stages[i].heads = heads[i], c.stages[i].depth = 1;
  c.decoder_dim = 12;
  c.mlp_ratio = 2;
  c.ssm.state_dim = 4;
  c.in_channels = 2;
  c.num_classes = 3;
  return c;
}

SyntheticDataSpec small_data() {
  SyntheticDataSpec d;
  d.extent = {16, 16, 16};
  d.channels = 2;
  d.num_classes = 3;
  d.outer_radius_min = 5;
  d.outer_radius_max = 6.5;
  d.center_jitter = 1;
  return d;
}

}  // namespace

TEST(Trainer, HistoryFollowsCadenceAndSchedule) {
  Model<float> m(small_model(), 0);
  AdamW<float> opt;
  TrainConfig tc;
  tc.total_steps = 10;
  tc.eval_every = 4;
  tc.num_train = 3;
  tc.num_val = 2;
  std::size_t steps = 0, checkpoints = 0;
  TrainHooks h;
  h.on_step = [&](std::size_t, double) { ++steps; };
  h.on_checkpoint = [&](std::size_t done) {
    ++checkpoints;
    EXPECT_EQ(done, 10u);
  };
  const auto hist = train(m, opt, tc, small_data(), 0, h);
  ASSERT_EQ(hist.size(), 3u);  // after steps 4, 8 and the final step
  EXPECT_EQ(hist[0].step, 3u);
  EXPECT_EQ(hist[1].step, 7u);
  EXPECT_EQ(hist[2].step, 9u);
  for (const auto& r : hist) {
    EXPECT_EQ(r.lr, lr_at(r.step, tc.schedule()));
    EXPECT_EQ(r.dice.size(), 2u);
    EXPECT_TRUE(std::isfinite(r.loss));
  }
  EXPECT_EQ(steps, 10u);
  EXPECT_EQ(checkpoints, 1u);
  EXPECT_EQ(opt.steps(), 10u);
}

TEST(Trainer, LossDecreasesOnFixedBatch) {
  Model<float> m(small_model(), 1);
  const auto spec = small_data();
  const auto a = generate_synthetic(spec, 0), b = generate_synthetic(spec, 1);
  auto [x, labels] = make_batch<float>({&a, &b});
  AdamW<float> opt;
  const auto params = m.parameters();
  std::vector<double> losses;
  for (int step = 0; step < 150; ++step) {
    for (const auto& [n, p] : params) Tensor<float>(p).zero_grad();
    auto loss = combined_loss(m.forward(x).full_logits, labels, {});
    losses.push_back(loss.item());
    loss.backward();
    opt.step(params, 3e-3);
  }
  // Window means over 50 steps must fall monotonically.
  auto window = [&](std::size_t w) {
    double s = 0;
    for (std::size_t i = w * 50; i < (w + 1) * 50; ++i) s += losses[i];
    return s / 50;
  };
  EXPECT_LT(window(1), window(0));
  EXPECT_LT(window(2), window(1));
}

TEST(Trainer, MismatchedDataRejected) {
  Model<float> m(small_model(), 0);
  AdamW<float> opt;
  auto data = small_data();
  data.channels = 4;
  EXPECT_THROW(train(m, opt, TrainConfig{}, data), ConfigError);
}

TEST(Trainer, EvaluateReportsEveryClass) {
  Model<float> m(small_model(), 0);
  const auto table = evaluate(m, generate_split(small_data(), 0, 2));
  ASSERT_EQ(table.per_class.size(), 3u);
  EXPECT_EQ(table.foreground().size(), 2u);
  for (double d : table.per_class) {
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}
