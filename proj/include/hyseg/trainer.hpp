#pragma once

// Training and evaluation loops over synthetic phantoms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyseg/losses.hpp"
#include "hyseg/network.hpp"
#include "hyseg/synthetic.hpp"

namespace hyseg {

struct TrainConfig {
  double base_lr = 3e-4;
  double min_lr = 1e-6;
  std::optional<std::size_t> warmup_steps;  // defaults to 5% of total_steps
  std::size_t total_steps = 1000;
  std::size_t batch_size = 2;
  double dice_weight = 1.0;
  double ce_weight = 1.0;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::size_t num_train = 64;
  std::size_t num_val = 16;
  std::size_t eval_every = 100;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t val_index_offset = 1000000;

  std::size_t effective_warmup() const { return warmup_steps ? *warmup_steps : total_steps / 20; }

  ScheduleConfig schedule() const { return {base_lr, min_lr, effective_warmup(), total_steps}; }

  void validate() const {
    if (total_steps == 0) throw ConfigError("train.total_steps must be >= 1");
    if (effective_warmup() >= total_steps) throw ConfigError("train.warmup_steps must be < train.total_steps");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (dice_weight < 0 || ce_weight < 0 || (dice_weight == 0 && ce_weight == 0)) {
      throw ConfigError("train.dice_weight/ce_weight must be >= 0 and not both zero");
    }
    if (!(base_lr > 0) || min_lr < 0 || min_lr > base_lr) throw ConfigError("train: need 0 <= min_lr <= base_lr, base_lr > 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (num_train == 0) throw ConfigError("train.num_train must be >= 1");
    if (eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
    if (val_index_offset < num_train) throw ConfigError("train.val_index_offset overlaps the training indices");
  }
};

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::vector<double> dice;  // per foreground class, on the validation split
};

struct DiceTable {
  std::vector<double> per_class;  // every class, background first

  std::vector<double> foreground() const {
    if (per_class.size() < 2) return {};
    return {per_class.begin() + 1, per_class.end()};
  }
  double mean_foreground() const {
    const auto fg = foreground();
    if (fg.empty()) return 0.0;
    return std::accumulate(fg.begin(), fg.end(), 0.0) / static_cast<double>(fg.size());
  }
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

inline std::vector<Phantom> generate_split(const SyntheticDataSpec& spec, std::uint64_t first, std::size_t count) {
  std::vector<Phantom> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(spec, first + i));
  return out;
}

// Per-class argmax Dice averaged over volumes.
template <typename T>
DiceTable evaluate(const Model<T>& model, const std::vector<Phantom>& data, std::size_t batch_size = 1) {
  NoGradGuard no_grad;
  const std::size_t K = model.config().num_classes;
  DiceTable table;
  table.per_class.assign(K, 0.0);
  if (data.empty()) return table;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<const Phantom*> items;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) items.push_back(&data[i]);
    auto [x, labels] = make_batch<T>(items);
    auto pred = argmax_labels(model.forward(x).full_logits);
    const std::size_t V = pred.data.size() / items.size();
    for (std::size_t b = 0; b < items.size(); ++b) {
      std::vector<std::uint8_t> p(pred.data.begin() + b * V, pred.data.begin() + (b + 1) * V);
      std::vector<std::uint8_t> t(labels.data.begin() + b * V, labels.data.begin() + (b + 1) * V);
      for (std::size_t k = 0; k < K; ++k) table.per_class[k] += dice_score(p, t, static_cast<std::uint8_t>(k));
    }
  }
  for (auto& d : table.per_class) d /= static_cast<double>(data.size());
  return table;
}

template <typename T>
Tensor<T> training_loss(const SegmentationOutput<T>& out, const LabelVolume& labels, const ModelConfig& mc,
                        const TrainConfig& tc) {
  const LossWeights w{tc.dice_weight, tc.ce_weight};
  if (mc.deep_supervision) return deep_supervised_loss(out.full_logits, out.aux, mc.ds_weights, labels, w);
  return combined_loss(out.full_logits, labels, w);
}

struct TrainHooks {
  std::function<void(const HistoryRow&)> on_eval;
  // Called with the number of completed steps whenever a checkpoint is due.
  std::function<void(std::size_t)> on_checkpoint;
  std::function<void(std::size_t, double)> on_step;
};

// Runs steps [start_step, total_steps). Each step draws a batch from the
// training split (reshuffled every epoch from the seed), takes one AdamW step
// at lr_at(step), and evaluates on the held-out split on the configured cadence.
template <typename T>
std::vector<HistoryRow> train(Model<T>& model, AdamW<T>& opt, const TrainConfig& tc, const SyntheticDataSpec& spec,
                              std::size_t start_step = 0, const TrainHooks& hooks = {}) {
  tc.validate();
  spec.validate();
  const ModelConfig& mc = model.config();
  if (spec.channels != mc.in_channels || spec.num_classes != mc.num_classes) {
    throw ConfigError("data channels/classes (" + std::to_string(spec.channels) + "/" +
                      std::to_string(spec.num_classes) + ") do not match the model (" +
                      std::to_string(mc.in_channels) + "/" + std::to_string(mc.num_classes) + ")");
  }
  const auto train_set = generate_split(spec, 0, tc.num_train);
  const auto val_set = generate_split(spec, tc.val_index_offset, tc.num_val);
  const auto params = model.parameters();
  const auto sched = tc.schedule();

  auto epoch_order = [&](std::size_t epoch) {
    std::vector<std::size_t> order(tc.num_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(tc.seed), static_cast<std::uint32_t>(tc.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  };

  std::vector<HistoryRow> history;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  for (std::size_t step = start_step; step < tc.total_steps; ++step) {
    std::vector<const Phantom*> items;
    for (std::size_t j = 0; j < tc.batch_size; ++j) {
      const std::size_t draw = step * tc.batch_size + j;
      const std::size_t epoch = draw / tc.num_train;
      if (epoch != cached_epoch) {
        order = epoch_order(epoch);
        cached_epoch = epoch;
      }
      items.push_back(&train_set[order[draw % tc.num_train]]);
    }
    auto [x, labels] = make_batch<T>(items);
    const double lr = lr_at(step, sched);

    for (const auto& [name, p] : params) {
      Tensor<T> q = p;
      q.zero_grad();
    }
    auto out = model.forward(x);
    auto loss = training_loss(out, labels, mc, tc);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw DivergenceError(step, "loss is " + std::to_string(loss_value));
    loss.backward();
    try {
      opt.step(params, lr);
    } catch (const NumericError& e) {
      throw DivergenceError(step, e.what());
    }
    if (hooks.on_step) hooks.on_step(step, loss_value);

    const bool last = step + 1 == tc.total_steps;
    if ((step + 1) % tc.eval_every == 0 || last) {
      HistoryRow row{step, lr, loss_value, evaluate(model, val_set, tc.batch_size).foreground()};
      history.push_back(row);
      if (hooks.on_eval) hooks.on_eval(row);
    }
    if (hooks.on_checkpoint && (last || (tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0))) {
      hooks.on_checkpoint(step + 1);
    }
  }
  return history;
}

}  // namespace hyseg
