#pragma once

// Four-stage hybrid encoder (Mamba mixers early, attention late) and the
// all-linear multi-scale decoder.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hyseg/attention.hpp"
#include "hyseg/embedding.hpp"
#include "hyseg/module.hpp"
#include "hyseg/ssm.hpp"

namespace hyseg {

enum class MixerKind { kMamba, kAttention };

inline const char* to_string(MixerKind k) { return k == MixerKind::kMamba ? "mamba" : "attention"; }

struct StageConfig {
  std::size_t embed_dim = 0;
  std::size_t depth = 2;
  MixerKind mixer = MixerKind::kMamba;
  std::size_t heads = 1;      // attention stages only
  std::size_t reduction = 1;  // attention key/value reduction ratio
  Triple kernel{3, 3, 3};
  Triple stride{2, 2, 2};
  Triple padding{1, 1, 1};
};

struct ModelConfig {
  std::size_t in_channels = 4;
  std::size_t num_classes = 4;
  std::array<StageConfig, 4> stages{};
  std::size_t decoder_dim = 192;
  bool deep_supervision = false;
  std::vector<double> ds_weights{0.5, 0.25, 0.125};
  SsmConfig ssm{};
  std::size_t mlp_ratio = 4;
  bool use_rope = true;
  double rope_base = 10000.0;

  static ModelConfig defaults() {
    ModelConfig c;
    const std::array<std::size_t, 4> dims{24, 48, 96, 192};
    const std::array<std::size_t, 4> heads{1, 1, 2, 4};
    for (std::size_t i = 0; i < 4; ++i) {
      auto& s = c.stages[i];
      s.embed_dim = dims[i];
      s.depth = 2;
      s.mixer = i < 2 ? MixerKind::kMamba : MixerKind::kAttention;
      s.heads = heads[i];
      s.reduction = 1;
      if (i == 0) {
        s.kernel = {7, 7, 7};
        s.stride = {4, 4, 4};
        s.padding = {3, 3, 3};
      }
    }
    return c;
  }

  PatchEmbedConfig patch_config(std::size_t stage) const {
    const auto& s = stages[stage];
    return {stage == 0 ? in_channels : stages[stage - 1].embed_dim, s.embed_dim, s.kernel, s.stride, s.padding};
  }

  // Channel width the rotary table rotates at a stage: whole token for Mamba
  // stages (single "head"), head_dim for attention stages.
  std::size_t rope_dim(std::size_t stage) const {
    const auto& s = stages[stage];
    return s.mixer == MixerKind::kMamba ? s.embed_dim : s.embed_dim / s.heads;
  }

  void validate() const {
    if (in_channels == 0) throw ConfigError("model.in_channels must be >= 1");
    if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
    if (decoder_dim == 0) throw ConfigError("model.decoder_dim must be >= 1");
    if (ds_weights.size() != 3) throw ConfigError("model.ds_weights must list 3 weights (stages 2-4)");
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = stages[i];
      const std::string where = "model.stages[" + std::to_string(i) + "]";
      if (s.embed_dim == 0) throw ConfigError(where + ".embed_dim must be >= 1");
      for (int a = 0; a < 3; ++a) {
        if (s.stride[a] < 2) throw ConfigError(where + ".stride must be > 1 so stage grids shrink");
      }
      try {
        patch_config(i).validate();
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
      if (s.mixer == MixerKind::kAttention) {
        if (s.heads == 0 || s.embed_dim % s.heads != 0) {
          throw ConfigError(where + ".embed_dim " + std::to_string(s.embed_dim) + " not divisible by heads " +
                            std::to_string(s.heads));
        }
        if (s.reduction < 1) throw ConfigError(where + ".reduction must be >= 1");
      }
      if (use_rope && rope_dim(i) % 6 != 0) {
        throw ConfigError(where + ": rotary width " + std::to_string(rope_dim(i)) + " not divisible by 6");
      }
    }
  }

  // Token grids per stage for an input extent. Throws naming the offending stage
  // when the grids cannot be fused back to the input resolution.
  std::array<Triple, 4> stage_grids(const Triple& input) const {
    std::array<Triple, 4> grids{};
    Triple cur = input;
    for (std::size_t i = 0; i < 4; ++i) {
      try {
        grids[i] = patch_config(i).output_grid(cur);
      } catch (const Error& e) {
        throw ConfigError("stage " + std::to_string(i + 1) + ": " + e.what());
      }
      cur = grids[i];
    }
    for (int a = 0; a < 3; ++a) {
      if (grids[0][a] * stages[0].stride[a] != input[a]) {
        throw ConfigError("stage 1: grid " + std::to_string(grids[0][a]) + " x stride " +
                          std::to_string(stages[0].stride[a]) + " does not recover input extent " +
                          std::to_string(input[a]));
      }
      for (std::size_t i = 1; i < 4; ++i) {
        if (grids[0][a] % grids[i][a] != 0) {
          throw ConfigError("stage " + std::to_string(i + 1) + ": grid extent " + std::to_string(grids[i][a]) +
                            " does not divide stage-1 extent " + std::to_string(grids[0][a]));
        }
      }
    }
    return grids;
  }
};

template <typename T>
struct StageFeatures {
  std::array<Tensor<T>, 4> maps;  // X_i [B, C_i, D_i, H_i, W_i]
  std::array<Triple, 4> grids{};
};

template <typename T>
struct SegmentationOutput {
  Tensor<T> logits;       // [B, K, stage-1 grid]
  Tensor<T> full_logits;  // [B, K, input grid]
  std::vector<Tensor<T>> aux;  // deep-supervision logits for stages 2-4
};

template <typename T>
struct StageParams {
  PatchEmbedParams<T> embed;
  std::vector<MambaBlockParams<T>> mamba_blocks;
  std::vector<TransformerBlockParams<T>> attention_blocks;
};

template <typename T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    InitRng rng(seed);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = cfg_.stages[i];
      auto& st = stages_[i];
      st.embed = PatchEmbedParams<T>::init(rng, cfg_.patch_config(i));
      for (std::size_t b = 0; b < s.depth; ++b) {
        if (s.mixer == MixerKind::kMamba) {
          st.mamba_blocks.push_back(MambaBlockParams<T>::init(rng, s.embed_dim, cfg_.ssm, cfg_.mlp_ratio));
        } else {
          st.attention_blocks.push_back(TransformerBlockParams<T>::init(rng, s.embed_dim, s.heads, s.reduction,
                                                                        cfg_.mlp_ratio, cfg_.use_rope));
        }
      }
    }
    for (std::size_t i = 0; i < 4; ++i)
      proj_[i] = LinearParams<T>::init(rng, cfg_.stages[i].embed_dim, cfg_.decoder_dim);
    fuse_ = LinearParams<T>::init(rng, 4 * cfg_.decoder_dim, cfg_.decoder_dim);
    head_ = LinearParams<T>::init(rng, cfg_.decoder_dim, cfg_.num_classes);
    if (cfg_.deep_supervision) {
      for (std::size_t i = 1; i < 4; ++i)
        ds_heads_.push_back(LinearParams<T>::init(rng, cfg_.stages[i].embed_dim, cfg_.num_classes));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  StageParams<T>& stage(std::size_t i) { return stages_[i]; }
  const StageParams<T>& stage(std::size_t i) const { return stages_[i]; }
  LinearParams<T>& head() { return head_; }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string pre = "encoder.stage" + std::to_string(i + 1);
      stages_[i].embed.collect(out, pre + ".embed");
      for (std::size_t b = 0; b < stages_[i].mamba_blocks.size(); ++b)
        stages_[i].mamba_blocks[b].collect(out, pre + ".block" + std::to_string(b));
      for (std::size_t b = 0; b < stages_[i].attention_blocks.size(); ++b)
        stages_[i].attention_blocks[b].collect(out, pre + ".block" + std::to_string(b));
    }
    for (std::size_t i = 0; i < 4; ++i) proj_[i].collect(out, "decoder.proj" + std::to_string(i + 1));
    fuse_.collect(out, "decoder.fuse");
    head_.collect(out, "decoder.head");
    for (std::size_t i = 0; i < ds_heads_.size(); ++i) ds_heads_[i].collect(out, "ds.head" + std::to_string(i + 2));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  StageFeatures<T> encode(const Tensor<T>& volume) const {
    check_input(volume);
    const Triple input{volume.shape()[2], volume.shape()[3], volume.shape()[4]};
    StageFeatures<T> f;
    f.grids = cfg_.stage_grids(input);
    Tensor<T> x = volume;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = cfg_.stages[i];
      const auto& st = stages_[i];
      auto tg = patch_embed(x, st.embed);
      auto tokens = tg.tokens;
      const std::size_t B = tokens.shape()[0], N = tokens.shape()[1], C = tokens.shape()[2];
      if (s.mixer == MixerKind::kMamba) {
        if (cfg_.use_rope) {
          const RotaryFrequencies freqs(C, cfg_.rope_base);
          tokens = reshape(apply_rope3d(reshape(tokens, {B, 1, N, C}), tg.grid, freqs), {B, N, C});
        }
        for (const auto& blk : st.mamba_blocks) tokens = mamba_block_tokens(tokens, blk);
      } else {
        RopeContext rope;
        if (cfg_.use_rope) rope = RopeContext::for_grid(tg.grid, C / s.heads, cfg_.rope_base);
        for (const auto& blk : st.attention_blocks) tokens = transformer_block_tokens(tokens, blk, rope);
      }
      f.maps[i] = tokens_to_volume(tokens, tg.grid);
      x = f.maps[i];
    }
    return f;
  }

  SegmentationOutput<T> decode(const StageFeatures<T>& f) const {
    const Triple g1 = f.grids[0];
    std::vector<Tensor<T>> ups;
    for (std::size_t i = 0; i < 4; ++i) {
      const Triple gi = f.grids[i];
      auto projected = tokens_to_volume(apply(proj_[i], volume_to_tokens(f.maps[i])), gi);
      const Triple factor{g1[0] / gi[0], g1[1] / gi[1], g1[2] / gi[2]};
      auto up = upsample_trilinear(projected, factor);
      if (Triple{up.shape()[2], up.shape()[3], up.shape()[4]} != g1) {
        throw DimensionError("decoder: stage " + std::to_string(i + 1) + " upsampled to " + to_string(up.shape()) +
                             " instead of the stage-1 grid");
      }
      ups.push_back(up);
    }
    auto fused = apply(fuse_, volume_to_tokens(concat(ups, 1)));
    SegmentationOutput<T> out;
    out.logits = tokens_to_volume(apply(head_, fused), g1);
    out.full_logits = upsample_trilinear(out.logits, cfg_.stages[0].stride);
    for (std::size_t i = 0; i < ds_heads_.size(); ++i) {
      out.aux.push_back(tokens_to_volume(apply(ds_heads_[i], volume_to_tokens(f.maps[i + 1])), f.grids[i + 1]));
    }
    return out;
  }

  SegmentationOutput<T> forward(const Tensor<T>& volume) const { return decode(encode(volume)); }

 private:
  void check_input(const Tensor<T>& volume) const {
    if (volume.dim() != 5 || volume.shape()[1] != cfg_.in_channels) {
      throw DimensionError("model expects [B," + std::to_string(cfg_.in_channels) + ",D,H,W], got " +
                           to_string(volume.shape()));
    }
  }

  ModelConfig cfg_;
  std::array<StageParams<T>, 4> stages_;
  std::array<LinearParams<T>, 4> proj_;
  LinearParams<T> fuse_;
  LinearParams<T> head_;
  std::vector<LinearParams<T>> ds_heads_;
};

}  // namespace hyseg
