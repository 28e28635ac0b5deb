#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aim/adapter.hpp"
#include "aim/common.hpp"
#include "aim/params.hpp"
#include "aim/tensor.hpp"
#include "aim/vit.hpp"

namespace aim {

enum class AdaptMode {
  FrozenSpaceOnly,       // linear probe: only the head trains
  FullFinetuneSpaceOnly,
  Spatial,
  SpatialTemporal,
  Aim,
};

inline const char* mode_name(AdaptMode m) {
  switch (m) {
    case AdaptMode::FrozenSpaceOnly: return "frozen";
    case AdaptMode::FullFinetuneSpaceOnly: return "finetune";
    case AdaptMode::Spatial: return "spatial";
    case AdaptMode::SpatialTemporal: return "spatial-temporal";
    case AdaptMode::Aim: return "aim";
  }
  return "?";
}

struct PositionPolicy {
  enum class Kind { All, Top, Bottom, EveryOther };
  Kind kind = Kind::All;
  std::size_t k = 0;  // for Top/Bottom

  std::vector<std::size_t> positions(std::size_t depth) const {
    std::vector<std::size_t> out;
    switch (kind) {
      case Kind::All:
        for (std::size_t i = 0; i < depth; ++i) out.push_back(i);
        break;
      case Kind::Top: {
        std::size_t n = std::min(k, depth);
        for (std::size_t i = depth - n; i < depth; ++i) out.push_back(i);
        break;
      }
      case Kind::Bottom: {
        std::size_t n = std::min(k, depth);
        for (std::size_t i = 0; i < n; ++i) out.push_back(i);
        break;
      }
      case Kind::EveryOther:
        for (std::size_t i = 0; i < depth; i += 2) out.push_back(i);
        break;
    }
    return out;
  }
};

struct AdaptationPolicy {
  AdaptMode mode = AdaptMode::FrozenSpaceOnly;
  double ratio = 0.25;
  PositionPolicy positions;
  bool pre_temporal_adapter = false;
  double scale = 0.5;
  bool temporal_pos_embed = false;

  bool uses_adapters() const {
    return mode == AdaptMode::Spatial || mode == AdaptMode::SpatialTemporal ||
           mode == AdaptMode::Aim;
  }
  bool uses_temporal() const {
    return mode == AdaptMode::SpatialTemporal || mode == AdaptMode::Aim;
  }
  std::size_t adapters_per_block() const {
    switch (mode) {
      case AdaptMode::Spatial: return 1;
      case AdaptMode::SpatialTemporal: return 2 + (pre_temporal_adapter ? 1 : 0);
      case AdaptMode::Aim: return 3 + (pre_temporal_adapter ? 1 : 0);
      default: return 0;
    }
  }
};

struct FreezePartition {
  std::vector<std::string> tunable;
  std::vector<std::string> frozen;

  bool is_tunable(const std::string& name) const {
    return std::find(tunable.begin(), tunable.end(), name) != tunable.end();
  }
};

inline bool is_adapter_param(const std::string& name) {
  return name.find(".adapter.") != std::string::npos;
}

inline bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }

template <class T>
struct AimModel {
  VitConfig config;
  AdaptationPolicy policy;
  ParamStore<T> params;
  std::vector<bool> adapted;  // per block
  AdaptedBlockConfig block_cfg;

  bool any_adapted() const {
    for (bool a : adapted)
      if (a) return true;
    return false;
  }

  // Final tokens [B*T, N+1, D]. sd_rng enables stochastic depth (training only).
  Tensor<T> forward_tokens(const Tensor<T>& video, Rng* sd_rng = nullptr,
                           std::map<std::size_t, AimBlockProbes<T>>* probes = nullptr) const {
    const std::size_t Ntok = config.tokens();
    const std::size_t BT = video.shape()[0] * video.shape()[1];
    Tensor<T> z = prepend_class_and_pos(patchify(video, params, config), params);  // [BT, Ntok, D]
    bool token_major = false;
    for (std::size_t i = 0; i < config.depth; ++i) {
      BlockRunOpts opts;
      if (sd_rng && config.stochastic_depth_rate > 0.0 &&
          sd_rng->uniform() < config.stochastic_depth_rate) {
        opts.drop_attn_branch = opts.drop_mlp_branch = true;
      }
      AimBlockProbes<T> pr;
      if (probes) {
        auto it = probes->find(i);
        if (it != probes->end()) pr = it->second;
      }
      if (adapted[i]) {
        if (!token_major) {
          z = permute(z, {1, 0, 2});  // -> [Ntok, BT, D]
          token_major = true;
        }
        z = aim_block_forward(z, params, i, config.heads, config.frames, block_cfg, opts, pr);
      } else {
        if (token_major) {
          z = permute(z, {1, 0, 2});
          token_major = false;
        }
        z = vit_block(z, params, i, config.heads, opts, pr.spatial);
      }
    }
    if (token_major) z = permute(z, {1, 0, 2});
    (void)Ntok;
    (void)BT;
    return z;
  }

  // Mean of per-frame class tokens, then the classification head.
  Tensor<T> classify(const Tensor<T>& video, Rng* sd_rng = nullptr) const {
    const std::size_t B = video.shape()[0], Tn = video.shape()[1];
    Tensor<T> tokens = forward_tokens(video, sd_rng);
    Tensor<T> cls = take_token(tokens, 0);
    Tensor<T> pooled = mean_axis1(reshape(cls, {B, Tn, config.width}));
    return linear(pooled, params.at("head.weight"), params.at("head.bias"));
  }
};

template <class T>
FreezePartition make_partition(const ParamStore<T>& params, const AdaptationPolicy& policy) {
  FreezePartition fp;
  for (const auto& [name, t] : params) {
    bool tunable = false;
    switch (policy.mode) {
      case AdaptMode::FrozenSpaceOnly:
        tunable = is_head_param(name);
        break;
      case AdaptMode::FullFinetuneSpaceOnly:
        tunable = true;
        break;
      default:
        tunable = is_adapter_param(name) || is_head_param(name) || name == "temporal_pos_embed";
        break;
    }
    (tunable ? fp.tunable : fp.frozen).push_back(name);
  }
  return fp;
}

template <class T>
std::pair<AimModel<T>, FreezePartition> build_model(const VitConfig& config,
                                                    const AdaptationPolicy& policy,
                                                    std::uint64_t seed) {
  config.validate();
  AimModel<T> model;
  model.config = config;
  model.policy = policy;

  Rng rng(seed);
  model.params = init_vit_params<T>(config, rng);

  std::vector<std::size_t> pos = policy.positions.positions(config.depth);
  if (policy.uses_adapters() && pos.empty())
    throw config_error("adaptation enabled but the position policy selects no blocks");

  model.adapted.assign(config.depth, false);
  if (policy.uses_adapters()) {
    AdapterConfig acfg{config.width, policy.ratio, true};
    for (std::size_t i : pos) {
      model.adapted[i] = true;
      const std::string ap = block_prefix(i) + "adapter.";
      init_adapter_params(model.params, ap + "spatial.", acfg, rng);
      if (policy.uses_temporal()) {
        init_adapter_params(model.params, ap + "temporal.", acfg, rng);
        if (policy.pre_temporal_adapter)
          init_adapter_params(model.params, ap + "pre_temporal.", acfg, rng);
      }
      if (policy.mode == AdaptMode::Aim)
        init_adapter_params(model.params, ap + "joint.", acfg, rng);
    }
    if (policy.uses_temporal() && policy.temporal_pos_embed)
      model.params.insert("temporal_pos_embed",
                          normal_init<T>({config.frames, config.width}, 0.02, rng));
    model.block_cfg = AdaptedBlockConfig{
        true,
        policy.uses_temporal(),
        policy.mode == AdaptMode::Aim,
        policy.uses_temporal() && policy.pre_temporal_adapter,
        policy.scale,
        policy.uses_temporal() && policy.temporal_pos_embed,
    };
  }

  FreezePartition fp = make_partition(model.params, policy);
  for (const auto& name : fp.tunable) model.params.at(name).set_requires_grad(true);
  for (const auto& name : fp.frozen) model.params.at(name).set_requires_grad(false);
  return {std::move(model), std::move(fp)};
}

template <class T>
void set_all_requires_grad(AimModel<T>& model, bool rg) {
  for (auto& [name, t] : model.params) t.set_requires_grad(rg);
}

// ---------------------------------------------------------------------------
// Parameter accounting (closed form; no model is built)
// ---------------------------------------------------------------------------

struct ParamCounts {
  std::size_t total = 0;
  std::size_t tunable = 0;
};

inline std::size_t backbone_param_count(const VitConfig& cfg) {
  const std::size_t D = cfg.width, L = cfg.depth, M = cfg.mlp_ratio * cfg.width;
  const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
  std::size_t per_block = 2 * D                 // ln1
                        + D * 3 * D + 3 * D     // qkv
                        + D * D + D             // attn out
                        + 2 * D                 // ln2
                        + D * M + M + M * D + D;  // mlp
  return patch_in * D + D       // patch embed
       + D                      // class token
       + cfg.tokens() * D       // pos embed
       + L * per_block;
}

inline std::size_t head_param_count(const VitConfig& cfg) {
  return cfg.width * cfg.num_classes + cfg.num_classes;
}

inline ParamCounts count_params(const VitConfig& cfg, const AdaptationPolicy& policy) {
  cfg.validate();
  ParamCounts c;
  c.total = backbone_param_count(cfg) + head_param_count(cfg);
  std::size_t adapter_total = 0;
  if (policy.uses_adapters()) {
    AdapterConfig acfg{cfg.width, policy.ratio, true};
    std::size_t blocks = policy.positions.positions(cfg.depth).size();
    adapter_total = blocks * policy.adapters_per_block() * acfg.param_count();
    if (policy.uses_temporal() && policy.temporal_pos_embed)
      adapter_total += cfg.frames * cfg.width;
  }
  c.total += adapter_total;
  switch (policy.mode) {
    case AdaptMode::FrozenSpaceOnly:
      c.tunable = head_param_count(cfg);
      break;
    case AdaptMode::FullFinetuneSpaceOnly:
      c.tunable = c.total;
      break;
    default:
      c.tunable = adapter_total + head_param_count(cfg);
      break;
  }
  return c;
}

// Millions rounded half-up to one decimal (the precision used when a count
// is reported with a decimal point; integer-reported counts truncate this).
inline double millions_rounded(std::size_t count) {
  return std::floor(double(count) / 1e5 + 0.5) / 10.0;
}

}  // namespace aim
