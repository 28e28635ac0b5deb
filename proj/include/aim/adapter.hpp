#pragma once

#include <cmath>
#include <string>

#include "aim/common.hpp"
#include "aim/params.hpp"
#include "aim/tensor.hpp"
#include "aim/vit.hpp"

namespace aim {

struct AdapterConfig {
  std::size_t width = 0;   // D
  double ratio = 0.25;     // r in (0, 1]
  bool internal_skip = true;

  std::size_t bottleneck() const {
    auto b = std::size_t(std::floor(ratio * double(width)));
    if (b < 1) throw config_error("adapter bottleneck would be zero (D=" + std::to_string(width) +
                                  ", r=" + std::to_string(ratio) + ")");
    return b;
  }
  // two FC layers with biases
  std::size_t param_count() const { return 2 * width * bottleneck() + bottleneck() + width; }
};

// Down projection randomly initialized, up projection exactly zero so a fresh
// adapter is the identity (with skip) or the zero map (without).
template <class T>
void init_adapter_params(ParamStore<T>& ps, const std::string& prefix, const AdapterConfig& cfg,
                         Rng& rng) {
  const std::size_t D = cfg.width, b = cfg.bottleneck();
  ps.insert(prefix + "down.weight", uniform_init<T>({D, b}, 1.0 / std::sqrt(double(D)), rng));
  ps.insert(prefix + "down.bias", Tensor<T>::zeros({b}));
  ps.insert(prefix + "up.weight", Tensor<T>::zeros({b, D}));
  ps.insert(prefix + "up.bias", Tensor<T>::zeros({D}));
}

template <class T>
Tensor<T> adapter_forward(const Tensor<T>& h, const ParamStore<T>& params,
                          const std::string& prefix, bool internal_skip) {
  Tensor<T> core = linear(h, params.at(prefix + "down.weight"), params.at(prefix + "down.bias"));
  core = gelu(core);
  core = linear(core, params.at(prefix + "up.weight"), params.at(prefix + "up.bias"));
  return internal_skip ? add(h, core) : core;
}

// rearrange 'n (b t) d -> t (b n) d'
template <class T>
Tensor<T> temporal_reshape(const Tensor<T>& z, std::size_t frames) {
  if (z.rank() != 3) throw shape_error("temporal_reshape expects rank 3, got " + shape_str(z.shape()));
  const std::size_t Ntok = z.shape()[0], BT = z.shape()[1], D = z.shape()[2];
  if (BT % frames != 0)
    throw shape_error("temporal_reshape: axis " + std::to_string(BT) + " not divisible by T=" +
                      std::to_string(frames));
  const std::size_t B = BT / frames;
  // [n, (b t), d] -> [n, b, t, d] -> [t, b, n, d] -> [t, (b n), d]
  Tensor<T> r = reshape(z, {Ntok, B, frames, D});
  r = permute(r, {2, 1, 0, 3});
  return reshape(r, {frames, B * Ntok, D});
}

// rearrange 't (b n) d -> n (b t) d'
template <class T>
Tensor<T> temporal_reshape_inverse(const Tensor<T>& zt, std::size_t num_tokens) {
  if (zt.rank() != 3) throw shape_error("temporal_reshape_inverse expects rank 3");
  const std::size_t Tn = zt.shape()[0], BN = zt.shape()[1], D = zt.shape()[2];
  if (BN % num_tokens != 0)
    throw shape_error("temporal_reshape_inverse: axis " + std::to_string(BN) +
                      " not divisible by n=" + std::to_string(num_tokens));
  const std::size_t B = BN / num_tokens;
  Tensor<T> r = reshape(zt, {Tn, B, num_tokens, D});
  r = permute(r, {2, 1, 0, 3});
  return reshape(r, {num_tokens, B * Tn, D});
}

struct AdaptedBlockConfig {
  bool spatial_adapter = false;
  bool temporal_adapter = false;
  bool joint_adapter = false;
  bool pre_temporal_adapter = false;
  double scale = 0.5;               // s, joint term only
  bool temporal_pos_embed = false;  // learned [T, D] in the T-MSA path
};

template <class T>
struct AimBlockProbes {
  AttentionProbe<T>* temporal = nullptr;
  AttentionProbe<T>* spatial = nullptr;
};

// Adapted block over z[N+1, B*T, D] (token-major layout). T-MSA and S-MSA
// call the same attention weights; they differ only in which axis is the
// sequence. All three stages degrade to the plain block when their adapters
// are freshly initialized.
template <class T>
Tensor<T> aim_block_forward(const Tensor<T>& z, const ParamStore<T>& params, std::size_t block,
                            std::size_t heads, std::size_t frames, const AdaptedBlockConfig& cfg,
                            const BlockRunOpts& opts = {}, AimBlockProbes<T> probes = {}) {
  const std::string p = block_prefix(block);
  const std::string ap = p + "adapter.";
  const std::size_t Ntok = z.shape()[0], BT = z.shape()[1], D = z.shape()[2];
  if (BT % frames != 0)
    throw shape_error("aim_block_forward: batch axis not divisible by frame count");
  (void)D;

  Tensor<T> cur = z;

  // temporal adaptation
  if (cfg.temporal_adapter && !opts.drop_attn_branch) {
    Tensor<T> h = layer_norm(cur, params.at(p + "ln1.gamma"), params.at(p + "ln1.beta"));
    if (cfg.pre_temporal_adapter)
      h = adapter_forward(h, params, ap + "pre_temporal.", /*internal_skip=*/true);
    Tensor<T> ht = temporal_reshape(h, frames);  // [T, B*(N+1), D]
    if (cfg.temporal_pos_embed) ht = add_broadcast_mid(ht, params.at("temporal_pos_embed"));
    Tensor<T> seq = permute(ht, {1, 0, 2});      // [B*(N+1), T, D]
    Tensor<T> att = msa(seq, params, p, heads, probes.temporal);
    att = temporal_reshape_inverse(permute(att, {1, 0, 2}), Ntok);
    Tensor<T> adapted = adapter_forward(att, params, ap + "temporal.", /*internal_skip=*/false);
    cur = add(cur, adapted);
  }

  // spatial adaptation
  if (!opts.drop_attn_branch) {
    Tensor<T> h = layer_norm(cur, params.at(p + "ln1.gamma"), params.at(p + "ln1.beta"));
    Tensor<T> seq = permute(h, {1, 0, 2});  // [B*T, N+1, D]
    Tensor<T> att = permute(msa(seq, params, p, heads, probes.spatial), {1, 0, 2});
    if (cfg.spatial_adapter)
      att = adapter_forward(att, params, ap + "spatial.", /*internal_skip=*/true);
    cur = add(cur, att);
  }

  // joint adaptation
  if (!opts.drop_mlp_branch) {
    Tensor<T> h = layer_norm(cur, params.at(p + "ln2.gamma"), params.at(p + "ln2.beta"));
    Tensor<T> out = add(cur, mlp(h, params, p));
    if (cfg.joint_adapter) {
      Tensor<T> j = adapter_forward(h, params, ap + "joint.", /*internal_skip=*/false);
      out = add(out, scale(j, T(cfg.scale)));
    }
    cur = out;
  }
  return cur;
}

}  // namespace aim
