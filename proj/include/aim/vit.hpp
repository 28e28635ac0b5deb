#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/params.hpp"
#include "aim/tensor.hpp"

namespace aim {

struct VitConfig {
  std::size_t image_size = 8;   // H == W
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t width = 32;       // D
  std::size_t depth = 2;        // L
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t frames = 4;       // T
  std::size_t num_classes = 2;
  double stochastic_depth_rate = 0.0;

  std::size_t num_patches() const {
    std::size_t per_side = image_size / patch_size;
    return per_side * per_side;
  }
  std::size_t tokens() const { return num_patches() + 1; }

  void validate() const {
    if (image_size % patch_size != 0)
      throw config_error("image size " + std::to_string(image_size) +
                         " not divisible by patch size " + std::to_string(patch_size));
    if (width % heads != 0)
      throw config_error("width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
    if (stochastic_depth_rate < 0.0 || stochastic_depth_rate > 1.0)
      throw config_error("stochastic depth rate out of [0,1]");
  }
};

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

// Frozen backbone + head parameters, torch-style init for the linear layers.
template <class T>
ParamStore<T> init_vit_params(const VitConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore<T> ps;
  const std::size_t D = cfg.width;
  const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
  auto linear_w = [&](std::size_t in, std::size_t out) {
    return uniform_init<T>({in, out}, 1.0 / std::sqrt(double(in)), rng);
  };

  ps.insert("patch_embed.weight", linear_w(patch_in, D));
  ps.insert("patch_embed.bias", Tensor<T>::zeros({D}));
  ps.insert("class_token", Tensor<T>::zeros({1, D}));
  ps.insert("pos_embed", normal_init<T>({cfg.tokens(), D}, 0.02, rng));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = block_prefix(i);
    ps.insert(p + "ln1.gamma", Tensor<T>::full({D}, T(1)));
    ps.insert(p + "ln1.beta", Tensor<T>::zeros({D}));
    ps.insert(p + "attn.qkv.weight", linear_w(D, 3 * D));
    ps.insert(p + "attn.qkv.bias", Tensor<T>::zeros({3 * D}));
    ps.insert(p + "attn.out.weight", linear_w(D, D));
    ps.insert(p + "attn.out.bias", Tensor<T>::zeros({D}));
    ps.insert(p + "ln2.gamma", Tensor<T>::full({D}, T(1)));
    ps.insert(p + "ln2.beta", Tensor<T>::zeros({D}));
    ps.insert(p + "mlp.fc1.weight", linear_w(D, cfg.mlp_ratio * D));
    ps.insert(p + "mlp.fc1.bias", Tensor<T>::zeros({cfg.mlp_ratio * D}));
    ps.insert(p + "mlp.fc2.weight", linear_w(cfg.mlp_ratio * D, D));
    ps.insert(p + "mlp.fc2.bias", Tensor<T>::zeros({D}));
  }
  ps.insert("head.weight", normal_init<T>({D, cfg.num_classes}, 0.02, rng));
  ps.insert("head.bias", Tensor<T>::zeros({cfg.num_classes}));
  return ps;
}

// Splits each frame into row-major P x P patches (values ordered channel,
// row, col within a patch) and projects them to width D.
template <class T>
Tensor<T> patchify(const Tensor<T>& frames, const ParamStore<T>& params, const VitConfig& cfg) {
  if (frames.rank() != 5)
    throw shape_error("patchify expects [B,T,C,H,W], got " + shape_str(frames.shape()));
  const std::size_t B = frames.shape()[0], Tn = frames.shape()[1], C = frames.shape()[2];
  const std::size_t H = frames.shape()[3], W = frames.shape()[4];
  if (H % cfg.patch_size != 0 || W % cfg.patch_size != 0)
    throw config_error("frame size " + std::to_string(H) + "x" + std::to_string(W) +
                       " not divisible by patch size " + std::to_string(cfg.patch_size));
  const std::size_t P = cfg.patch_size;
  const std::size_t per_side = H / P;
  const std::size_t N = per_side * (W / P);
  const std::size_t patch_in = P * P * C;

  std::vector<T> patches(B * Tn * N * patch_in);
  auto fv = frames.value();
  for (std::size_t s = 0; s < B * Tn; ++s) {
    const T* img = &fv[s * C * H * W];
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t prow = n / (W / P), pcol = n % (W / P);
      T* dst = &patches[(s * N + n) * patch_in];
      std::size_t k = 0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < P; ++y)
          for (std::size_t x = 0; x < P; ++x)
            dst[k++] = img[c * H * W + (prow * P + y) * W + (pcol * P + x)];
    }
  }
  Tensor<T> flat({B * Tn, N, patch_in}, std::move(patches));
  return linear(flat, params.at("patch_embed.weight"), params.at("patch_embed.bias"));
}

// z0 = [class; patches] + pos_embed
template <class T>
Tensor<T> prepend_class_and_pos(const Tensor<T>& xp, const ParamStore<T>& params) {
  Tensor<T> z = prepend_token(xp, params.at("class_token"));
  return add_broadcast_rows(z, params.at("pos_embed"));
}

template <class T>
struct AttentionProbe {
  Shape shape;            // [S, heads, L, L]
  std::vector<T> probs;   // row-stochastic per (s, head, query)
};

// Scaled dot-product multi-head self-attention over z[S, L, D]. The first
// axis is batch, the second is the sequence the attention mixes.
template <class T>
Tensor<T> msa(const Tensor<T>& z, const Tensor<T>& qkv_w, const Tensor<T>& qkv_b,
              const Tensor<T>& out_w, const Tensor<T>& out_b, std::size_t heads,
              AttentionProbe<T>* probe = nullptr) {
  if (z.rank() != 3) throw shape_error("msa expects [S,L,D], got " + shape_str(z.shape()));
  const std::size_t S = z.shape()[0], L = z.shape()[1], D = z.shape()[2];
  if (D % heads != 0) throw config_error("msa: width not divisible by head count");
  const std::size_t Dh = D / heads;

  Tensor<T> qkv = linear(z, qkv_w, qkv_b);  // [S, L, 3D]
  auto split_heads = [&](const Tensor<T>& t) {
    // [S, L, D] -> [S*heads, L, Dh]
    Tensor<T> r = reshape(t, {S, L, heads, Dh});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {S * heads, L, Dh});
  };
  Tensor<T> q = split_heads(slice_last(qkv, 0, D));
  Tensor<T> k = split_heads(slice_last(qkv, D, D));
  Tensor<T> v = split_heads(slice_last(qkv, 2 * D, D));

  Tensor<T> kt = permute(k, {0, 2, 1});  // [S*heads, Dh, L]
  Tensor<T> scores = scale(bmm(q, kt), T(1.0 / std::sqrt(double(Dh))));
  Tensor<T> attn = softmax_last(scores);  // [S*heads, L, L]
  if (probe) {
    probe->shape = {S, heads, L, L};
    probe->probs.assign(attn.value().begin(), attn.value().end());
  }
  Tensor<T> ctx = bmm(attn, v);  // [S*heads, L, Dh]
  ctx = reshape(ctx, {S, heads, L, Dh});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {S, L, D});
  return linear(ctx, out_w, out_b);
}

template <class T>
Tensor<T> msa(const Tensor<T>& z, const ParamStore<T>& params, const std::string& prefix,
              std::size_t heads, AttentionProbe<T>* probe = nullptr) {
  return msa(z, params.at(prefix + "attn.qkv.weight"), params.at(prefix + "attn.qkv.bias"),
             params.at(prefix + "attn.out.weight"), params.at(prefix + "attn.out.bias"), heads,
             probe);
}

template <class T>
Tensor<T> mlp(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix) {
  Tensor<T> h = linear(x, params.at(prefix + "mlp.fc1.weight"), params.at(prefix + "mlp.fc1.bias"));
  h = gelu(h);
  return linear(h, params.at(prefix + "mlp.fc2.weight"), params.at(prefix + "mlp.fc2.bias"));
}

struct BlockRunOpts {
  bool drop_attn_branch = false;  // stochastic depth, decided by the caller
  bool drop_mlp_branch = false;
};

// z' = z + MSA(LN1(z)); out = z' + MLP(LN2(z'))
template <class T>
Tensor<T> vit_block(const Tensor<T>& z, const ParamStore<T>& params, std::size_t block,
                    std::size_t heads, const BlockRunOpts& opts = {},
                    AttentionProbe<T>* probe = nullptr) {
  const std::string p = block_prefix(block);
  Tensor<T> zp = z;
  if (!opts.drop_attn_branch) {
    Tensor<T> h = layer_norm(z, params.at(p + "ln1.gamma"), params.at(p + "ln1.beta"));
    zp = add(z, msa(h, params, p, heads, probe));
  }
  if (opts.drop_mlp_branch) return zp;
  Tensor<T> h2 = layer_norm(zp, params.at(p + "ln2.gamma"), params.at(p + "ln2.beta"));
  return add(zp, mlp(h2, params, p));
}

// Per-frame ViT encoding: video [B,T,C,H,W] -> final tokens [B*T, N+1, D].
template <class T>
Tensor<T> space_only_encode(const Tensor<T>& video, const ParamStore<T>& params,
                            const VitConfig& cfg) {
  Tensor<T> z = prepend_class_and_pos(patchify(video, params, cfg), params);
  for (std::size_t i = 0; i < cfg.depth; ++i) z = vit_block(z, params, i, cfg.heads);
  return z;
}

// Frames processed independently; per-frame class tokens averaged, then head.
template <class T>
Tensor<T> space_only_forward(const Tensor<T>& video, const ParamStore<T>& params,
                             const VitConfig& cfg) {
  const std::size_t B = video.shape()[0], Tn = video.shape()[1];
  Tensor<T> tokens = space_only_encode(video, params, cfg);
  Tensor<T> cls = take_token(tokens, 0);                       // [B*T, D]
  Tensor<T> pooled = mean_axis1(reshape(cls, {B, Tn, cfg.width}));  // [B, D]
  return linear(pooled, params.at("head.weight"), params.at("head.bias"));
}

}  // namespace aim
