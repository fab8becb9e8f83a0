#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

enum class ProjectorKind { avg_pool, pixel_shuffle, perceiver, ldp_v2, mlp_identity };

inline const char* to_string(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::avg_pool: return "avg_pool";
    case ProjectorKind::pixel_shuffle: return "pixel_shuffle";
    case ProjectorKind::perceiver: return "perceiver";
    case ProjectorKind::ldp_v2: return "ldp_v2";
    case ProjectorKind::mlp_identity: return "mlp_identity";
  }
  return "?";
}

inline ProjectorKind projector_kind_from_string(const std::string& s) {
  if (s == "avg_pool") return ProjectorKind::avg_pool;
  if (s == "pixel_shuffle") return ProjectorKind::pixel_shuffle;
  if (s == "perceiver") return ProjectorKind::perceiver;
  if (s == "ldp_v2") return ProjectorKind::ldp_v2;
  if (s == "mlp_identity") return ProjectorKind::mlp_identity;
  throw std::invalid_argument("unknown projector kind: " + s);
}

struct ProjectorConfig {
  ProjectorKind kind = ProjectorKind::avg_pool;
  int s = 3;  // downsample ratio; token count shrinks by s^2
  int d_vision = 16;
  int d_model = 64;
  int num_latents = 0;  // perceiver; must equal (W/s)*(H/s)
  int heads = 4;
};

// Maps an encoder feature map [B, W, H, Dv] to a vision-token sequence
// [B, n_tokens, Dt]. Every compressing kind emits (W*H)/s^2 tokens.
struct Projector {
  ProjectorConfig cfg;

  Mlp2 mlp;           // avg_pool / mlp_identity: Dv -> Dt -> Dt
  Linear ps_linear;   // pixel_shuffle: s^2*Dv -> Dt
  Tensor latents;     // perceiver queries [num_latents, Dt]
  MultiHeadAttention cross;
  LayerNorm pcv_ln;
  Mlp2 pcv_mlp;
  Linear ldp_pre;     // pointwise Dv -> Dt
  Tensor dw_kernel;   // [s, s, Dt]
  Tensor dw_bias;     // [Dt]
  Linear ldp_post;    // pointwise Dt -> Dt

  Projector() = default;

  Projector(const ProjectorConfig& c, Rng& rng) : cfg(c) {
    switch (cfg.kind) {
      case ProjectorKind::avg_pool:
      case ProjectorKind::mlp_identity:
        mlp = Mlp2(cfg.d_vision, cfg.d_model, cfg.d_model, rng);
        break;
      case ProjectorKind::pixel_shuffle:
        ps_linear = Linear(cfg.s * cfg.s * cfg.d_vision, cfg.d_model, rng);
        break;
      case ProjectorKind::perceiver:
        if (cfg.num_latents <= 0)
          throw std::invalid_argument("perceiver projector needs num_latents");
        latents = Tensor::randn({cfg.num_latents, cfg.d_model}, rng, 0.02);
        cross = MultiHeadAttention(cfg.d_model, cfg.d_vision, cfg.d_model, cfg.d_model,
                                   cfg.heads, rng);
        pcv_ln = LayerNorm(cfg.d_model);
        pcv_mlp = Mlp2(cfg.d_model, cfg.d_model, cfg.d_model, rng);
        break;
      case ProjectorKind::ldp_v2:
        ldp_pre = Linear(cfg.d_vision, cfg.d_model, rng);
        dw_kernel = Tensor::randn({cfg.s, cfg.s, cfg.d_model}, rng, 0.02);
        dw_bias = Tensor::zeros({cfg.d_model});
        ldp_post = Linear(cfg.d_model, cfg.d_model, rng);
        break;
    }
  }

  int token_count(int W, int H) const {
    if (cfg.kind == ProjectorKind::mlp_identity) return W * H;
    if (W % cfg.s != 0 || H % cfg.s != 0)
      throw std::invalid_argument("projector: feature map not divisible by s");
    return (W / cfg.s) * (H / cfg.s);
  }

  Tensor apply(const Tensor& feat) const {
    if (feat.ndim() != 4) throw std::invalid_argument("projector: expected [B,W,H,Dv]");
    int B = feat.dim(0), W = feat.dim(1), H = feat.dim(2);
    int n = token_count(W, H);
    switch (cfg.kind) {
      case ProjectorKind::avg_pool:
        return mlp(reshape(avg_pool_blocks(feat, cfg.s), {B, n, cfg.d_vision}));
      case ProjectorKind::mlp_identity:
        return mlp(reshape(feat, {B, n, cfg.d_vision}));
      case ProjectorKind::pixel_shuffle:
        return ps_linear(
            reshape(space_to_depth(feat, cfg.s), {B, n, cfg.s * cfg.s * cfg.d_vision}));
      case ProjectorKind::perceiver: {
        if (n != cfg.num_latents)
          throw std::invalid_argument("perceiver: num_latents does not preserve ratio");
        Tensor flat = reshape(feat, {B, W * H, cfg.d_vision});
        Tensor queries = add(Tensor::zeros({B, cfg.num_latents, cfg.d_model}), latents);
        Tensor attn = cross(queries, flat);
        return add(attn, pcv_mlp(pcv_ln(attn)));
      }
      case ProjectorKind::ldp_v2: {
        Tensor point = ldp_pre(reshape(feat, {B, W * H, cfg.d_vision}));
        Tensor conv = depthwise_conv_stride(reshape(point, {B, W, H, cfg.d_model}),
                                            dw_kernel, dw_bias, cfg.s);
        return ldp_post(reshape(conv, {B, n, cfg.d_model}));
      }
    }
    throw std::logic_error("projector: unreachable");
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    switch (cfg.kind) {
      case ProjectorKind::avg_pool:
      case ProjectorKind::mlp_identity:
        mlp.register_params(reg, prefix + ".mlp");
        break;
      case ProjectorKind::pixel_shuffle:
        ps_linear.register_params(reg, prefix + ".linear");
        break;
      case ProjectorKind::perceiver:
        reg.add(prefix + ".latents", latents);
        cross.register_params(reg, prefix + ".cross");
        pcv_ln.register_params(reg, prefix + ".ln");
        pcv_mlp.register_params(reg, prefix + ".mlp");
        break;
      case ProjectorKind::ldp_v2:
        ldp_pre.register_params(reg, prefix + ".pre");
        reg.add(prefix + ".dw_kernel", dw_kernel);
        reg.add(prefix + ".dw_bias", dw_bias);
        ldp_post.register_params(reg, prefix + ".post");
        break;
    }
  }
};

}  // namespace vtlab
