#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "maldnerf/ad/adam.hpp"
#include "maldnerf/ad/tensor.hpp"
#include "maldnerf/scene/scene.hpp"
#include "maldnerf/util/image.hpp"
#include "maldnerf/util/io.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::prior {

using ad::Tensor;

struct DiffusionSchedule {
  int T = 1000;
  std::vector<double> beta;       // [T+1], beta[0] = 0
  std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] = 1 exactly
  static DiffusionSchedule linear(int T = 1000, double beta_lo = 1e-4, double beta_hi = 2e-2);
};

struct Conv {
  Tensor w, b;
};

// low-rank adapter on a FiLM projection: delta W = b · a, rank = a rows
struct Lora {
  Tensor a;  // [r, e_dim]
  Tensor b;  // [2C, r], zero-initialized
};

// Toy conditional latent-diffusion inpainter: wrap-padded conv autoencoder
// (downsample 4, latent channels 4) and a U-shaped denoiser (widths 32–128)
// FiLM-conditioned on timestep + a named embedding token.
struct Prior {
  DiffusionSchedule sched;
  int e_dim = 32;
  int base_w = 32;

  Conv enc1, enc2, enc3;  // 3→32 →pool→ 32→64 →pool→ 64→4
  Conv dec1, dec2, dec3;  // 4→64 →up→ 64→32 →up→ 32→3

  Conv d_enc1a, d_enc1b;  // 9→32, 32→32   @ latent res
  Conv d_enc2a, d_enc2b;  // 32→64, 64→64  @ /2
  Conv d_mid_a, d_mid_b;  // 64→128, 128→128 @ /4
  Conv d_up1a, d_up1b;    // 192→64, 64→64
  Conv d_up2a, d_up2b;    // 96→32, 32→32
  Conv d_out;             // 32→4
  std::vector<Tensor> film_w, film_b;  // 5 stages: [2C, e_dim], [2C]

  std::vector<std::string> tokens;  // tokens[0] = "base"
  std::vector<Tensor> token_rows;   // [e_dim] each
  int lora_rank = 0;
  std::vector<Lora> adapters;  // one per FiLM stage when rank > 0

  static Prior init(uint64_t seed);
  Prior clone() const;  // deep copy (fresh leaves)

  std::vector<Tensor> base_params() const;  // AE + denoiser + base token
  std::vector<Tensor> all_params() const;   // + custom tokens + adapters

  int token_index(const std::string& name) const;  // error on unknown token
};

Tensor encode(const Prior& p, const Tensor& img);   // [B,3,H,W] → [B,4,H/4,W/4]
Tensor decode(const Prior& p, const Tensor& z);     // inverse shape map

// ε̂ from (noisy latent, masked clean latent, latent mask, timestep, token)
Tensor denoise_eps(const Prior& p, const Tensor& z_t, const Tensor& z_cond,
                   const Tensor& m_lat, int t, const std::string& condition);

// Union of 1–4 random axis-aligned rectangles.
Mask random_rect_mask(int h, int w, Rng& rng);

// [1,1,h/4,w/4] weights: 1 where the latent cell's receptive pixels are all
// outside the (halo-dilated) object-removal mask, else 0.
Tensor latent_keep_weights(const Mask& object_mask);

// Σ (ε̂−ε)²·keep / (channels · Σ keep); exactly 0 when keep is all zero.
Tensor masked_eps_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor& keep);

// Autoencoder reconstruction step (pixels under the object mask excluded).
double ae_train_step(Prior& p, const ImageF& image, const Mask& object_mask, ad::Adam& opt,
                     double lr_override = -1.0);

// One DDPM ε-prediction step. The optimizer decides which parameters move
// (base training passes base_params; customization passes adapters + token).
double ddpm_train_step(Prior& p, const ImageF& image, const Mask& train_mask,
                       const Mask& object_mask, const std::string& condition, Rng& rng,
                       ad::Adam& opt, double lr_override = -1.0);

// DDIM timestep ladder: uniform integer strides from t_start down to 0
// inclusive (deduplicated, strictly descending; last entry is 0).
std::vector<int> ddim_taus(int t_start, int n_steps);

// Deterministic DDIM from z (noised to t_start) down to 0 using ε̂ = eps_fn(z, t).
// Returns the final ẑ₀ estimate.
Tensor ddim_denoise(const DiffusionSchedule& sched, Tensor z,
                    const std::function<Tensor(const Tensor&, int)>& eps_fn, int t_start,
                    int n_steps);

struct InpaintRequest {
  Mask mask;
  std::string condition = "base";
  int t_start = 980;
  int n_ddim_steps = 20;
  uint64_t seed = 0;
  uint64_t view = 0;  // per-view stream key for seeding
};

// Hard-blend → encode → noise at t_start → uniform-stride DDIM → decode →
// re-composite (unmasked pixels bit-identical to original).
ImageF partial_inpaint(const InpaintRequest& req, const ImageF& rendered,
                       const ImageF& original, const Prior& p);

// Per-scene low-rank customization on the scene's original captures.
// rank 0 returns the prior unchanged.
Prior customize(const Prior& p, const scene::SceneDataset& scene, int rank, int steps,
                uint64_t seed);

struct OracleShift {
  double rho = 0.3;                         // 3×3 blur mix ratio
  double c[3] = {0.02, -0.01, 0.01};        // constant color offset
};

// Ground-truth-backed stand-in prior with controllable per-view inconsistency
// (low-frequency field of amplitude sigma_incon) and texture shift, applied
// inside the mask only.
ImageF oracle_inpaint(const InpaintRequest& req, const ImageF& rendered,
                      const ImageF& original, const ImageF& gt_removed, double sigma_incon,
                      const OracleShift& shift);

// Versioned blob + sidecar manifest (token names, adapter rank).
void save_prior(const Prior& p, const std::string& path);
Prior load_prior(const std::string& path);

inline constexpr uint32_t kPriorBlobKind = 3;

}  // namespace maldnerf::prior
