#pragma once

#include <cstdint>
#include <vector>

#include "maldnerf/ad/tensor.hpp"
#include "maldnerf/util/image.hpp"
#include "maldnerf/util/io.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::adv {

using ad::Tensor;

struct AdvConfig {
  int patch_size = 16;
  int candidate_size = 32;   // importance-sampling window, sliced into patches
  double threshold = 0.5;    // minimum inpainting fraction per candidate
  int r_blocks = 4;
  int base_channels = 32;
  int max_channels = 256;
};

// C^m: keep pixels where the mask is set, zero elsewhere.
// pixels [B,3,P,P], mask [B,1,P,P] of 0/1 values.
Tensor apply_mask(const Tensor& pixels, const Tensor& mask);

// Convert per-patch byte masks into a [B,1,P,P] 0/1 tensor.
Tensor mask_tensor(const std::vector<Mask>& masks);

struct ResBlock {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor proj_w, proj_b;  // 1x1 skip projection
};

struct Discriminator {
  AdvConfig cfg;
  Tensor stem_w, stem_b;
  std::vector<ResBlock> blocks;
  Tensor head_w, head_b;  // zero-initialized scalar head

  static Discriminator init(const AdvConfig& cfg, uint64_t seed);
  std::vector<Tensor> params() const;
  Blob to_blob() const;
  static Discriminator from_blob(const Blob& blob);
};

struct DiscOut {
  Tensor score;                  // [B]
  std::vector<Tensor> features;  // one tap per residual block
};

// Scores a batch of pre-masked patches [B,3,P,P]. The discriminator never
// sees the mask itself.
DiscOut discriminate(const Discriminator& d, const Tensor& patches);

struct AdvLosses {
  Tensor total;       // f(D(fake)) + f(−D(real)), batch means; f(x) = log σ(x)
  Tensor score_fake;  // [B]
  Tensor score_real;  // [B]
};

// Both inputs pre-masked. The discriminator step minimizes total; the field's
// inpainting step minimizes −λ_adv · total.
AdvLosses adversarial_losses(const Discriminator& d, const Tensor& fake_masked,
                             const Tensor& real_masked);

// R1: mean over the batch of ‖∂D(C^m(x))/∂x‖². Masking happens inside so the
// penalty sees only the mask support; built with create_graph so it can be
// minimized w.r.t. discriminator parameters.
Tensor r1_penalty(const Discriminator& d, const Tensor& real_pixels, const Tensor& mask);

// Σ over taps of mean |F(fake) − F(real)|, real side detached.
Tensor feature_matching(const Discriminator& d, const Tensor& fake_masked,
                        const Tensor& real_masked);

struct PatchLoc {
  int y;
  int x;
};

// Importance-sample candidate windows by inpainting-pixel count (windows
// below the threshold fraction are excluded; survivors drawn with
// probability d_i/Σd_j, with replacement), then slice each selected
// candidate into non-overlapping patch-size tiles.
std::vector<PatchLoc> sample_patch_locations(const Mask& mask, const AdvConfig& cfg,
                                             int n_selected, Rng& rng);

inline constexpr uint32_t kDiscBlobKind = 2;

}  // namespace maldnerf::adv
