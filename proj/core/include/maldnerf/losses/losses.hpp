#pragma once

#include <cstdint>
#include <vector>

#include "maldnerf/ad/tensor.hpp"
#include "maldnerf/field/field.hpp"
#include "maldnerf/util/image.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::losses {

using ad::Tensor;
using field::Histogram;

// Mean squared error over channels and pixels; empty sets are an error.
Tensor pixel_loss(const Tensor& x, const Tensor& target);

// Mean over rays of Σ_i max(0, w_i − bound_i)² / (w_i + 1e-7) where bound_i
// sums the proposal weights of every bin overlapping final bin i. Final
// weights are detached: the gradient flows to the proposal histogram only.
// Zero-width final bins are skipped.
Tensor interlevel_loss(const Histogram& final_h, const Histogram& prop_h);

// Mean over rays of Σ_{i,j} w_i w_j |m_i − m_j| + (1/3) Σ_i w_i² δ_i in
// normalized s-space.
Tensor distortion_loss(const Histogram& h);

struct DepthAlignment {
  double a = 1.0;
  double b = 0.0;
  double residual = 0.0;  // RMSE over fit pixels
  int n_fit = 0;
  double apply(double d) const { return a * d + b; }
};

// Closed-form least squares of rendered ≈ a·estimated + b over fit_mask
// (reconstruction-region pixels). Constant estimated depth on the fit region
// is an error ("degenerate depth prior").
DepthAlignment solve_shift_scale(const std::vector<double>& estimated,
                                 const std::vector<double>& rendered,
                                 const std::vector<uint8_t>& fit_mask);

struct DepthPair {
  int i;
  int j;
};

// Pairs of flat pixel indices, both inside the mask, within a square window.
std::vector<DepthPair> sample_depth_pairs(const Mask& mask, int n_pairs, int window, Rng& rng);

// Mean over pairs of max(0, d_i − d_j + margin), restricted to pairs where
// the aligned prior orders them d̂_i < d̂_j. Empty pair set → 0 with a flag.
Tensor depth_ranking_loss(const Tensor& d, const std::vector<double>& aligned,
                          const std::vector<DepthPair>& pairs, double margin,
                          bool* empty_warning = nullptr);

}  // namespace maldnerf::losses
