#pragma once

#include <cstdint>
#include <vector>

#include "maldnerf/ad/tensor.hpp"

namespace maldnerf::eval {

using ad::Tensor;

// Frozen random convolutional feature pyramid. Stands in for the pretrained
// backbones behind perceptual and distributional metrics; scores computed
// with it are comparable across runs of this artifact (same seed), and
// explicitly NOT comparable to published LPIPS/FID/KID numbers.
struct FeatureExtractor {
  uint64_t seed = 0;
  std::vector<Tensor> w;  // 4 stages, 3x3 kernels, frozen (no grad)
  std::vector<Tensor> b;

  static FeatureExtractor init(uint64_t seed);

  // Channel-normalized feature maps of [B,3,H,W] input, one per stage at
  // resolutions H, H/2, H/4, H/8. H and W must be divisible by 8.
  std::vector<Tensor> stages(const Tensor& x) const;

  // Per-image descriptor: stage-wise spatial means, concatenated. [B, dim]
  Tensor embed(const Tensor& x) const;
  int embed_dim() const;
};

// Number of channels per stage (8, 16, 32, 64).
std::vector<int> extractor_channels();

// Perceptual proxy: sum over stages of the mean squared difference of
// channel-normalized features. Zero iff inputs are equal. Differentiable in
// both inputs (the training-time perceptual term backpropagates through a).
Tensor pproxy_t(const FeatureExtractor& ex, const Tensor& a, const Tensor& b);

}  // namespace maldnerf::eval
