#pragma once

#include <cstdint>
#include <vector>

namespace maldnerf {

// Dense float image, row-major, interleaved channels. Pixel data is float32:
// it is the unit of storage of the dataset format, so "bit-identical outside
// the mask" is a well-defined contract.
struct ImageF {
  int h = 0, w = 0, c = 0;
  std::vector<float> px;

  ImageF() = default;
  ImageF(int h_, int w_, int c_, float fill = 0.f)
      : h(h_), w(w_), c(c_), px(size_t(h_) * w_ * c_, fill) {}

  float& at(int y, int x, int ch) { return px[(size_t(y) * w + x) * c + ch]; }
  float at(int y, int x, int ch) const { return px[(size_t(y) * w + x) * c + ch]; }
  size_t numel() const { return px.size(); }
  bool same_dims(const ImageF& o) const { return h == o.h && w == o.w && c == o.c; }
};

// Binary mask, true marks the inpainting region.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> m;

  Mask() = default;
  Mask(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), m(size_t(h_) * w_, fill) {}

  uint8_t at(int y, int x) const { return m[size_t(y) * w + x]; }
  void set(int y, int x, bool v) { m[size_t(y) * w + x] = v ? 1 : 0; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : m) n += (v != 0);
    return n;
  }
};

// Morphological dilation by a euclidean disk of the given radius (in pixels).
Mask dilate_disk(const Mask& in, int radius);

// Bilinear sample with border clamp; `ch` selects the channel.
float sample_bilinear(const ImageF& img, double y, double x, int ch);

// Area-average downscale to exactly (oh, ow).
ImageF resize_area(const ImageF& in, int oh, int ow);

// Mean squared RGB difference over 4-neighbor pixel pairs that cross the mask
// boundary. Zero when the image is continuous across the boundary.
double seam_energy(const ImageF& img, const Mask& mask);

// PSNR (dB) restricted to masked pixels; returns +inf on exact equality.
double psnr_masked(const ImageF& a, const ImageF& b, const Mask& mask);

}  // namespace maldnerf
