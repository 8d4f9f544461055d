#pragma once

#include "maldnerf/ad/tensor.hpp"
#include "maldnerf/util/image.hpp"

namespace maldnerf {

// HWC float image → [1,3,H,W] tensor
inline ad::Tensor image_tensor(const ImageF& im) {
  std::vector<double> v((size_t)im.c * im.h * im.w);
  for (int c = 0; c < im.c; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x)
        v[((size_t)c * im.h + y) * im.w + x] = im.at(y, x, c);
  return ad::Tensor::from({1, im.c, im.h, im.w}, std::move(v));
}

// [1,C,H,W] tensor → HWC float image
inline ImageF tensor_image(const ad::Tensor& t) {
  const auto& s = t.shape();
  ImageF im(s[2], s[3], s[1]);
  const auto& v = t.value();
  for (int c = 0; c < s[1]; ++c)
    for (int y = 0; y < s[2]; ++y)
      for (int x = 0; x < s[3]; ++x)
        im.at(y, x, c) = (float)v[((size_t)c * s[2] + y) * s[3] + x];
  return im;
}

// byte mask → [1,1,H,W] tensor of 0/1
inline ad::Tensor mask_image_tensor(const Mask& m) {
  std::vector<double> v((size_t)m.h * m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) v[(size_t)y * m.w + x] = m.at(y, x) ? 1.0 : 0.0;
  return ad::Tensor::from({1, 1, m.h, m.w}, std::move(v));
}

}  // namespace maldnerf
