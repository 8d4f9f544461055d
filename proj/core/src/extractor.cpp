#include "maldnerf/eval/extractor.hpp"

#include <cmath>

#include "maldnerf/util/error.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::eval {

using namespace maldnerf::ad;

std::vector<int> extractor_channels() { return {8, 16, 32, 64}; }

namespace {

// same smooth leaky activation as the discriminator
Tensor act(const Tensor& x) {
  return add(mul_scalar(x, 0.2), mul_scalar(softplus(x), 0.8));
}

// unit-normalize across the channel axis at every spatial position
Tensor channel_normalize(const Tensor& f) {
  Tensor n2 = sum_axes(square(f), {1}, true);
  return div(f, sqrt(add_scalar(n2, 1e-10)));
}

}  // namespace

FeatureExtractor FeatureExtractor::init(uint64_t seed) {
  FeatureExtractor ex;
  ex.seed = seed;
  Rng rng(Rng::mix({seed, 0xfea7}));
  int in = 3;
  for (int out : extractor_channels()) {
    std::vector<double> wv((int64_t)out * in * 9);
    double s = std::sqrt(2.0 / (in * 9));
    for (auto& x : wv) x = (double)(float)(s * rng.normal());
    ex.w.push_back(Tensor::from({out, in, 3, 3}, std::move(wv)));
    std::vector<double> bv(out);
    for (auto& x : bv) x = (double)(float)(0.1 * rng.normal());
    ex.b.push_back(Tensor::from({out}, std::move(bv)));
    in = out;
  }
  return ex;
}

std::vector<Tensor> FeatureExtractor::stages(const Tensor& x) const {
  const Shape& s = x.shape();
  require(s.size() == 4 && s[1] == 3, "shape", "extractor expects [B,3,H,W]");
  require(s[2] % 8 == 0 && s[3] % 8 == 0 && s[2] >= 8 && s[3] >= 8, "shape",
          "extractor needs H and W divisible by 8");
  std::vector<Tensor> out;
  Tensor h = x;
  for (size_t i = 0; i < w.size(); ++i) {
    int C = w[i].shape()[0];
    h = act(add(conv2d(h, w[i], 1, 1), reshape(b[i], {1, C, 1, 1})));
    out.push_back(channel_normalize(h));
    if (i + 1 < w.size()) h = avg_pool2(h);
  }
  return out;
}

Tensor FeatureExtractor::embed(const Tensor& x) const {
  std::vector<Tensor> parts;
  for (const Tensor& f : stages(x)) {
    const Shape& s = f.shape();
    parts.push_back(
        mul_scalar(sum_axes(f, {2, 3}, false), 1.0 / ((double)s[2] * s[3])));
  }
  return concat(parts, 1);
}

int FeatureExtractor::embed_dim() const {
  int d = 0;
  for (int c : extractor_channels()) d += c;
  return d;
}

Tensor pproxy_t(const FeatureExtractor& ex, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "shape", "pproxy inputs must have equal shape");
  auto fa = ex.stages(a);
  auto fb = ex.stages(b);
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < fa.size(); ++i)
    total = add(total, mean_all(square(sub(fa[i], fb[i]))));
  return total;
}

}  // namespace maldnerf::eval
