#include "maldnerf/adv/adversarial.hpp"

#include <cmath>

#include "maldnerf/util/error.hpp"

namespace maldnerf::adv {

using namespace maldnerf::ad;

Tensor apply_mask(const Tensor& pixels, const Tensor& mask) {
  require(pixels.shape().size() == 4 && mask.shape().size() == 4, "shape",
          "apply_mask expects [B,3,P,P] pixels and [B,1,P,P] mask");
  require(pixels.shape()[0] == mask.shape()[0] && pixels.shape()[2] == mask.shape()[2] &&
              pixels.shape()[3] == mask.shape()[3],
          "shape", "apply_mask pixel/mask extent mismatch");
  return mul(pixels, mask);
}

Tensor mask_tensor(const std::vector<Mask>& masks) {
  require(!masks.empty(), "shape", "mask_tensor on empty batch");
  int h = masks[0].h, w = masks[0].w;
  std::vector<double> v;
  v.reserve(masks.size() * h * w);
  for (const auto& m : masks) {
    require(m.h == h && m.w == w, "shape", "mask_tensor extent mismatch");
    for (uint8_t b : m.m) v.push_back(b ? 1.0 : 0.0);
  }
  return Tensor::from({(int)masks.size(), 1, h, w}, std::move(v));
}

namespace {

// smooth leaky activation: differentiable everywhere (R1 needs second order)
Tensor act(const Tensor& x) {
  return add(mul_scalar(x, 0.2), mul_scalar(softplus(x), 0.8));
}

Tensor conv_b(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  int C = w.shape()[0];
  return add(conv2d(x, w, stride, pad), reshape(b, {1, C, 1, 1}));
}

Tensor conv_init(int out, int in, int k, Rng& rng) {
  std::vector<double> v((int64_t)out * in * k * k);
  double s = std::sqrt(2.0 / (in * k * k));
  for (auto& x : v) x = s * rng.normal();
  return Tensor::from({out, in, k, k}, std::move(v), true);
}

std::vector<int> block_channels(const AdvConfig& cfg) {
  std::vector<int> ch = {cfg.base_channels};
  for (int i = 0; i < cfg.r_blocks; ++i)
    ch.push_back(std::min(cfg.max_channels, ch.back() * 2));
  return ch;
}

}  // namespace

Discriminator Discriminator::init(const AdvConfig& cfg, uint64_t seed) {
  require(cfg.patch_size >= (1 << cfg.r_blocks), "adv-config",
          "patch too small for the residual pyramid");
  require(cfg.candidate_size % cfg.patch_size == 0, "adv-config",
          "candidate size must be a multiple of the patch size");
  Discriminator d;
  d.cfg = cfg;
  Rng rng(Rng::mix({seed, 0xd15c}));
  auto ch = block_channels(cfg);
  d.stem_w = conv_init(ch[0], 3, 3, rng);
  d.stem_b = Tensor::zeros({ch[0]}, true);
  for (int i = 0; i < cfg.r_blocks; ++i) {
    ResBlock b;
    b.conv1_w = conv_init(ch[i + 1], ch[i], 3, rng);
    b.conv1_b = Tensor::zeros({ch[i + 1]}, true);
    b.conv2_w = conv_init(ch[i + 1], ch[i + 1], 3, rng);
    b.conv2_b = Tensor::zeros({ch[i + 1]}, true);
    b.proj_w = conv_init(ch[i + 1], ch[i], 1, rng);
    b.proj_b = Tensor::zeros({ch[i + 1]}, true);
    d.blocks.push_back(b);
  }
  d.head_w = Tensor::zeros({1, ch.back()}, true);  // score 0 at init
  d.head_b = Tensor::zeros({1}, true);
  for (auto& p : d.params())
    for (auto& v : p.leaf_value()) v = (double)(float)v;
  return d;
}

std::vector<Tensor> Discriminator::params() const {
  std::vector<Tensor> out = {stem_w, stem_b};
  for (const auto& b : blocks)
    for (const auto& t : {b.conv1_w, b.conv1_b, b.conv2_w, b.conv2_b, b.proj_w, b.proj_b})
      out.push_back(t);
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

Blob Discriminator::to_blob() const {
  Blob b;
  b.kind = kDiscBlobKind;
  b.meta = {cfg.patch_size,  cfg.candidate_size,
            (int64_t)std::llround(cfg.threshold * 1e9),
            cfg.r_blocks,    cfg.base_channels,
            cfg.max_channels};
  for (const auto& p : params())
    for (double v : p.value()) b.params.push_back((float)v);
  return b;
}

Discriminator Discriminator::from_blob(const Blob& b) {
  require(b.meta.size() == 6, "checkpoint", "discriminator blob meta has wrong arity");
  AdvConfig cfg;
  cfg.patch_size = (int)b.meta[0];
  cfg.candidate_size = (int)b.meta[1];
  cfg.threshold = b.meta[2] * 1e-9;
  cfg.r_blocks = (int)b.meta[3];
  cfg.base_channels = (int)b.meta[4];
  cfg.max_channels = (int)b.meta[5];
  Discriminator d = init(cfg, 0);
  auto ps = d.params();
  size_t need = 0;
  for (const auto& p : ps) need += p.numel();
  require(b.params.size() == need, "checkpoint", "discriminator blob parameter count mismatch");
  size_t k = 0;
  for (auto& p : ps) {
    auto& v = p.leaf_value();
    for (auto& x : v) x = (double)b.params[k++];
  }
  return d;
}

DiscOut discriminate(const Discriminator& d, const Tensor& patches) {
  const Shape& s = patches.shape();
  require(s.size() == 4 && s[1] == 3 && s[2] == d.cfg.patch_size && s[3] == d.cfg.patch_size,
          "shape", "discriminator patch size mismatch");
  int B = s[0];
  DiscOut out;
  Tensor h = act(conv_b(patches, d.stem_w, d.stem_b, 1, 1));
  for (const auto& b : d.blocks) {
    Tensor y = act(conv_b(h, b.conv1_w, b.conv1_b, 1, 1));
    y = conv_b(y, b.conv2_w, b.conv2_b, 1, 1);
    Tensor skip = conv_b(h, b.proj_w, b.proj_b, 1, 0);
    h = avg_pool2(add(y, skip));
    out.features.push_back(h);
  }
  // mean-pool the remaining spatial extent, then the scalar head
  int C = h.shape()[1], hh = h.shape()[2], ww = h.shape()[3];
  Tensor pooled = mul_scalar(sum_axes(reshape(h, {B, C, hh * ww}), {2}, false), 1.0 / (hh * ww));
  out.score = reshape(add(matmul(pooled, d.head_w, false, true), d.head_b), {B});
  return out;
}

namespace {

// f(x) = log sigmoid(x) = −softplus(−x), stable at both tails
Tensor log_sigmoid(const Tensor& x) { return neg(softplus(neg(x))); }

}  // namespace

AdvLosses adversarial_losses(const Discriminator& d, const Tensor& fake_masked,
                             const Tensor& real_masked) {
  AdvLosses out;
  out.score_fake = discriminate(d, fake_masked).score;
  out.score_real = discriminate(d, real_masked).score;
  out.total = add(mean_all(log_sigmoid(out.score_fake)),
                  mean_all(log_sigmoid(neg(out.score_real))));
  return out;
}

Tensor r1_penalty(const Discriminator& d, const Tensor& real_pixels, const Tensor& mask) {
  int B = real_pixels.shape()[0];
  Tensor x = Tensor::from(real_pixels.shape(), real_pixels.value(), true);
  Tensor score = discriminate(d, apply_mask(x, mask)).score;
  auto g = grad(sum_all(score), {x}, {.create_graph = true});
  return mul_scalar(sum_all(square(g[0])), 1.0 / B);
}

Tensor feature_matching(const Discriminator& d, const Tensor& fake_masked,
                        const Tensor& real_masked) {
  auto ff = discriminate(d, fake_masked).features;
  auto fr = discriminate(d, real_masked).features;
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < ff.size(); ++i)
    total = add(total, mean_all(abs(sub(ff[i], fr[i].detach()))));
  return total;
}

std::vector<PatchLoc> sample_patch_locations(const Mask& mask, const AdvConfig& cfg,
                                             int n_selected, Rng& rng) {
  int c = cfg.candidate_size, P = cfg.patch_size;
  require(mask.h >= c && mask.w >= c, "adv-config", "image smaller than the candidate window");

  // summed-area table for fast window counts
  int H = mask.h, W = mask.w;
  std::vector<int64_t> sat((size_t)(H + 1) * (W + 1), 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      sat[(size_t)(y + 1) * (W + 1) + x + 1] = (mask.at(y, x) ? 1 : 0) +
                                               sat[(size_t)y * (W + 1) + x + 1] +
                                               sat[(size_t)(y + 1) * (W + 1) + x] -
                                               sat[(size_t)y * (W + 1) + x];
  auto window_count = [&](int y, int x) {
    return sat[(size_t)(y + c) * (W + 1) + x + c] - sat[(size_t)y * (W + 1) + x + c] -
           sat[(size_t)(y + c) * (W + 1) + x] + sat[(size_t)y * (W + 1) + x];
  };

  // candidate grid at quarter-window stride, always including the far edge
  std::vector<int> ys, xs;
  int stride = std::max(1, c / 4);
  for (int y = 0;; y += stride) {
    if (y > H - c) y = H - c;
    ys.push_back(y);
    if (y == H - c) break;
  }
  for (int x = 0;; x += stride) {
    if (x > W - c) x = W - c;
    xs.push_back(x);
    if (x == W - c) break;
  }

  std::vector<PatchLoc> cand;
  std::vector<double> weight;
  double total = 0;
  for (int y : ys)
    for (int x : xs) {
      int64_t cnt = window_count(y, x);
      if ((double)cnt / (c * c) >= cfg.threshold) {
        cand.push_back({y, x});
        weight.push_back((double)cnt);
        total += (double)cnt;
      }
    }
  if (cand.empty()) raise("adversarial", "mask too small for adversarial patching");

  std::vector<PatchLoc> out;
  int tiles = c / P;
  for (int k = 0; k < n_selected; ++k) {
    double u = rng.uniform() * total;
    size_t pick = weight.size() - 1;
    double acc = 0;
    for (size_t i = 0; i < weight.size(); ++i) {
      acc += weight[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    for (int ty = 0; ty < tiles; ++ty)
      for (int tx = 0; tx < tiles; ++tx)
        out.push_back({cand[pick].y + ty * P, cand[pick].x + tx * P});
  }
  return out;
}

}  // namespace maldnerf::adv
