#include <cmath>
#include <vector>

#include "doctest.h"
#include "maldnerf/adv/adversarial.hpp"
#include "maldnerf/util/error.hpp"

using namespace maldnerf;
using namespace maldnerf::ad;
using namespace maldnerf::adv;

namespace {

AdvConfig tiny_config() {
  AdvConfig cfg;
  cfg.patch_size = 8;
  cfg.candidate_size = 16;
  cfg.r_blocks = 2;
  cfg.base_channels = 4;
  cfg.max_channels = 8;
  return cfg;
}

Tensor random_patches(int B, int P, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v((size_t)B * 3 * P * P);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({B, 3, P, P}, std::move(v));
}

Tensor blob_mask(int B, int P, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v((size_t)B * P * P);
  for (int b = 0; b < B; ++b) {
    int cy = rng.uniform_int(P), cx = rng.uniform_int(P);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        v[(size_t)b * P * P + y * P + x] =
            (std::abs(y - cy) + std::abs(x - cx) <= P / 2) ? 1.0 : 0.0;
  }
  return Tensor::from({B, 1, P, P}, std::move(v));
}

// x agreeing with base inside the mask, fresh noise outside
Tensor reroll_outside(const Tensor& base, const Tensor& mask, uint64_t seed) {
  Rng rng(seed);
  auto v = base.value();
  const auto& m = mask.value();
  int B = base.shape()[0], P = base.shape()[2];
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < P * P; ++i)
        if (m[(size_t)b * P * P + i] == 0.0)
          v[((size_t)b * 3 + c) * P * P + i] = rng.uniform();
  return Tensor::from(base.shape(), std::move(v));
}

template <typename F>
void fd_probe(const char* label, std::vector<Tensor> params, F f, double tol = 1e-4,
              bool nograd_evals = true) {
  Tensor loss = f();
  auto gs = grad(loss, params, {});
  Rng rng(97);
  const double h = 1e-5;
  // losses that differentiate internally (R1) must keep the graph on
  auto eval = [&] {
    if (!nograd_evals) return f().item();
    NoGradGuard ng;
    return f().item();
  };
  for (size_t p = 0; p < params.size(); ++p) {
    auto& v = params[p].leaf_value();
    for (int q = 0; q < std::min<int>(5, (int)v.size()); ++q) {
      size_t j = rng.u64() % v.size();
      double keep = v[j];
      v[j] = keep + h;
      double up = eval();
      v[j] = keep - h;
      double dn = eval();
      v[j] = keep;
      double fd = (up - dn) / (2 * h);
      double an = gs[p].value()[j];
      INFO(label << " param " << p << " coord " << j << " fd=" << fd << " an=" << an);
      CHECK(std::abs(an - fd) <= 1e-7 + tol * std::max(std::abs(fd), std::abs(an)));
    }
  }
}

}  // namespace

TEST_CASE("apply_mask keeps masked pixels and zeroes the rest") {
  Tensor x = random_patches(2, 8, 3);
  Tensor ones = Tensor::full({2, 1, 8, 8}, 1.0);
  CHECK(apply_mask(x, ones).value() == x.value());
  Tensor zeros = Tensor::zeros({2, 1, 8, 8});
  for (double v : apply_mask(x, zeros).value()) CHECK(v == 0.0);
  Tensor m = blob_mask(2, 8, 5);
  auto once = apply_mask(x, m);
  CHECK(apply_mask(once, m).value() == once.value());
  const auto& mv = m.value();
  const auto& ov = once.value();
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 64; ++i) {
        double expect = mv[(size_t)b * 64 + i] ? x.value()[((size_t)b * 3 + c) * 64 + i] : 0.0;
        CHECK(ov[((size_t)b * 3 + c) * 64 + i] == expect);
      }
}

TEST_CASE("discriminator basics: zero head, size check, determinism") {
  AdvConfig cfg;  // defaults: patch 16, 4 blocks, 32→256
  Discriminator d = Discriminator::init(cfg, 9);
  Tensor x = random_patches(2, 16, 11);
  auto out = discriminate(d, x);
  for (double s : out.score.value()) CHECK(s == 0.0);  // zero-initialized head
  REQUIRE(out.features.size() == 4);
  CHECK(out.features[0].shape() == Shape({2, 64, 8, 8}));
  CHECK(out.features[3].shape() == Shape({2, 256, 1, 1}));

  auto again = discriminate(d, x);
  CHECK(again.score.value() == out.score.value());
  CHECK(again.features[2].value() == out.features[2].value());

  CHECK_THROWS_WITH_AS(discriminate(d, random_patches(1, 8, 1)),
                       doctest::Contains("patch size"), Error);
}

TEST_CASE("masking before the discriminator hides everything outside the mask") {
  Discriminator d = Discriminator::init(tiny_config(), 21);
  // give the head real weights so scores are informative
  Rng hr(2);
  for (auto& v : d.head_w.leaf_value()) v = hr.normal();
  int P = d.cfg.patch_size;
  Tensor m = blob_mask(2, P, 7);
  Tensor a = random_patches(2, P, 13);
  Tensor b = reroll_outside(a, m, 17);

  auto sa = discriminate(d, apply_mask(a, m));
  auto sb = discriminate(d, apply_mask(b, m));
  CHECK(sa.score.value() == sb.score.value());
  for (size_t i = 0; i < sa.features.size(); ++i)
    CHECK(sa.features[i].value() == sb.features[i].value());

  SUBCASE("every downstream loss is bit-identical too") {
    Tensor fake = random_patches(2, P, 19);
    auto la = adversarial_losses(d, apply_mask(fake, m), apply_mask(a, m));
    auto lb = adversarial_losses(d, apply_mask(fake, m), apply_mask(b, m));
    CHECK(la.total.item() == lb.total.item());
    CHECK(feature_matching(d, apply_mask(fake, m), apply_mask(a, m)).item() ==
          feature_matching(d, apply_mask(fake, m), apply_mask(b, m)).item());
    CHECK(r1_penalty(d, a, m).item() == r1_penalty(d, b, m).item());
  }

  SUBCASE("swapping outside-mask content between real and fake changes nothing") {
    Tensor fake = random_patches(2, P, 23);
    // graft fake's outside content onto real and vice versa
    auto grab_outside = [&](const Tensor& inside_src, const Tensor& outside_src) {
      auto v = inside_src.value();
      const auto& o = outside_src.value();
      const auto& mv = m.value();
      for (int bb = 0; bb < 2; ++bb)
        for (int c = 0; c < 3; ++c)
          for (int i = 0; i < P * P; ++i)
            if (mv[(size_t)bb * P * P + i] == 0.0)
              v[((size_t)bb * 3 + c) * P * P + i] = o[((size_t)bb * 3 + c) * P * P + i];
      return Tensor::from(inside_src.shape(), std::move(v));
    };
    Tensor real_sw = grab_outside(a, fake), fake_sw = grab_outside(fake, a);
    auto l1 = adversarial_losses(d, apply_mask(fake, m), apply_mask(a, m));
    auto l2 = adversarial_losses(d, apply_mask(fake_sw, m), apply_mask(real_sw, m));
    CHECK(l1.total.item() == l2.total.item());
  }
}

TEST_CASE("discriminator input gradients match finite differences") {
  Discriminator d = Discriminator::init(tiny_config(), 31);
  Rng hr(3);
  for (auto& v : d.head_w.leaf_value()) v = hr.normal();
  Tensor x = Tensor::from(random_patches(1, 8, 5).shape(), random_patches(1, 8, 5).value(), true);
  fd_probe("disc-input", {x}, [&] { return sum_all(discriminate(d, x).score); });

  SUBCASE("and parameter gradients") {
    fd_probe("disc-params", {d.stem_w, d.blocks[0].conv1_w, d.blocks[1].proj_w, d.head_w},
             [&] { return sum_all(square(discriminate(d, x).score)); });
  }
}

TEST_CASE("adversarial losses use the stable log-sigmoid form") {
  Discriminator d = Discriminator::init(tiny_config(), 41);
  int P = d.cfg.patch_size;
  Tensor fake = random_patches(2, P, 43), real = random_patches(2, P, 47);

  // zero-initialized head → D ≡ 0 → L_adv = 2 f(0) = −2 log 2
  auto l0 = adversarial_losses(d, fake, real);
  CHECK(l0.total.item() == doctest::Approx(-2.0 * std::log(2.0)).epsilon(1e-14));

  SUBCASE("no overflow at extreme scores") {
    d.head_b.leaf_value()[0] = 800.0;  // D ≡ 800
    auto hi = adversarial_losses(d, fake, real);
    CHECK(std::isfinite(hi.total.item()));
    // f(800) ≈ 0, f(−800) = −800
    CHECK(hi.total.item() == doctest::Approx(-800.0).epsilon(1e-12));
    d.head_b.leaf_value()[0] = 30.0;
    auto mid = adversarial_losses(d, fake, real);
    CHECK(mid.total.item() == doctest::Approx(-30.0 - 9.36e-14).epsilon(1e-10));
  }

  SUBCASE("permutation invariance over the batch") {
    Rng hr(5);
    for (auto& v : d.head_w.leaf_value()) v = hr.normal();
    Tensor f4 = random_patches(4, P, 51), r4 = random_patches(4, P, 53);
    auto base = adversarial_losses(d, f4, r4);
    // reverse the batch order of both sides
    auto rev = [&](const Tensor& t) {
      auto v = t.value();
      size_t n = (size_t)3 * P * P;
      std::vector<double> w(v.size());
      for (int b = 0; b < 4; ++b)
        std::copy(v.begin() + b * n, v.begin() + (b + 1) * n, w.begin() + (3 - b) * n);
      return Tensor::from(t.shape(), std::move(w));
    };
    auto perm = adversarial_losses(d, rev(f4), rev(r4));
    CHECK(perm.total.item() == doctest::Approx(base.total.item()).epsilon(1e-14));
  }

  SUBCASE("equal fake/real inputs stay balanced through a descent step") {
    Rng hr(7);
    for (auto& v : d.head_w.leaf_value()) v = hr.normal();
    Tensor x = random_patches(2, P, 59);
    auto before = adversarial_losses(d, x, x);
    auto params = d.params();
    auto gs = grad(before.total, params, {});
    for (size_t i = 0; i < params.size(); ++i) {
      auto& v = params[i].leaf_value();
      const auto& g = gs[i].value();
      for (size_t j = 0; j < v.size(); ++j) v[j] -= 0.05 * g[j];
    }
    auto after = adversarial_losses(d, x, x);
    CHECK(after.score_fake.value() == after.score_real.value());
  }
}

TEST_CASE("generator gradient of −L_adv is confined to the mask") {
  Discriminator d = Discriminator::init(tiny_config(), 61);
  Rng hr(11);
  for (auto& v : d.head_w.leaf_value()) v = hr.normal();
  int P = d.cfg.patch_size;
  Tensor m = blob_mask(1, P, 67);
  Tensor fake = Tensor::from(Shape{1, 3, P, P}, random_patches(1, P, 71).value(), true);
  Tensor real = random_patches(1, P, 73);
  auto l = adversarial_losses(d, apply_mask(fake, m), apply_mask(real, m));
  auto g = grad(neg(l.total), {fake}, {})[0];
  const auto& gv = g.value();
  const auto& mv = m.value();
  double inside = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < P * P; ++i) {
      if (mv[i] == 0.0)
        CHECK(gv[(size_t)c * P * P + i] == 0.0);
      else
        inside += std::abs(gv[(size_t)c * P * P + i]);
    }
  CHECK(inside > 0.0);
}

TEST_CASE("R1 penalty measures the masked input gradient") {
  SUBCASE("constant discriminator → 0") {
    Discriminator d = Discriminator::init(tiny_config(), 81);
    for (auto& p : d.params())
      for (auto& v : p.leaf_value()) v = 0.0;
    Tensor x = random_patches(2, 8, 83);
    CHECK(r1_penalty(d, x, blob_mask(2, 8, 85)).item() == 0.0);
  }

  SUBCASE("matches a full finite-difference gradient oracle") {
    Discriminator d = Discriminator::init(tiny_config(), 87);
    Rng hr(13);
    for (auto& v : d.head_w.leaf_value()) v = hr.normal();
    int P = 8;
    Tensor x = random_patches(1, P, 89);
    Tensor m = blob_mask(1, P, 91);
    double h = 1e-5, fd_norm = 0;
    auto v = x.value();
    for (size_t j = 0; j < v.size(); ++j) {
      NoGradGuard ng;
      auto probe = [&](double delta) {
        auto w = v;
        w[j] += delta;
        return discriminate(d, apply_mask(Tensor::from(x.shape(), std::move(w)), m))
            .score.value()[0];
      };
      double g = (probe(h) - probe(-h)) / (2 * h);
      fd_norm += g * g;
    }
    CHECK(r1_penalty(d, x, m).item() == doctest::Approx(fd_norm).epsilon(1e-6));
  }

  SUBCASE("near-linear discriminator: analytic restricted-gradient oracle") {
    AdvConfig cfg = tiny_config();
    cfg.r_blocks = 0;  // D = head(mean(act(stem(x))))
    Discriminator d = Discriminator::init(cfg, 93);
    Rng hr(17);
    for (auto& v : d.head_w.leaf_value()) v = hr.normal();
    // push the activation into its asymptotically-linear regime
    for (auto& v : d.stem_b.leaf_value()) v = 50.0;
    int P = 8, C = cfg.base_channels;
    Tensor x = random_patches(1, P, 95);
    Tensor m = blob_mask(1, P, 99);
    // g[ci,y,x] = (1/P²) Σ_c head_w[c] · Σ_{taps hitting (y,x)} stem_w[c,ci,ky,kx]
    const auto& sw = d.stem_w.value();
    const auto& hw = d.head_w.value();
    const auto& mv = m.value();
    double expect = 0;
    for (int ci = 0; ci < 3; ++ci)
      for (int y = 0; y < P; ++y)
        for (int xx = 0; xx < P; ++xx) {
          if (mv[(size_t)y * P + xx] == 0.0) continue;  // restricted to mask support
          double g = 0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int oy = y - (ky - 1), ox = xx - (kx - 1);
                if (oy < 0 || ox < 0 || oy >= P || ox >= P) continue;
                g += hw[c] * sw[((size_t)c * 3 + ci) * 9 + ky * 3 + kx] / (P * P);
              }
          expect += g * g;
        }
    CHECK(r1_penalty(d, x, m).item() == doctest::Approx(expect).epsilon(1e-9));
    // for a (near-)linear D the penalty ignores the input scale
    Tensor x2 = Tensor::from(x.shape(), [&] {
      auto v = x.value();
      for (auto& t : v) t *= 2.0;
      return v;
    }());
    CHECK(r1_penalty(d, x2, m).item() == doctest::Approx(expect).epsilon(1e-9));
  }

  SUBCASE("the penalty itself is differentiable w.r.t. discriminator parameters") {
    Discriminator d = Discriminator::init(tiny_config(), 101);
    Rng hr(19);
    for (auto& v : d.head_w.leaf_value()) v = hr.normal();
    Tensor x = random_patches(1, 8, 103);
    Tensor m = blob_mask(1, 8, 105);
    fd_probe("r1-params", {d.stem_w, d.blocks[0].conv2_w, d.head_w},
             [&] { return r1_penalty(d, x, m); }, 3e-4, /*nograd_evals=*/false);
  }
}

TEST_CASE("feature matching compares masked features, real side detached") {
  Discriminator d = Discriminator::init(tiny_config(), 111);
  int P = d.cfg.patch_size;
  Tensor m = blob_mask(1, P, 113);
  Tensor a = apply_mask(random_patches(1, P, 115), m);
  CHECK(feature_matching(d, a, a).item() == 0.0);

  SUBCASE("gradient reaches the fake side only") {
    Tensor fake = Tensor::from(Shape{1, 3, P, P}, random_patches(1, P, 117).value(), true);
    Tensor real = Tensor::from(Shape{1, 3, P, P}, random_patches(1, P, 119).value(), true);
    Tensor fm = feature_matching(d, apply_mask(fake, m), apply_mask(real, m));
    auto gs = grad(fm, {fake, real}, {});
    double gf = 0;
    for (double v : gs[0].value()) gf += std::abs(v);
    CHECK(gf > 0.0);
    for (double v : gs[1].value()) CHECK(v == 0.0);
  }

  SUBCASE("naive convolution oracle on a small block") {
    AdvConfig cfg;
    cfg.patch_size = 4;
    cfg.candidate_size = 4;
    cfg.r_blocks = 1;
    cfg.base_channels = 2;
    cfg.max_channels = 4;
    Discriminator d1 = Discriminator::init(cfg, 121);
    Tensor pa = random_patches(1, 4, 123), pb = random_patches(1, 4, 125);

    // naive NCHW conv, stride 1
    auto conv = [](const std::vector<double>& x, int ci, int hw, const std::vector<double>& w,
                   const std::vector<double>& b, int co, int k, int pad) {
      std::vector<double> y((size_t)co * hw * hw);
      for (int o = 0; o < co; ++o)
        for (int yy = 0; yy < hw; ++yy)
          for (int xx = 0; xx < hw; ++xx) {
            double acc = b[o];
            for (int i = 0; i < ci; ++i)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  int sy = yy + ky - pad, sx = xx + kx - pad;
                  if (sy < 0 || sx < 0 || sy >= hw || sx >= hw) continue;
                  acc += x[((size_t)i * hw + sy) * hw + sx] *
                         w[(((size_t)o * ci + i) * k + ky) * k + kx];
                }
            y[((size_t)o * hw + yy) * hw + xx] = acc;
          }
      return y;
    };
    auto actv = [](std::vector<double> x) {
      for (auto& v : x) {
        double sp = v > 30 ? v : std::log1p(std::exp(v));
        v = 0.2 * v + 0.8 * sp;
      }
      return x;
    };
    auto block_features = [&](const Tensor& inp) {
      auto h = actv(conv(inp.value(), 3, 4, d1.stem_w.value(), d1.stem_b.value(), 2, 3, 1));
      auto y = actv(conv(h, 2, 4, d1.blocks[0].conv1_w.value(), d1.blocks[0].conv1_b.value(), 4, 3, 1));
      y = conv(y, 4, 4, d1.blocks[0].conv2_w.value(), d1.blocks[0].conv2_b.value(), 4, 3, 1);
      auto skip = conv(h, 2, 4, d1.blocks[0].proj_w.value(), d1.blocks[0].proj_b.value(), 4, 1, 0);
      std::vector<double> pooled((size_t)4 * 2 * 2);
      for (int c = 0; c < 4; ++c)
        for (int yy = 0; yy < 2; ++yy)
          for (int xx = 0; xx < 2; ++xx) {
            double s = 0;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                size_t i = ((size_t)c * 4 + 2 * yy + dy) * 4 + 2 * xx + dx;
                s += y[i] + skip[i];
              }
            pooled[((size_t)c * 2 + yy) * 2 + xx] = s / 4;
          }
      return pooled;
    };
    auto fa = block_features(pa), fb = block_features(pb);
    double expect = 0;
    for (size_t i = 0; i < fa.size(); ++i) expect += std::abs(fa[i] - fb[i]);
    expect /= fa.size();
    CHECK(feature_matching(d1, pa, pb).item() == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("monotone under interpolation for (near-)linear feature maps") {
    Discriminator dl = Discriminator::init(tiny_config(), 131);
    for (auto& v : dl.stem_b.leaf_value()) v = 50.0;
    for (auto& b : dl.blocks) {
      for (auto& v : b.conv1_b.leaf_value()) v = 50.0;
      for (auto& v : b.conv2_b.leaf_value()) v = 50.0;
    }
    Tensor real = apply_mask(random_patches(1, P, 133), m);
    Tensor fake = apply_mask(random_patches(1, P, 137), m);
    double prev = -1;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      Tensor mix = add(mul_scalar(real, 1 - alpha), mul_scalar(fake, alpha));
      double v = feature_matching(dl, mix, real).item();
      CHECK(v >= prev - 1e-9);
      prev = v;
    }
  }
}

TEST_CASE("patch location sampling follows the importance weights") {
  SUBCASE("selection frequencies match d_i/Σd_j") {
    // two clusters of 10 and 30 mask pixels, each visible to exactly one
    // window of the candidate grid (x ∈ {0,4,…,32}); low threshold keeps both
    Mask m(16, 48);
    int placed = 0;
    for (int y = 2; y < 7 && placed < 10; ++y)
      for (int x = 2; x < 4 && placed < 10; ++x, ++placed) m.set(y, x, 1);
    placed = 0;
    for (int y = 2; y < 12 && placed < 30; ++y)
      for (int x = 44; x < 47 && placed < 30; ++x, ++placed) m.set(y, x, 1);
    AdvConfig cfg;
    cfg.candidate_size = 16;
    cfg.patch_size = 16;
    cfg.threshold = 0.01;
    Rng rng(141);
    int left = 0, right = 0, n = 100000;
    auto locs = sample_patch_locations(m, cfg, n, rng);
    REQUIRE((int)locs.size() == n);  // one tile per candidate at 16/16
    for (const auto& l : locs) {
      if (l.x == 0)
        ++left;
      else if (l.x == 32)
        ++right;
      else
        FAIL("unexpected window selected");
    }
    CHECK(std::abs(left / (double)n - 0.25) < 0.01);
    CHECK(std::abs(right / (double)n - 0.75) < 0.01);
  }

  SUBCASE("candidates below the 50% threshold are never selected") {
    // left 16×16 window: 125/256 = 48.8% < 50%; right window: 100% masked
    Mask m(16, 32);
    int placed = 0;
    for (int y = 0; y < 16 && placed < 125; ++y)
      for (int x = 0; x < 16 && placed < 125; ++x, ++placed) m.set(y, x, 1);
    for (int y = 0; y < 16; ++y)
      for (int x = 16; x < 32; ++x) m.set(y, x, 1);
    AdvConfig cfg;
    cfg.candidate_size = 16;
    cfg.patch_size = 16;
    Rng rng(151);
    auto locs = sample_patch_locations(m, cfg, 500, rng);
    // windows at x ≥ 4 include fully-masked right-region columns and are
    // legitimate; only the exact 125/256 window at x = 0 is below threshold
    for (const auto& l : locs) CHECK(l.x != 0);
  }

  SUBCASE("paper-scale slicing: 256-candidates into 64-tiles give 16 tiles") {
    Mask m(256, 256);
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; ++x) m.set(y, x, 1);
    AdvConfig cfg;
    cfg.candidate_size = 256;
    cfg.patch_size = 64;
    Rng rng(161);
    auto locs = sample_patch_locations(m, cfg, 2, rng);
    REQUIRE(locs.size() == 32);  // 2 candidates × 16 tiles
    for (int k = 0; k < 2; ++k)
      for (int t = 0; t < 16; ++t) {
        CHECK(locs[k * 16 + t].y % 64 == 0);
        CHECK(locs[k * 16 + t].x % 64 == 0);
      }
  }

  SUBCASE("a mask too small to clear the threshold is an error") {
    Mask m(32, 32);
    m.set(10, 10, 1);
    AdvConfig cfg;
    cfg.candidate_size = 16;
    cfg.patch_size = 16;
    Rng rng(171);
    CHECK_THROWS_WITH_AS(sample_patch_locations(m, cfg, 4, rng),
                         doctest::Contains("mask too small for adversarial patching"), Error);
  }

  SUBCASE("deterministic given the generator state") {
    Mask m(32, 32);
    for (int y = 4; y < 28; ++y)
      for (int x = 4; x < 28; ++x) m.set(y, x, 1);
    AdvConfig cfg;
    cfg.candidate_size = 32;
    cfg.patch_size = 16;
    Rng r1(7), r2(7);
    auto a = sample_patch_locations(m, cfg, 6, r1);
    auto b = sample_patch_locations(m, cfg, 6, r2);
    REQUIRE(a.size() == b.size());
    REQUIRE(a.size() == 24);  // 6 candidates × 4 tiles at 32/16
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].y == b[i].y);
      CHECK(a[i].x == b[i].x);
    }
  }
}

TEST_CASE("discriminator blob round-trip restores bit-identical scores") {
  Discriminator d = Discriminator::init(tiny_config(), 181);
  Rng hr(23);
  for (auto& v : d.head_w.leaf_value()) v = hr.normal();
  for (auto& p : d.params())
    for (auto& v : p.leaf_value()) v = (double)(float)v;
  Tensor x = random_patches(2, 8, 183);
  auto before = discriminate(d, x);
  Blob b = d.to_blob();
  CHECK(b.kind == kDiscBlobKind);
  Discriminator d2 = Discriminator::from_blob(b);
  auto after = discriminate(d2, x);
  CHECK(before.score.value() == after.score.value());
  CHECK(before.features[1].value() == after.features[1].value());

  Blob bad = b;
  bad.meta.pop_back();
  CHECK_THROWS_WITH_AS(Discriminator::from_blob(bad), doctest::Contains("meta"), Error);
}
