#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "maldnerf/prior/prior.hpp"
#include "maldnerf/scene/scene.hpp"
#include "maldnerf/util/bridge.hpp"
#include "maldnerf/util/error.hpp"

using namespace maldnerf;
using namespace maldnerf::ad;
using namespace maldnerf::prior;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("maldnerf_prior_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// Smooth random texture: per-channel plane-wave mix, amplitudes well inside [0,1].
ImageF sine_texture(int n, Rng& rng) {
  ImageF im(n, n, 3);
  for (int c = 0; c < 3; ++c) {
    double ay = rng.uniform(0.5, 2.0) * 2 * M_PI / n;
    double ax = rng.uniform(0.5, 2.0) * 2 * M_PI / n;
    double ph = rng.uniform(0, 2 * M_PI);
    double amp = rng.uniform(0.1, 0.35);
    double base = rng.uniform(0.3, 0.7);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        im.at(y, x, c) = (float)(base + amp * std::sin(ay * y + ax * x + ph));
  }
  return im;
}

double psnr(const ImageF& a, const ImageF& b) {
  double mse = 0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    double d = (double)a.px[i] - b.px[i];
    mse += d * d;
  }
  mse /= a.px.size();
  return -10.0 * std::log10(mse);
}

ImageF roundtrip(const Prior& p, const ImageF& im) {
  NoGradGuard ng;
  return tensor_image(decode(p, encode(p, image_tensor(im))));
}

// One base prior shared by the slow cases: autoencoder fitted on ten smooth
// textures (exponentially decayed lr), then the denoiser trained for 800
// steps under the "base" token. Built once per process.
struct BaseFixture {
  Prior prior = Prior::init(3);
  std::vector<ImageF> train_tex, held_out;
};

const BaseFixture& trained_base() {
  static const BaseFixture fix = [] {
    BaseFixture f;
    Rng trng(99);
    for (int i = 0; i < 10; ++i) f.train_tex.push_back(sine_texture(32, trng));
    for (int i = 0; i < 2; ++i) f.held_out.push_back(sine_texture(32, trng));
    Mask none(32, 32);
    AdamConfig ac;
    ac.lr = 2e-3;
    Adam ae_opt(f.prior.base_params(), ac);
    Rng pick(7);
    const int ae_steps = 2500;
    for (int k = 1; k <= ae_steps; ++k)
      ae_train_step(f.prior, f.train_tex[pick.uniform_int(10)], none, ae_opt,
                    2e-3 * std::pow(0.1, (double)k / ae_steps));
    AdamConfig dc;
    dc.lr = 2e-3;
    dc.clip_norm = 1.0;
    Adam dn_opt(f.prior.base_params(), dc);
    for (int k = 1; k <= 800; ++k) {
      const ImageF& im = f.train_tex[pick.uniform_int(10)];
      Mask rects = random_rect_mask(32, 32, pick);
      ddpm_train_step(f.prior, im, rects, none, "base", pick, dn_opt,
                      2e-3 * std::pow(0.1, k / 800.0));
    }
    return f;
  }();
  return fix;
}

double masked_mad(const ImageF& a, const ImageF& b, const Mask& m) {
  double acc = 0;
  int n = 0;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) acc += std::abs((double)a.at(y, x, c) - b.at(y, x, c));
      n += 3;
    }
  return acc / n;
}

// Mean per-pixel standard deviation across 8 seeds of the masked region.
double seed_spread(const Prior& p, const std::string& token, const scene::PosedImage& im) {
  std::vector<ImageF> outs;
  for (uint64_t s = 0; s < 8; ++s) {
    InpaintRequest req;
    req.mask = im.mask;
    req.condition = token;
    req.t_start = 980;
    req.n_ddim_steps = 20;
    req.seed = s;
    req.view = (uint64_t)im.id;
    outs.push_back(partial_inpaint(req, im.pixels, im.pixels, p));
  }
  double acc = 0;
  int n = 0;
  for (int y = 0; y < im.mask.h; ++y)
    for (int x = 0; x < im.mask.w; ++x) {
      if (!im.mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        double m1 = 0, m2 = 0;
        for (const auto& o : outs) {
          double v = o.at(y, x, c);
          m1 += v / 8;
          m2 += v * v / 8;
        }
        acc += std::sqrt(std::max(0.0, m2 - m1 * m1));
        ++n;
      }
    }
  return acc / n;
}

scene::SceneDataset small_scene() {
  scene::SceneSpec spec;
  spec.seed = 11;
  spec.train_views = 4;
  spec.test_views = 4;
  spec.res = 32;
  spec.objects = 1;
  return scene::synthesize_scene(spec);
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    const auto& va = a[i].value();
    const auto& vb = b[i].value();
    for (size_t j = 0; j < va.size(); ++j)
      if (va[j] != vb[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("noise schedule endpoints and monotonicity") {
  DiffusionSchedule s = DiffusionSchedule::linear();
  REQUIRE(s.T == 1000);
  REQUIRE((int)s.beta.size() == 1001);
  REQUIRE((int)s.alpha_bar.size() == 1001);
  CHECK(s.beta[0] == 0.0);
  CHECK(s.beta[1] == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta[1000] == doctest::Approx(2e-2).epsilon(1e-12));
  CHECK(s.alpha_bar[0] == 1.0);  // exact: t=0 adds no noise at all
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.alpha_bar[t] > 0.0);
  }
  CHECK(s.alpha_bar[1000] < 1e-2);

  // mid-ramp beta is the linear interpolant
  DiffusionSchedule tiny = DiffusionSchedule::linear(11, 0.1, 0.2);
  CHECK(tiny.beta[6] == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(tiny.alpha_bar[2] == doctest::Approx(0.9 * 0.89).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(DiffusionSchedule::linear(1, 1e-4, 2e-2),
                       doctest::Contains("invalid diffusion schedule"), Error);
  CHECK_THROWS_WITH_AS(DiffusionSchedule::linear(100, 2e-2, 1e-4),
                       doctest::Contains("invalid diffusion schedule"), Error);
  CHECK_THROWS_WITH_AS(DiffusionSchedule::linear(100, 0.5, 1.5),
                       doctest::Contains("invalid diffusion schedule"), Error);
}

TEST_CASE("ddim timestep ladder") {
  std::vector<int> t = ddim_taus(980, 20);
  REQUIRE((int)t.size() == 21);
  CHECK(t.front() == 980);
  CHECK(t.back() == 0);
  for (size_t i = 1; i < t.size(); ++i) CHECK(t[i] < t[i - 1]);

  // more steps than timesteps: dedupes to one-per-timestep
  std::vector<int> u = ddim_taus(5, 20);
  CHECK(u == std::vector<int>{5, 4, 3, 2, 1, 0});
  CHECK(ddim_taus(0, 7) == std::vector<int>{0});
  CHECK(ddim_taus(3, 1) == std::vector<int>{3, 0});

  CHECK_THROWS_WITH_AS(ddim_taus(-1, 4), doctest::Contains("t_start"), Error);
  CHECK_THROWS_WITH_AS(ddim_taus(10, 0), doctest::Contains("n_ddim_steps"), Error);
}

TEST_CASE("autoencoder shape contract and tiling covariance") {
  Prior p = Prior::init(3);
  Rng rng(21);
  ImageF im = sine_texture(16, rng);
  NoGradGuard ng;

  Tensor z = encode(p, image_tensor(im));
  REQUIRE(z.shape() == ad::Shape{1, 4, 4, 4});
  for (double v : z.value()) CHECK(std::isfinite(v));
  Tensor back = decode(p, z);
  REQUIRE(back.shape() == ad::Shape{1, 3, 16, 16});
  for (double v : back.value()) CHECK(std::isfinite(v));

  // purely convolutional with wrap padding: encoding a 2x2-tiled image equals
  // tiling the latent
  ImageF tiled(32, 32, 3);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) tiled.at(y, x, c) = im.at(y % 16, x % 16, c);
  Tensor zt = encode(p, image_tensor(tiled));
  REQUIRE(zt.shape() == ad::Shape{1, 4, 8, 8});
  const auto& zv = z.value();
  const auto& ztv = zt.value();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(ztv[((size_t)c * 8 + y) * 8 + x] == zv[((size_t)c * 4 + y % 4) * 4 + x % 4]);

  // circular shift by one latent cell (4 pixels) shifts the latent by one
  ImageF shifted(16, 16, 3);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) shifted.at(y, x, c) = im.at((y + 4) % 16, (x + 8) % 16, c);
  Tensor zst = encode(p, image_tensor(shifted));
  const auto& zs = zst.value();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(zs[((size_t)c * 4 + y) * 4 + x] ==
              zv[((size_t)c * 4 + (y + 1) % 4) * 4 + (x + 2) % 4]);

  CHECK_THROWS_WITH_AS(encode(p, Tensor::zeros({1, 3, 15, 16})),
                       doctest::Contains("divisible by 4"), Error);
}

TEST_CASE("ddim with an exact linear denoiser recovers the gaussian posterior mean") {
  DiffusionSchedule sc = DiffusionSchedule::linear();
  const double mu0 = 0.3;
  const int ts = 600;
  const double ab_ts = sc.alpha_bar[ts];

  auto run = [&](double s0, double x0, double noise) {
    double zt = std::sqrt(ab_ts) * x0 + std::sqrt(1.0 - ab_ts) * noise;
    auto eps_fn = [&](const Tensor& z, int t) -> Tensor {
      double a = sc.alpha_bar[t];
      double zv = z.item();
      double post = (std::sqrt(a) * s0 * s0 * zv + (1.0 - a) * mu0) / (a * s0 * s0 + 1.0 - a);
      return Tensor::from({1}, {(zv - std::sqrt(a) * post) / std::sqrt(1.0 - a)});
    };
    // one DDIM step per timestep from ts down to 0
    Tensor out = ddim_denoise(sc, Tensor::from({1}, {zt}), eps_fn, ts, ts);
    double analytic =
        (std::sqrt(ab_ts) * s0 * s0 * zt + (1.0 - ab_ts) * mu0) / (ab_ts * s0 * s0 + 1.0 - ab_ts);
    return std::abs(out.item() - analytic);
  };

  Rng rng(5);
  // concentrated prior around mu0
  const double s0 = 2e-4;
  for (int i = 0; i < 4; ++i) {
    double xi = rng.normal(), e = rng.normal();
    CHECK(run(s0, mu0 + s0 * xi, e) <= 1e-3);
  }
  // degenerate prior (point mass): recovery is essentially exact
  CHECK(run(0.0, mu0, rng.normal()) <= 1e-9);
}

TEST_CASE("latent keep weights and the masked eps loss") {
  // teacher-forced prediction: zero loss no matter the weights
  Rng rng(31);
  std::vector<double> ev(4 * 8 * 8);
  for (auto& v : ev) v = rng.normal();
  Tensor eps = Tensor::from({1, 4, 8, 8}, std::move(ev));
  std::vector<double> kv(64);
  for (auto& v : kv) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  Tensor keep = Tensor::from({1, 1, 8, 8}, std::move(kv));
  CHECK(masked_eps_loss(eps, eps, keep).item() == 0.0);

  // constant residual of 0.5: the kept-cell average of squared error is 0.25
  Tensor eps_hat = add_scalar(eps, 0.5);
  CHECK(masked_eps_loss(eps_hat, eps, keep).item() == doctest::Approx(0.25).epsilon(1e-12));

  // all-zero keep: exactly zero, not NaN
  CHECK(masked_eps_loss(eps_hat, eps, Tensor::zeros({1, 1, 8, 8})).item() == 0.0);

  // a single masked pixel at (7,7) with the 4px halo knocks out exactly the
  // latent cells whose 4x4 pixel block meets the euclidean disk of radius 4
  Mask m(32, 32);
  m.set(7, 7, true);
  Tensor kw = latent_keep_weights(m);
  REQUIRE(kw.shape() == ad::Shape{1, 1, 8, 8});
  auto expect_zero = [](int y, int x) {
    return (y == 0 && x == 1) || (y == 1 && x == 0) || (y == 1 && x == 1) ||
           (y == 1 && x == 2) || (y == 2 && x == 1) || (y == 2 && x == 2);
  };
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      CHECK(kw.value()[(size_t)y * 8 + x] == (expect_zero(y, x) ? 0.0 : 1.0));

  // empty and full object masks
  Tensor none_kw = latent_keep_weights(Mask(32, 32));
  for (double v : none_kw.value()) CHECK(v == 1.0);
  Tensor full_kw = latent_keep_weights(Mask(32, 32, 1));
  for (double v : full_kw.value()) CHECK(v == 0.0);

  CHECK_THROWS_WITH_AS(latent_keep_weights(Mask(30, 32)), doctest::Contains("divisible by 4"),
                       Error);
}

TEST_CASE("training step on a fully excluded image is a no-op") {
  Prior p = Prior::init(9);
  Rng rng(4);
  ImageF im = sine_texture(16, rng);
  Mask all(16, 16, 1);
  AdamConfig ac;
  Adam opt(p.base_params(), ac);

  std::vector<std::vector<double>> before;
  for (const auto& t : p.base_params()) before.push_back(t.value());

  Mask rects = random_rect_mask(16, 16, rng);
  CHECK(ddpm_train_step(p, im, rects, all, "base", rng, opt) == 0.0);

  auto after = p.base_params();
  for (size_t i = 0; i < after.size(); ++i) {
    const auto& v = after[i].value();
    for (size_t j = 0; j < v.size(); ++j) CHECK(v[j] == before[i][j]);
  }
  CHECK(opt.steps() == 0);
}

TEST_CASE("denoiser fits a single texture" * doctest::timeout(300)) {
  Prior p = Prior::init(3);
  Rng rng(42);
  ImageF tex = sine_texture(16, rng);
  Mask none(16, 16);
  AdamConfig ac;
  ac.lr = 2e-3;
  ac.clip_norm = 1.0;
  Adam opt(p.base_params(), ac);

  double first50 = 0, last100 = 0;
  for (int k = 1; k <= 2000; ++k) {
    Mask rects = random_rect_mask(16, 16, rng);
    double L = ddpm_train_step(p, tex, rects, none, "base", rng, opt,
                               2e-3 * std::pow(0.1, k / 2000.0));
    CHECK(std::isfinite(L));
    if (k <= 50) first50 += L / 50;
    if (k > 1900) last100 += L / 100;
  }
  // the eps objective collapses once the texture's latent is memorized
  CHECK(first50 > 10.0 * last100);
  CHECK(last100 < 0.5);
}

TEST_CASE("autoencoder reconstructs held-out textures above 28 dB" * doctest::timeout(600)) {
  const BaseFixture& f = trained_base();
  for (const ImageF& im : f.held_out) {
    double db = psnr(roundtrip(f.prior, im), im);
    CHECK(db >= 28.0);
  }
  // sanity: the fit is not a memorization artifact — training textures land
  // in the same quality band rather than far above it
  double train_db = psnr(roundtrip(f.prior, f.train_tex[0]), f.train_tex[0]);
  CHECK(train_db >= 28.0);
  CHECK(train_db <= 45.0);
}

TEST_CASE("partial inpainting: compositing, determinism, and noise-level trust" *
          doctest::timeout(600)) {
  const BaseFixture& f = trained_base();
  const Prior& p = f.prior;
  const ImageF& original = f.held_out[0];
  ImageF rendered(32, 32, 3, 0.5f);  // stand-in render: flat gray
  Mask m(32, 32);
  for (int y = 10; y < 22; ++y)
    for (int x = 8; x < 24; ++x) m.set(y, x, true);

  InpaintRequest req;
  req.mask = m;
  req.t_start = 500;
  req.n_ddim_steps = 20;
  req.seed = 3;
  req.view = 2;

  ImageF out = partial_inpaint(req, rendered, original, p);
  ImageF out_again = partial_inpaint(req, rendered, original, p);
  REQUIRE(out.px.size() == original.px.size());
  for (size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == out_again.px[i]);

  // unmasked pixels are bit-identical to the original at any t_start
  for (int ts : {0, 20, 980}) {
    req.t_start = ts;
    ImageF o = partial_inpaint(req, rendered, original, p);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (!m.at(y, x))
          for (int c = 0; c < 3; ++c) CHECK(o.at(y, x, c) == original.at(y, x, c));
  }

  // different seeds and different views decorrelate the masked content
  req.t_start = 980;
  ImageF a = partial_inpaint(req, rendered, original, p);
  req.seed = 4;
  ImageF b = partial_inpaint(req, rendered, original, p);
  req.seed = 3;
  req.view = 9;
  ImageF c = partial_inpaint(req, rendered, original, p);
  CHECK(masked_mad(a, b, m) > 1e-4);
  CHECK(masked_mad(a, c, m) > 1e-4);

  // t_start = 0: the masked region is exactly the blend pushed through the
  // autoencoder — no noise, no denoiser
  req.seed = 3;
  req.view = 2;
  req.t_start = 0;
  ImageF t0 = partial_inpaint(req, rendered, original, p);
  {
    NoGradGuard ng;
    Tensor mt = mask_image_tensor(m);
    Tensor blend = add(mul(image_tensor(rendered), mt),
                       mul(image_tensor(original), add_scalar(neg(mt), 1.0)));
    ImageF ae = tensor_image(decode(p, encode(p, blend)));
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (m.at(y, x))
          for (int ch = 0; ch < 3; ++ch) CHECK(t0.at(y, x, ch) == ae.at(y, x, ch));
  }

  // shrinking t_start monotonically increases trust in the blend
  ImageF blend_img = original;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (m.at(y, x))
        for (int ch = 0; ch < 3; ++ch) blend_img.at(y, x, ch) = rendered.at(y, x, ch);
  std::vector<double> dev;
  for (int ts : {20, 500, 980}) {
    req.t_start = ts;
    dev.push_back(masked_mad(partial_inpaint(req, rendered, original, p), blend_img, m));
  }
  CHECK(dev[0] <= dev[1]);
  CHECK(dev[1] <= dev[2]);

  // input validation
  req.t_start = 1001;
  CHECK_THROWS_WITH_AS(partial_inpaint(req, rendered, original, p),
                       doctest::Contains("t_start out of range"), Error);
  req.t_start = -1;
  CHECK_THROWS_WITH_AS(partial_inpaint(req, rendered, original, p),
                       doctest::Contains("t_start out of range"), Error);
  req.t_start = 500;
  req.n_ddim_steps = 0;
  CHECK_THROWS_WITH_AS(partial_inpaint(req, rendered, original, p),
                       doctest::Contains("n_ddim_steps"), Error);
  req.n_ddim_steps = 20;
  req.mask = Mask(32, 32);
  CHECK_THROWS_WITH_AS(partial_inpaint(req, rendered, original, p),
                       doctest::Contains("empty mask"), Error);
  req.mask = m;
  CHECK_THROWS_WITH_AS(partial_inpaint(req, ImageF(16, 16, 3), original, p),
                       doctest::Contains("size mismatch"), Error);
}

TEST_CASE("per-scene customization" * doctest::timeout(600)) {
  const BaseFixture& f = trained_base();
  scene::SceneDataset ds = small_scene();

  // rank 0: a plain copy, no new token, no adapters
  Prior noop = customize(f.prior, ds, 0, 50, 5);
  CHECK(noop.tokens == f.prior.tokens);
  CHECK(noop.lora_rank == 0);
  CHECK(noop.adapters.empty());
  CHECK(same_params(noop.all_params(), f.prior.all_params()));

  // zero training steps: adapters are zero-initialized, so the base token's
  // denoiser output is bit-identical to the base prior's
  Prior zero_steps = customize(f.prior, ds, 4, 0, 5);
  REQUIRE(zero_steps.tokens.size() == 2);
  REQUIRE((int)zero_steps.adapters.size() == 5);
  {
    NoGradGuard ng;
    Rng rng(77);
    std::vector<double> zv(4 * 8 * 8), mv(64);
    for (auto& v : zv) v = rng.normal();
    for (auto& v : mv) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    Tensor z_t = Tensor::from({1, 4, 8, 8}, zv);
    Tensor z_c = Tensor::from({1, 4, 8, 8}, std::vector<double>(4 * 8 * 8, 0.1));
    Tensor ml = Tensor::from({1, 1, 8, 8}, mv);
    Tensor be = denoise_eps(f.prior, z_t, z_c, ml, 340, "base");
    Tensor ce = denoise_eps(zero_steps, z_t, z_c, ml, 340, "base");
    for (size_t i = 0; i < be.value().size(); ++i) CHECK(be.value()[i] == ce.value()[i]);
  }

  // real customization: base weights must not move at all
  Prior custom = customize(f.prior, ds, 4, 1500, 5);
  REQUIRE(custom.tokens.size() == 2);
  CHECK(custom.tokens[1] == "scene_11");
  CHECK(same_params(custom.base_params(), f.prior.base_params()));
  for (const Lora& l : custom.adapters) {
    CHECK(l.a.shape()[0] == 4);
    double bsum = 0;
    for (double v : l.b.value()) bsum += std::abs(v);
    CHECK(bsum > 0.0);  // training actually moved the adapters
  }

  // the customized token synthesizes more seed-consistent content than the
  // base prior on the scene's own views
  for (int idx : {0, 1}) {
    const auto& im = ds.by_id(ds.train_ids()[idx]);
    double sb = seed_spread(f.prior, "base", im);
    double sc = seed_spread(custom, custom.tokens[1], im);
    CHECK(sc < 0.95 * sb);
  }

  // stripping the adapters restores base behavior exactly
  Prior stripped = custom.clone();
  stripped.lora_rank = 0;
  stripped.adapters.clear();
  {
    NoGradGuard ng;
    Tensor z_t = Tensor::from({1, 4, 8, 8}, std::vector<double>(256, 0.2));
    Tensor z_c = Tensor::zeros({1, 4, 8, 8});
    Tensor ml = Tensor::from({1, 1, 8, 8}, std::vector<double>(64, 1.0));
    Tensor a = denoise_eps(f.prior, z_t, z_c, ml, 700, "base");
    Tensor b = denoise_eps(stripped, z_t, z_c, ml, 700, "base");
    for (size_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == b.value()[i]);
  }

  CHECK_THROWS_WITH_AS(denoise_eps(custom, Tensor::zeros({1, 4, 8, 8}),
                                   Tensor::zeros({1, 4, 8, 8}), Tensor::zeros({1, 1, 8, 8}),
                                   10, "no_such_token"),
                       doctest::Contains("unknown conditioning token"), Error);
}

TEST_CASE("oracle inpainting: exactness, per-view fields, and seam control") {
  Rng rng(15);
  ImageF original = sine_texture(32, rng);
  ImageF plate = sine_texture(32, rng);  // stands in for the object-free capture
  ImageF rendered(32, 32, 3, 0.5f);
  Mask m(32, 32);
  for (int y = 8; y < 24; ++y)
    for (int x = 8; x < 24; ++x) m.set(y, x, true);

  InpaintRequest req;
  req.mask = m;
  req.seed = 21;
  req.view = 0;

  // zero perturbations: masked region is the plate, outside is the original
  OracleShift off;
  off.rho = 0;
  off.c[0] = off.c[1] = off.c[2] = 0;
  ImageF clean = oracle_inpaint(req, rendered, original, plate, 0.0, off);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(clean.at(y, x, c) == (m.at(y, x) ? plate.at(y, x, c) : original.at(y, x, c)));

  // determinism, and per-view decorrelation of the low-frequency field
  ImageF v0 = oracle_inpaint(req, rendered, original, plate, 0.05, off);
  ImageF v0b = oracle_inpaint(req, rendered, original, plate, 0.05, off);
  req.view = 1;
  ImageF v1 = oracle_inpaint(req, rendered, original, plate, 0.05, off);
  req.view = 0;
  for (size_t i = 0; i < v0.px.size(); ++i) CHECK(v0.px[i] == v0b.px[i]);
  CHECK(masked_mad(v0, v1, m) > 1e-4);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (!m.at(y, x))
        for (int c = 0; c < 3; ++c) CHECK(v1.at(y, x, c) == original.at(y, x, c));

  // seam discontinuity grows strictly with the color offset magnitude
  auto seam = [&](const ImageF& im) {
    double acc = 0;
    int n = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        if (!m.at(y, x)) continue;
        const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          int yy = y + dy[k], xx = x + dx[k];
          if (yy < 0 || yy >= 32 || xx < 0 || xx >= 32 || m.at(yy, xx)) continue;
          for (int c = 0; c < 3; ++c) acc += std::abs((double)im.at(y, x, c) - im.at(yy, xx, c));
          ++n;
        }
      }
    return acc / n;
  };
  // use the original as its own plate so the seam is driven by the shift only
  std::vector<double> seams;
  for (double k : {0.0, 0.5, 1.0, 2.0}) {
    OracleShift sh;  // default rho and c
    sh.c[0] *= k;
    sh.c[1] *= k;
    sh.c[2] *= k;
    seams.push_back(seam(oracle_inpaint(req, rendered, original, original, 0.0, sh)));
  }
  CHECK(seams[0] < seams[1]);
  CHECK(seams[1] < seams[2]);
  CHECK(seams[2] < seams[3]);

  CHECK_THROWS_WITH_AS(oracle_inpaint(req, rendered, original, ImageF(), 0.0, off),
                       doctest::Contains("gt_removed"), Error);
}

TEST_CASE("prior checkpoints round-trip through blob and manifest" * doctest::timeout(600)) {
  const BaseFixture& f = trained_base();
  scene::SceneDataset ds = small_scene();
  Prior custom = customize(f.prior, ds, 2, 20, 8);
  std::string dir = temp_dir("ckpt");
  std::string path = dir + "/prior.mnrf";
  save_prior(custom, path);

  // sidecar manifest records the conditioning vocabulary and adapter rank
  auto manifest = nlohmann::json::parse(read_file(path + ".manifest.json"));
  CHECK(manifest.at("tokens").get<std::vector<std::string>>() ==
        std::vector<std::string>{"base", "scene_11"});
  CHECK(manifest.at("rank").get<int>() == 2);

  Prior loaded = load_prior(path);
  CHECK(loaded.tokens == custom.tokens);
  CHECK(loaded.lora_rank == 2);
  CHECK(same_params(loaded.all_params(), custom.all_params()));

  {
    NoGradGuard ng;
    Rng rng(55);
    std::vector<double> zv(256);
    for (auto& v : zv) v = rng.normal();
    Tensor z_t = Tensor::from({1, 4, 8, 8}, zv);
    Tensor z_c = Tensor::zeros({1, 4, 8, 8});
    Tensor ml = Tensor::from({1, 1, 8, 8}, std::vector<double>(64, 1.0));
    Tensor a = denoise_eps(custom, z_t, z_c, ml, 123, "scene_11");
    Tensor b = denoise_eps(loaded, z_t, z_c, ml, 123, "scene_11");
    for (size_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == b.value()[i]);
  }

  // wrong blob kind
  {
    Blob wrong;
    wrong.kind = 1;
    wrong.meta = {1};
    write_blob(dir + "/wrong.mnrf", wrong);
    CHECK_THROWS_WITH_AS(load_prior(dir + "/wrong.mnrf"), doctest::Contains("blob kind"), Error);
  }
  // malformed meta
  {
    Blob bad;
    bad.kind = kPriorBlobKind;
    bad.meta = {32, 32, 1};
    write_blob(dir + "/badmeta.mnrf", bad);
    CHECK_THROWS_WITH_AS(load_prior(dir + "/badmeta.mnrf"), doctest::Contains("arity"), Error);
  }
  // parameter payload of the wrong size
  {
    Blob bad;
    bad.kind = kPriorBlobKind;
    bad.meta = {32, 32, 1, 0, 1000};
    bad.params = {1.f, 2.f, 3.f};
    write_blob(dir + "/badcount.mnrf", bad);
    write_file(dir + "/badcount.mnrf.manifest.json", "{\"tokens\":[\"base\"],\"rank\":0}\n");
    CHECK_THROWS_WITH_AS(load_prior(dir + "/badcount.mnrf"),
                         doctest::Contains("parameter count"), Error);
  }
  // manifest gone missing
  {
    fs::remove(path + ".manifest.json");
    CHECK_THROWS_WITH_AS(load_prior(path), doctest::Contains("manifest"), Error);
  }
  fs::remove_all(dir);
}
