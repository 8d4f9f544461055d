#include "maldnerf/prior/prior.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "maldnerf/util/bridge.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/io.hpp"

namespace maldnerf::prior {

using namespace maldnerf::ad;

namespace {

Tensor conv_init(int out, int in, int k, Rng& rng) {
  std::vector<double> v((int64_t)out * in * k * k);
  double s = std::sqrt(2.0 / (in * k * k));
  for (auto& x : v) x = s * rng.normal();
  return Tensor::from({out, in, k, k}, std::move(v), true);
}

Conv make_conv(int out, int in, int k, Rng& rng) {
  return {conv_init(out, in, k, rng), Tensor::zeros({out}, true)};
}

// wrap-padded 3x3 convolution (+bias): purely convolutional, tiling-covariant
Tensor wconv(const Tensor& x, const Conv& c) {
  int C = c.w.shape()[0];
  return add(conv2d(pad2d_wrap(x, 1), c.w, 1, 0), reshape(c.b, {1, C, 1, 1}));
}

// centered softplus: smooth, act(0) = 0, slope 1/2 at the origin
Tensor act(const Tensor& x) {
  return add_scalar(softplus(x), -0.6931471805599453);
}

void push_conv(const Conv& c, std::vector<Tensor>& out) {
  out.push_back(c.w);
  out.push_back(c.b);
}

Tensor clone_leaf(const Tensor& t) {
  return Tensor::from(t.shape(), t.value(), true);
}

Conv clone_conv(const Conv& c) { return {clone_leaf(c.w), clone_leaf(c.b)}; }

std::vector<int> film_channels(int base) {
  return {base, 2 * base, 4 * base, 2 * base, base};
}

Tensor time_embedding(int t, int T, int e_dim) {
  std::vector<double> v(e_dim);
  double tn = (double)t / T;
  for (int k = 0; k < e_dim / 2; ++k) {
    double f = std::pow(2.0, k) * 3.14159265358979323846 * tn;
    v[2 * k] = std::sin(f);
    v[2 * k + 1] = std::cos(f);
  }
  return Tensor::from({1, e_dim}, std::move(v));
}

}  // namespace

Prior Prior::init(uint64_t seed) {
  Prior p;
  p.sched = DiffusionSchedule::linear();
  Rng rng(Rng::mix({seed, 0x9d10a}));
  int B = p.base_w;

  p.enc1 = make_conv(B, 3, 3, rng);
  p.enc2 = make_conv(2 * B, B, 3, rng);
  p.enc3 = make_conv(4, 2 * B, 3, rng);
  p.dec1 = make_conv(2 * B, 4, 3, rng);
  p.dec2 = make_conv(B, 2 * B, 3, rng);
  p.dec3 = make_conv(3, B, 3, rng);

  p.d_enc1a = make_conv(B, 9, 3, rng);
  p.d_enc1b = make_conv(B, B, 3, rng);
  p.d_enc2a = make_conv(2 * B, B, 3, rng);
  p.d_enc2b = make_conv(2 * B, 2 * B, 3, rng);
  p.d_mid_a = make_conv(4 * B, 2 * B, 3, rng);
  p.d_mid_b = make_conv(4 * B, 4 * B, 3, rng);
  p.d_up1a = make_conv(2 * B, 6 * B, 3, rng);
  p.d_up1b = make_conv(2 * B, 2 * B, 3, rng);
  p.d_up2a = make_conv(B, 3 * B, 3, rng);
  p.d_up2b = make_conv(B, B, 3, rng);
  p.d_out = make_conv(4, B, 3, rng);

  for (int c : film_channels(B)) {
    std::vector<double> w((int64_t)2 * c * p.e_dim);
    double s = 0.1 / std::sqrt((double)p.e_dim);
    for (auto& x : w) x = s * rng.normal();
    p.film_w.push_back(Tensor::from({2 * c, p.e_dim}, std::move(w), true));
    p.film_b.push_back(Tensor::zeros({2 * c}, true));
  }

  p.tokens = {"base"};
  std::vector<double> row(p.e_dim);
  for (auto& x : row) x = 0.1 * rng.normal();
  p.token_rows.push_back(Tensor::from({p.e_dim}, std::move(row), true));

  for (auto& t : p.all_params())
    for (auto& v : t.leaf_value()) v = (double)(float)v;
  return p;
}

Prior Prior::clone() const {
  Prior p = *this;
  for (Conv* c : {&p.enc1, &p.enc2, &p.enc3, &p.dec1, &p.dec2, &p.dec3, &p.d_enc1a, &p.d_enc1b,
                  &p.d_enc2a, &p.d_enc2b, &p.d_mid_a, &p.d_mid_b, &p.d_up1a, &p.d_up1b,
                  &p.d_up2a, &p.d_up2b, &p.d_out})
    *c = clone_conv(*c);
  for (auto& t : p.film_w) t = clone_leaf(t);
  for (auto& t : p.film_b) t = clone_leaf(t);
  for (auto& t : p.token_rows) t = clone_leaf(t);
  for (auto& l : p.adapters) l = {clone_leaf(l.a), clone_leaf(l.b)};
  return p;
}

std::vector<Tensor> Prior::base_params() const {
  std::vector<Tensor> out;
  for (const Conv* c : {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3, &d_enc1a, &d_enc1b, &d_enc2a,
                        &d_enc2b, &d_mid_a, &d_mid_b, &d_up1a, &d_up1b, &d_up2a, &d_up2b,
                        &d_out})
    push_conv(*c, out);
  for (size_t i = 0; i < film_w.size(); ++i) {
    out.push_back(film_w[i]);
    out.push_back(film_b[i]);
  }
  out.push_back(token_rows[0]);
  return out;
}

std::vector<Tensor> Prior::all_params() const {
  std::vector<Tensor> out = base_params();
  for (size_t i = 1; i < token_rows.size(); ++i) out.push_back(token_rows[i]);
  for (const auto& l : adapters) {
    out.push_back(l.a);
    out.push_back(l.b);
  }
  return out;
}

int Prior::token_index(const std::string& name) const {
  for (size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == name) return (int)i;
  raise("prior", "unknown conditioning token '" + name + "'");
}

Tensor encode(const Prior& p, const Tensor& img) {
  const ad::Shape& s = img.shape();
  require(s.size() == 4 && s[1] == 3 && s[2] % 4 == 0 && s[3] % 4 == 0, "prior",
          "encode needs [B,3,H,W] with dims divisible by 4");
  Tensor h = add_scalar(img, -0.5);  // center: pixel data lives in [0,1]
  h = avg_pool2(act(wconv(h, p.enc1)));
  h = avg_pool2(act(wconv(h, p.enc2)));
  return wconv(h, p.enc3);
}

Tensor decode(const Prior& p, const Tensor& z) {
  Tensor h = upsample_nearest2(act(wconv(z, p.dec1)));
  h = upsample_nearest2(act(wconv(h, p.dec2)));
  return add_scalar(wconv(h, p.dec3), 0.5);
}

namespace {

// FiLM with optional low-rank adapter on the projection
Tensor film(const Prior& p, int stage, const Tensor& h, const Tensor& cond) {
  Tensor w = p.film_w[stage];
  if (p.lora_rank > 0)
    w = add(w, matmul(p.adapters[stage].b, p.adapters[stage].a, false, false));
  int C = (int)p.film_b[stage].numel() / 2;
  Tensor sb = add(matmul(cond, w, false, true), reshape(p.film_b[stage], {1, 2 * C}));
  Tensor scale = reshape(slice(sb, {0, 0}, {1, C}), {1, C, 1, 1});
  Tensor shift = reshape(slice(sb, {0, C}, {1, C}), {1, C, 1, 1});
  // tanh-bounded modulation keeps the per-stage gain in [1/2, 3/2]; unbounded
  // multiplicative scales make conditioning feedback loops diverge under Adam
  return add(mul(h, add_scalar(mul_scalar(tanh(scale), 0.5), 1.0)), tanh(shift));
}

}  // namespace

Tensor denoise_eps(const Prior& p, const Tensor& z_t, const Tensor& z_cond,
                   const Tensor& m_lat, int t, const std::string& condition) {
  require(t >= 0 && t <= p.sched.T, "prior", "timestep out of range");
  require(z_t.shape() == z_cond.shape(), "shape", "denoise_eps latent shape mismatch");
  require(z_t.shape()[0] == 1, "shape", "denoise_eps expects batch size 1");
  Tensor cond = add(time_embedding(t, p.sched.T, p.e_dim),
                    reshape(p.token_rows[p.token_index(condition)], {1, p.e_dim}));

  Tensor x = concat({z_t, z_cond, m_lat}, 1);
  Tensor e1 = act(wconv(act(film(p, 0, wconv(x, p.d_enc1a), cond)), p.d_enc1b));
  Tensor e2 = act(wconv(act(film(p, 1, wconv(avg_pool2(e1), p.d_enc2a), cond)), p.d_enc2b));
  Tensor mid = act(wconv(act(film(p, 2, wconv(avg_pool2(e2), p.d_mid_a), cond)), p.d_mid_b));
  Tensor u1 = concat({upsample_nearest2(mid), e2}, 1);
  u1 = act(wconv(act(film(p, 3, wconv(u1, p.d_up1a), cond)), p.d_up1b));
  Tensor u2 = concat({upsample_nearest2(u1), e1}, 1);
  u2 = act(wconv(act(film(p, 4, wconv(u2, p.d_up2a), cond)), p.d_up2b));
  return wconv(u2, p.d_out);
}

Mask random_rect_mask(int h, int w, Rng& rng) {
  Mask m(h, w);
  int n = 1 + rng.uniform_int(4);
  for (int k = 0; k < n; ++k) {
    int rh = 2 + rng.uniform_int(std::max(1, h / 2));
    int rw = 2 + rng.uniform_int(std::max(1, w / 2));
    int y0 = rng.uniform_int(std::max(1, h - rh));
    int x0 = rng.uniform_int(std::max(1, w - rw));
    for (int y = y0; y < std::min(h, y0 + rh); ++y)
      for (int x = x0; x < std::min(w, x0 + rw); ++x) m.set(y, x, 1);
  }
  return m;
}

Tensor latent_keep_weights(const Mask& object_mask) {
  require(object_mask.h % 4 == 0 && object_mask.w % 4 == 0, "prior",
          "mask dims must be divisible by 4");
  // halo of 4 pixels approximates the encoder's receptive-field spill
  Mask d = dilate_disk(object_mask, 4);
  int lh = object_mask.h / 4, lw = object_mask.w / 4;
  std::vector<double> keep((size_t)lh * lw, 1.0);
  for (int y = 0; y < lh; ++y)
    for (int x = 0; x < lw; ++x)
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx)
          if (d.at(4 * y + dy, 4 * x + dx)) {
            keep[(size_t)y * lw + x] = 0.0;
            dy = dx = 4;
          }
  return Tensor::from({1, 1, lh, lw}, std::move(keep));
}

Tensor masked_eps_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor& keep) {
  double total = 0;
  for (double v : keep.value()) total += v;
  if (total == 0.0) return Tensor::scalar(0.0);
  int C = eps.shape()[1];
  return mul_scalar(sum_all(mul(square(sub(eps_hat, eps)), keep)), 1.0 / (C * total));
}

namespace {

// area-downsample a pixel mask to latent resolution (fractional coverage)
Tensor latent_mask(const Mask& m) {
  int lh = m.h / 4, lw = m.w / 4;
  std::vector<double> v((size_t)lh * lw, 0.0);
  for (int y = 0; y < lh; ++y)
    for (int x = 0; x < lw; ++x) {
      int cnt = 0;
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx) cnt += m.at(4 * y + dy, 4 * x + dx) ? 1 : 0;
      v[(size_t)y * lw + x] = cnt / 16.0;
    }
  return Tensor::from({1, 1, lh, lw}, std::move(v));
}

Tensor gaussian_like(const ad::Shape& s, Rng& rng) {
  size_t n = 1;
  for (int d : s) n *= (size_t)d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor::from(s, std::move(v));
}

}  // namespace

double ae_train_step(Prior& p, const ImageF& image, const Mask& object_mask, ad::Adam& opt,
                     double lr_override) {
  Tensor x = image_tensor(image);
  Tensor keep = sub(Tensor::full({1, 1, image.h, image.w}, 1.0), mask_image_tensor(object_mask));
  double total = 0;
  for (double v : keep.value()) total += v;
  if (total == 0.0) return 0.0;
  Tensor recon = decode(p, encode(p, x));
  Tensor loss = mul_scalar(sum_all(mul(square(sub(recon, x)), keep)), 1.0 / (3.0 * total));
  auto gs = grad(loss, opt.params(), {});
  opt.step(gs, lr_override);
  return loss.item();
}

double ddpm_train_step(Prior& p, const ImageF& image, const Mask& train_mask,
                       const Mask& object_mask, const std::string& condition, Rng& rng,
                       ad::Adam& opt, double lr_override) {
  Tensor keep = latent_keep_weights(object_mask);
  int t = 1 + rng.uniform_int(p.sched.T);
  Tensor z0 = [&] {
    NoGradGuard ng;
    return encode(p, image_tensor(image));
  }();
  Tensor eps = gaussian_like(z0.shape(), rng);
  double total = 0;
  for (double v : keep.value()) total += v;
  if (total == 0.0) return 0.0;  // fully excluded: nothing to learn from
  double ab = p.sched.alpha_bar[t];
  Tensor z_t = add(mul_scalar(z0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
  Tensor m_lat = latent_mask(train_mask);
  Tensor z_cond = mul(z0, add_scalar(neg(m_lat), 1.0));
  Tensor eps_hat = denoise_eps(p, z_t, z_cond, m_lat, t, condition);
  Tensor loss = masked_eps_loss(eps_hat, eps, keep);
  auto gs = grad(loss, opt.params(), {});
  opt.step(gs, lr_override);
  return loss.item();
}

std::vector<int> ddim_taus(int t_start, int n_steps) {
  require(t_start >= 0, "inpaint", "t_start out of range");
  require(n_steps >= 1, "inpaint", "n_ddim_steps must be >= 1");
  std::vector<int> taus;
  for (int i = 0; i <= n_steps; ++i) {
    int tau = (int)std::llround((double)t_start * (n_steps - i) / n_steps);
    if (taus.empty() || tau < taus.back()) taus.push_back(tau);
  }
  return taus;
}

Tensor ddim_denoise(const DiffusionSchedule& sched, Tensor z,
                    const std::function<Tensor(const Tensor&, int)>& eps_fn, int t_start,
                    int n_steps) {
  require(t_start <= sched.T, "inpaint", "t_start out of range");
  std::vector<int> taus = ddim_taus(t_start, n_steps);
  for (size_t i = 0; i < taus.size(); ++i) {
    if (taus[i] == 0) break;  // ᾱ₀ = 1 exactly, so z already equals ẑ₀
    double ab = sched.alpha_bar[taus[i]];
    Tensor eps_hat = eps_fn(z, taus[i]);
    Tensor z0_hat =
        mul_scalar(sub(z, mul_scalar(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    if (i + 1 < taus.size()) {
      double abn = sched.alpha_bar[taus[i + 1]];
      z = add(mul_scalar(z0_hat, std::sqrt(abn)), mul_scalar(eps_hat, std::sqrt(1.0 - abn)));
    } else {
      z = z0_hat;
    }
  }
  return z;
}

ImageF partial_inpaint(const InpaintRequest& req, const ImageF& rendered,
                       const ImageF& original, const Prior& p) {
  require(rendered.h == original.h && rendered.w == original.w, "inpaint",
          "rendered/original size mismatch");
  require(req.mask.h == original.h && req.mask.w == original.w, "inpaint",
          "mask size mismatch");
  require(req.mask.count() > 0, "inpaint", "empty mask for inpainting");
  require(req.t_start >= 0 && req.t_start <= p.sched.T, "inpaint", "t_start out of range");
  require(req.n_ddim_steps >= 1, "inpaint", "n_ddim_steps must be >= 1");

  NoGradGuard ng;
  Tensor m = mask_image_tensor(req.mask);
  Tensor blend = add(mul(image_tensor(rendered), m),
                     mul(image_tensor(original), add_scalar(neg(m), 1.0)));
  Tensor z0 = encode(p, blend);
  Tensor m_lat = latent_mask(req.mask);
  Tensor z_cond = mul(z0, add_scalar(neg(m_lat), 1.0));

  Rng rng(Rng::mix({req.seed, req.view, 0xdd1a}));
  double ab0 = p.sched.alpha_bar[req.t_start];
  Tensor z = add(mul_scalar(z0, std::sqrt(ab0)),
                 mul_scalar(gaussian_like(z0.shape(), rng), std::sqrt(1.0 - ab0)));

  auto eps_fn = [&](const Tensor& zt, int t) {
    return denoise_eps(p, zt, z_cond, m_lat, t, req.condition);
  };
  z = ddim_denoise(p.sched, z, eps_fn, req.t_start, req.n_ddim_steps);

  ImageF result = tensor_image(decode(p, z));
  // re-composite in pixel space so unmasked pixels are bit-identical
  for (int y = 0; y < original.h; ++y)
    for (int x = 0; x < original.w; ++x)
      if (!req.mask.at(y, x))
        for (int c = 0; c < 3; ++c) result.at(y, x, c) = original.at(y, x, c);
  return result;
}

Prior customize(const Prior& p, const scene::SceneDataset& scene, int rank, int steps,
                uint64_t seed) {
  if (rank == 0) return p.clone();
  std::vector<int> ids = scene.train_ids();
  require(!ids.empty(), "prior", "customize needs a nonempty train split");

  Prior q = p.clone();
  Rng rng(Rng::mix({seed, 0xc057}));

  // fresh token near the mean embedding
  std::vector<double> mean(q.e_dim, 0.0);
  for (const auto& row : q.token_rows)
    for (int i = 0; i < q.e_dim; ++i) mean[i] += row.value()[i] / q.token_rows.size();
  for (auto& v : mean) v += 0.01 * rng.normal();
  std::string token = "scene_" + std::to_string(scene.descriptor.seed);
  q.tokens.push_back(token);
  q.token_rows.push_back(Tensor::from({q.e_dim}, std::move(mean), true));

  q.lora_rank = rank;
  auto ch = film_channels(q.base_w);
  for (int c : ch) {
    std::vector<double> av((int64_t)rank * q.e_dim);
    for (auto& v : av) v = 0.01 * rng.normal();
    Lora l;
    l.a = Tensor::from({rank, q.e_dim}, std::move(av), true);
    l.b = Tensor::zeros({2 * c, rank}, true);  // zero: starts exactly at base
    q.adapters.push_back(l);
  }

  std::vector<Tensor> train_set = {q.token_rows.back()};
  for (const auto& l : q.adapters) {
    train_set.push_back(l.a);
    train_set.push_back(l.b);
  }
  for (auto& t : train_set)
    for (auto& v : t.leaf_value()) v = (double)(float)v;  // checkpoint-grid init
  ad::AdamConfig ac;
  ac.lr = 2e-3;
  ac.clip_norm = 1.0;  // small-t samples spike the eps-target gain
  ad::Adam opt(train_set, ac);

  for (int k = 0; k < steps; ++k) {
    const auto& im = scene.by_id(ids[rng.uniform_int((int)ids.size())]);
    Mask rects = random_rect_mask(im.pixels.h, im.pixels.w, rng);
    ddpm_train_step(q, im.pixels, rects, im.mask, token, rng, opt);
  }
  return q;
}

ImageF oracle_inpaint(const InpaintRequest& req, const ImageF& rendered,
                      const ImageF& original, const ImageF& gt_removed, double sigma_incon,
                      const OracleShift& shift) {
  (void)rendered;  // the oracle looks at ground truth, not the render
  require(gt_removed.h == original.h && gt_removed.w == original.w, "inpaint",
          "gt_removed size mismatch");
  require(req.mask.h == original.h && req.mask.w == original.w, "inpaint",
          "mask size mismatch");
  int H = original.h, W = original.w;

  // low-frequency per-view field: bilinear coarse lattice, one per channel
  int gh = H / 8 + 2, gw = W / 8 + 2;
  std::vector<double> lattice((size_t)3 * gh * gw);
  Rng rng(Rng::mix({req.seed, req.view, 0x04ac1e}));
  for (auto& v : lattice) v = sigma_incon * rng.normal();
  auto field = [&](int c, int y, int x) {
    double fy = y / 8.0, fx = x / 8.0;
    int y0 = (int)fy, x0 = (int)fx;
    double ay = fy - y0, ax = fx - x0;
    auto L = [&](int yy, int xx) { return lattice[((size_t)c * gh + yy) * gw + xx]; };
    return (1 - ay) * ((1 - ax) * L(y0, x0) + ax * L(y0, x0 + 1)) +
           ay * ((1 - ax) * L(y0 + 1, x0) + ax * L(y0 + 1, x0 + 1));
  };

  ImageF out = original;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!req.mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        // 3x3 clamped box blur of the clean plate
        double blur = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = std::min(H - 1, std::max(0, y + dy));
            int xx = std::min(W - 1, std::max(0, x + dx));
            blur += gt_removed.at(yy, xx, c);
          }
        blur /= 9.0;
        double v = (1.0 - shift.rho) * gt_removed.at(y, x, c) + shift.rho * blur;
        v += shift.c[c] + field(c, y, x);
        out.at(y, x, c) = (float)std::min(1.0, std::max(0.0, v));
      }
    }
  return out;
}

void save_prior(const Prior& p, const std::string& path) {
  Blob b;
  b.kind = kPriorBlobKind;
  b.meta = {p.e_dim, p.base_w, (int64_t)p.tokens.size(), p.lora_rank, p.sched.T};
  for (const auto& t : p.all_params())
    for (double v : t.value()) b.params.push_back((float)v);
  write_blob(path, b);
  nlohmann::ordered_json manifest;
  manifest["tokens"] = p.tokens;
  manifest["rank"] = p.lora_rank;
  write_file(path + ".manifest.json", manifest.dump(2) + "\n");
}

Prior load_prior(const std::string& path) {
  Blob b = read_blob(path, kPriorBlobKind);
  require(b.meta.size() == 5, "checkpoint", "prior blob meta has wrong arity");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(path + ".manifest.json"));
  } catch (const std::exception& e) {
    raise("checkpoint", "prior manifest unreadable: " + std::string(e.what()));
  }
  Prior p = Prior::init(0);
  require((int)b.meta[0] == p.e_dim && (int)b.meta[1] == p.base_w &&
              (int)b.meta[4] == p.sched.T,
          "checkpoint", "prior blob geometry mismatch");
  p.tokens = manifest.at("tokens").get<std::vector<std::string>>();
  require((int64_t)p.tokens.size() == b.meta[2], "checkpoint",
          "prior manifest token count mismatch");
  while (p.token_rows.size() < p.tokens.size())
    p.token_rows.push_back(Tensor::zeros({p.e_dim}, true));
  p.lora_rank = (int)b.meta[3];
  if (p.lora_rank > 0)
    for (int c : film_channels(p.base_w))
      p.adapters.push_back({Tensor::zeros({p.lora_rank, p.e_dim}, true),
                            Tensor::zeros({2 * c, p.lora_rank}, true)});
  auto ps = p.all_params();
  size_t need = 0;
  for (const auto& t : ps) need += t.numel();
  require(b.params.size() == need, "checkpoint", "prior blob parameter count mismatch");
  size_t k = 0;
  for (auto& t : ps) {
    auto& v = t.leaf_value();
    for (auto& x : v) x = (double)b.params[k++];
  }
  return p;
}

}  // namespace maldnerf::prior
