#include "maldnerf/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "maldnerf/eval/extractor.hpp"
#include "maldnerf/losses/losses.hpp"
#include "maldnerf/util/bridge.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/io.hpp"

namespace maldnerf::trainer {

using namespace maldnerf::ad;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// stream tags: every random draw is keyed by (seed, iteration, purpose), so
// checkpoint resume replays the exact trajectory of an uninterrupted run
constexpr uint64_t kFieldInitTag = 0xf1e1d;
constexpr uint64_t kDiscInitTag = 0xd15c0;
constexpr uint64_t kRayTag = 0x5a45;
constexpr uint64_t kPatchTag = 0x9a7c;
constexpr uint64_t kDepthPairTag = 0xde99;
constexpr uint64_t kDepthMapTag = 0xde90;
constexpr uint64_t kIduPickTag = 0x1d01;
constexpr uint64_t kIduSeedTag = 0x1d02;
constexpr uint64_t kJitterReconTag = 0x717a;
constexpr uint64_t kJitterPatchTag = 0x717b;

field::RenderOptions render_opts(const TrainConfig& cfg) {
  field::RenderOptions opt;
  opt.n_prop1 = cfg.samples_prop1;
  opt.n_prop2 = cfg.samples_prop2;
  opt.n_final = cfg.samples_final;
  return opt;
}

adv::AdvConfig adv_opts(const TrainConfig& cfg) {
  adv::AdvConfig ac;
  ac.patch_size = cfg.patch_size;
  ac.candidate_size = cfg.candidate_size;
  ac.r_blocks = cfg.r_blocks;
  ac.base_channels = cfg.base_channels;
  ac.max_channels = cfg.max_channels;
  return ac;
}

void push_ray(const scene::CameraModel& cam, int y, int x, std::vector<double>& ov,
              std::vector<double>& dv) {
  scene::Vec3 o, d;
  cam.ray(x + 0.5, y + 0.5, o, d);
  ov.insert(ov.end(), {o.x, o.y, o.z});
  dv.insert(dv.end(), {d.x, d.y, d.z});
}

// evaluates a loss term and enforces the non-finite abort contract
double term(const Tensor& t, const char* name, int64_t k) {
  double v = t.item();
  require(std::isfinite(v), "non-finite-loss",
          std::string("non-finite ") + name + " at iteration " + std::to_string(k));
  return v;
}

Tensor weighted(const Tensor& acc, const Tensor& t, double w) {
  if (w == 0.0) return acc;
  return acc.defined() ? add(acc, mul_scalar(t, w)) : mul_scalar(t, w);
}

// [R,3] ray colors (rows ordered patch-major, then row-major within a patch)
// into [B,3,P,P] patches
Tensor rays_to_patches(const Tensor& rgb, int B, int P) {
  int R = B * P * P;
  std::vector<Tensor> chans;
  for (int c = 0; c < 3; ++c)
    chans.push_back(reshape(slice(rgb, {0, c}, {R, 1}), {B, 1, P, P}));
  return concat(chans, 1);
}

const eval::FeatureExtractor& perc_extractor(uint64_t seed) {
  static std::map<uint64_t, eval::FeatureExtractor> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, eval::FeatureExtractor::init(seed)).first;
  return it->second;
}

std::string pad6(int64_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld", (long long)k);
  return buf;
}

void append_line(std::ofstream& os, const ordered_json& rec, const std::string& path) {
  os << rec.dump() << "\n";
  os.flush();
  require(os.good(), "io", "cannot append to " + path);
}

}  // namespace

int hifa_timestep(int64_t k, int64_t K, int t_max, int t_min) {
  require(K >= 1 && k >= 0 && k <= K, "trainer", "hifa_timestep needs 0 <= k <= K, K >= 1");
  double t = t_max - (t_max - t_min) * std::sqrt((double)k / (double)K);
  return std::clamp((int)std::llround(t), t_min, t_max);
}

double field_lr(const TrainConfig& cfg, int64_t k) {
  if (cfg.K <= 1) return cfg.field_lr_init;
  double a = (double)k / (double)(cfg.K - 1);
  return cfg.field_lr_init * std::pow(cfg.field_lr_final / cfg.field_lr_init, a);
}

InpaintBackend make_backend(const TrainConfig& cfg, const prior::Prior* p) {
  InpaintBackend b;
  if (cfg.prior_kind == "oracle") {
    b.oracle = true;
    b.sigma_incon = cfg.oracle_sigma_incon;
    if (!cfg.oracle_texture_shift) b.shift = prior::OracleShift{0.0, {0.0, 0.0, 0.0}};
    return b;
  }
  require(p != nullptr, "trainer", "prior_kind = diffusion requires a loaded prior");
  b.prior = p;
  if (cfg.prior_token == "auto") {
    // prefer the per-scene token a customized prior carries
    b.token = p->tokens.size() > 1 ? p->tokens.back() : "base";
  } else {
    p->token_index(cfg.prior_token);  // validates the name
    b.token = cfg.prior_token;
  }
  return b;
}

TrainState init_state(const TrainConfig& cfg, const scene::SceneDataset& dataset) {
  cfg.validate();
  require(!dataset.train_ids().empty(), "trainer", "dataset has no train views");
  field::FieldConfig fc;
  fc.t_near = scene::scene_t_near();
  fc.t_far = scene::scene_t_far();
  field::Field f = field::Field::init(fc, Rng::mix({cfg.seed, kFieldInitTag}));
  adv::Discriminator d =
      adv::Discriminator::init(adv_opts(cfg), Rng::mix({cfg.seed, kDiscInitTag}));
  std::vector<Tensor> fp = f.params();
  std::vector<Tensor> dp = d.params();
  AdamConfig foc{.lr = cfg.field_lr_init, .clip_norm = cfg.clip_norm};
  AdamConfig doc{.lr = cfg.disc_lr, .clip_norm = cfg.clip_norm};
  return TrainState{0,
                    std::move(f),
                    std::move(d),
                    Adam(std::move(fp), foc),
                    Adam(std::move(dp), doc),
                    dataset,
                    {}};
}

ImageF render_view(const field::Field& f, const scene::CameraModel& cam,
                   const field::RenderOptions& opt, ImageF* depth_out) {
  NoGradGuard ng;
  int H = cam.height, W = cam.width, n = H * W;
  ImageF img(H, W, 3);
  ImageF dep(H, W, 1);
  const int chunk = 2048;
  for (int start = 0; start < n; start += chunk) {
    int m = std::min(chunk, n - start);
    std::vector<double> ov, dv;
    ov.reserve(m * 3);
    dv.reserve(m * 3);
    for (int i = 0; i < m; ++i) push_ray(cam, (start + i) / W, (start + i) % W, ov, dv);
    auto out = field::render_rays(f, Tensor::from({m, 3}, std::move(ov)),
                                  Tensor::from({m, 3}, std::move(dv)), opt);
    const auto& rgb = out.rgb.value();
    const auto& dpt = out.depth.value();
    for (int i = 0; i < m; ++i) {
      int y = (start + i) / W, x = (start + i) % W;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (float)rgb[(size_t)i * 3 + c];
      dep.at(y, x, 0) = (float)dpt[i];
    }
  }
  if (depth_out) *depth_out = dep;
  return img;
}

std::vector<double> estimate_depth_prior(const scene::PosedImage& im, uint64_t seed,
                                         int64_t k_updated, double sigma) {
  require(im.gt_depth.has_value(), "trainer",
          "image " + std::to_string(im.id) + " has no gt_depth for the depth oracle");
  const ImageF& d = *im.gt_depth;
  Rng rng(Rng::mix({seed, (uint64_t)im.id, (uint64_t)k_updated, kDepthMapTag}));
  // one affine distortion per (image, update): the scale/shift ambiguity of a
  // monocular estimator, which the shift-scale solve has to undo
  double alpha = std::exp(rng.uniform(-0.4, 0.4));
  double beta = rng.uniform(-0.3, 0.3);
  std::vector<double> out(d.px.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = alpha * (double)d.px[i] + beta + sigma * rng.normal();
  return out;
}

void idu_round(TrainState& st, const TrainConfig& cfg, const InpaintBackend& backend) {
  std::vector<int> ids = st.dataset.train_ids();
  int nb = (int)std::min<int64_t>((int64_t)ids.size(), cfg.idu_batch);
  Rng rng(Rng::mix({cfg.seed, (uint64_t)st.k, kIduPickTag}));
  for (int i = 0; i < nb; ++i)  // distinct ids: partial Fisher-Yates
    std::swap(ids[i], ids[i + rng.uniform_int((int)ids.size() - i)]);
  ids.resize(nb);

  int t = hifa_timestep(st.k, cfg.K, cfg.t_max, cfg.t_min);
  field::RenderOptions ropt = render_opts(cfg);
  for (int id : ids) {
    try {
      scene::PosedImage& im = st.dataset.by_id(id);
      ImageF rendered = render_view(st.field, im.camera, ropt);
      prior::InpaintRequest req;
      req.mask = im.mask;
      req.condition = backend.token;
      req.t_start = t;
      req.n_ddim_steps = cfg.n_ddim_steps;
      req.seed = Rng::mix({cfg.seed, (uint64_t)st.k, kIduSeedTag});
      req.view = (uint64_t)id;
      ImageF next;
      if (backend.oracle) {
        require(im.gt_removed.has_value(), "trainer", "oracle prior needs gt_removed");
        next = prior::oracle_inpaint(req, rendered, im.pixels, *im.gt_removed,
                                     backend.sigma_incon, backend.shift);
      } else {
        next = prior::partial_inpaint(req, rendered, im.pixels, *backend.prior);
      }
      // the dataset stores displayable [0,1] pixels; the decoder can overshoot
      for (int y = 0; y < next.h; ++y)
        for (int x = 0; x < next.w; ++x)
          if (im.mask.at(y, x))
            for (int c = 0; c < 3; ++c)
              next.at(y, x, c) = std::clamp(next.at(y, x, c), 0.f, 1.f);
      scene::update_image(st.dataset, id, next, im.mask);
      st.depth_prior_iter[id] = st.k;  // the estimator re-runs on the new image
    } catch (const Error& e) {
      throw Error(e.kind(), "dataset update at image " + std::to_string(id) + ": " + e.what());
    }
  }
}

ordered_json train_iteration(TrainState& st, const TrainConfig& cfg,
                             const InpaintBackend& backend) {
  require(st.k >= 0 && st.k < cfg.K, "trainer", "train_iteration needs 0 <= k < K");
  const int64_t k = st.k;
  const std::vector<int> ids = st.dataset.train_ids();
  const double lr = field_lr(cfg, k);
  const bool adv_on = cfg.lambda_adv > 0 || cfg.lambda_fm > 0;
  const bool depth_on = k >= cfg.depth_gate && cfg.lambda_depth > 0;
  const int P = cfg.patch_size;

  ordered_json rec;
  rec["k"] = k;
  rec["t_hifa"] = hifa_timestep(k, cfg.K, cfg.t_max, cfg.t_min);
  rec["lr_field"] = lr;
  int idu_n = 0;
  if (k % cfg.U == 0) {
    idu_round(st, cfg, backend);
    idu_n = (int)std::min<int64_t>((int64_t)ids.size(), cfg.idu_batch);
  }
  rec["idu"] = idu_n;

  const std::vector<Tensor>& fparams = st.field_opt.params();
  field::RenderOptions ropt = render_opts(cfg);
  ropt.jitter = cfg.jitter;

  // ---- step 1: reconstruction on unmasked rays -------------------------------
  {
    Rng rng(Rng::mix({cfg.seed, (uint64_t)k, kRayTag}));
    std::vector<double> ov, dv, tv;
    ov.reserve((size_t)cfg.ray_batch * 3);
    dv.reserve((size_t)cfg.ray_batch * 3);
    tv.reserve((size_t)cfg.ray_batch * 3);
    for (int i = 0; i < cfg.ray_batch; ++i) {
      for (int guard = 0;; ++guard) {
        require(guard < 10000, "trainer", "could not sample an unmasked train pixel");
        const auto& im = st.dataset.by_id(ids[rng.uniform_int((int)ids.size())]);
        int y = rng.uniform_int(im.pixels.h), x = rng.uniform_int(im.pixels.w);
        if (im.mask.at(y, x)) continue;
        push_ray(im.camera, y, x, ov, dv);
        for (int c = 0; c < 3; ++c) tv.push_back(im.pixels.at(y, x, c));
        break;
      }
    }
    ropt.jitter_seed = Rng::mix({cfg.seed, (uint64_t)k, kJitterReconTag});
    auto out = field::render_rays(st.field, Tensor::from({cfg.ray_batch, 3}, std::move(ov)),
                                  Tensor::from({cfg.ray_batch, 3}, std::move(dv)), ropt);
    Tensor l_pix =
        losses::pixel_loss(out.rgb, Tensor::from({cfg.ray_batch, 3}, std::move(tv)));
    Tensor l_inter = Tensor::scalar(0.0);
    for (const auto& ph : out.prop_h)
      l_inter = add(l_inter, losses::interlevel_loss(out.final_h, ph));
    Tensor l_dist = losses::distortion_loss(out.final_h);
    Tensor l_decay = field::hash_decay(st.field);
    rec["l_pix"] = term(l_pix, "pixel loss", k);
    rec["l_inter_r"] = term(l_inter, "interlevel loss (reconstruction)", k);
    rec["l_distort_r"] = term(l_dist, "distortion loss (reconstruction)", k);
    rec["l_decay"] = term(l_decay, "hash decay", k);
    Tensor total;
    total = weighted(total, l_pix, cfg.lambda_pix);
    total = weighted(total, l_inter, cfg.lambda_inter);
    total = weighted(total, l_dist, cfg.lambda_distort);
    total = weighted(total, l_decay, cfg.lambda_decay);
    if (!total.defined()) total = mul_scalar(l_pix, 0.0);
    rec["l_recon"] = term(total, "reconstruction objective", k);
    auto gs = grad(total, fparams);
    st.field_opt.step(gs, lr);
  }

  // ---- step 2: inpainting on importance-sampled patches ----------------------
  // patch picks, rendered fake patches, and per-patch data shared with step 3
  struct Pick {
    int id;
    adv::PatchLoc loc;
  };
  std::vector<Pick> picks;
  Tensor fake_d;        // detached [B,3,P,P] render, reused by the disc step
  Tensor real, mt, inv_mt;
  std::vector<Mask> pmasks;
  double s_real = 0.0, s_fake = 0.0, l_disc = 0.0, l_gp = 0.0;
  {
    Rng rng(Rng::mix({cfg.seed, (uint64_t)k, kPatchTag}));
    adv::AdvConfig ac = adv_opts(cfg);
    int guard = 0;
    while ((int)picks.size() < cfg.disc_batch) {
      require(++guard <= 64 * cfg.disc_batch, "adversarial",
              "no train image offers a candidate window above the inpainting threshold");
      int id = ids[rng.uniform_int((int)ids.size())];
      try {
        auto locs = adv::sample_patch_locations(st.dataset.by_id(id).mask, ac, 1, rng);
        for (const auto& l : locs)
          if ((int)picks.size() < cfg.disc_batch) picks.push_back({id, l});
      } catch (const Error&) {
        // image without a qualifying window; redraw
      }
    }
    const int B = (int)picks.size();
    const int R = B * P * P;
    std::vector<double> ov, dv, rv((size_t)R * 3);
    ov.reserve((size_t)R * 3);
    dv.reserve((size_t)R * 3);
    for (int b = 0; b < B; ++b) {
      const auto& im = st.dataset.by_id(picks[b].id);
      Mask pm(P, P);
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          int iy = picks[b].loc.y + y, ix = picks[b].loc.x + x;
          push_ray(im.camera, iy, ix, ov, dv);
          pm.set(y, x, im.mask.at(iy, ix));
          for (int c = 0; c < 3; ++c)
            rv[(((size_t)b * 3 + c) * P + y) * P + x] = im.pixels.at(iy, ix, c);
        }
      pmasks.push_back(pm);
    }
    ropt.jitter_seed = Rng::mix({cfg.seed, (uint64_t)k, kJitterPatchTag});
    auto out = field::render_rays(st.field, Tensor::from({R, 3}, std::move(ov)),
                                  Tensor::from({R, 3}, std::move(dv)), ropt);
    Tensor fake = rays_to_patches(out.rgb, B, P);
    real = Tensor::from({B, 3, P, P}, std::move(rv));
    mt = adv::mask_tensor(pmasks);
    inv_mt = add_scalar(neg(mt), 1.0);

    Tensor l_inter = Tensor::scalar(0.0);
    for (const auto& ph : out.prop_h)
      l_inter = add(l_inter, losses::interlevel_loss(out.final_h, ph));
    Tensor l_dist = losses::distortion_loss(out.final_h);
    Tensor l_decay = field::hash_decay(st.field);
    rec["l_inter_m"] = term(l_inter, "interlevel loss (inpainting)", k);
    rec["l_distort_m"] = term(l_dist, "distortion loss (inpainting)", k);
    Tensor total;
    total = weighted(total, l_inter, cfg.lambda_inter);
    total = weighted(total, l_dist, cfg.lambda_distort);
    total = weighted(total, l_decay, cfg.lambda_decay);

    rec["l_adv"] = 0.0;
    rec["l_fm"] = 0.0;
    if (adv_on) {
      // prose reading: both sides kept inside the mask. adv_real=unmasked_gt
      // reproduces the literal equations (real slot = reconstruction region of
      // the render); adv_masking=false drops the masking entirely.
      Tensor fake_slot, real_slot;
      if (cfg.adv_real == "unmasked_gt") {
        fake_slot = cfg.adv_masking ? adv::apply_mask(real, mt) : real;
        real_slot = cfg.adv_masking ? adv::apply_mask(fake, inv_mt) : fake;
      } else {
        fake_slot = cfg.adv_masking ? adv::apply_mask(fake, mt) : fake;
        real_slot = cfg.adv_masking ? adv::apply_mask(real, mt) : real;
      }
      if (cfg.lambda_adv > 0) {
        auto advl = adv::adversarial_losses(st.disc, fake_slot, real_slot);
        rec["l_adv"] = term(advl.total, "adversarial loss", k);
        total = weighted(total, advl.total, -cfg.lambda_adv);
      }
      if (cfg.lambda_fm > 0) {
        Tensor fm_fake = cfg.adv_masking ? adv::apply_mask(fake, mt) : fake;
        Tensor fm_real = cfg.adv_masking ? adv::apply_mask(real, mt) : real;
        Tensor l_fm = adv::feature_matching(st.disc, fm_fake, fm_real);
        rec["l_fm"] = term(l_fm, "feature matching loss", k);
        total = weighted(total, l_fm, cfg.lambda_fm);
      }
    }

    rec["l_pix_m"] = 0.0;
    if (cfg.add_pixel_loss_in_mask) {
      double m_sum = sum_all(mt).item();
      if (m_sum > 0) {
        Tensor se = mul(square(sub(fake, real)), mt);
        Tensor l_pm = mul_scalar(sum_all(se), 1.0 / (3.0 * m_sum));
        rec["l_pix_m"] = term(l_pm, "masked pixel loss", k);
        total = weighted(total, l_pm, cfg.lambda_pix);
      }
    }
    rec["l_perc"] = 0.0;
    if (cfg.add_perceptual_loss_in_mask && cfg.lambda_perc > 0) {
      require(P % 8 == 0, "config",
              "add_perceptual_loss_in_mask needs patch_size divisible by 8");
      const auto& ex = perc_extractor(cfg.perc_seed);
      Tensor l_perc = eval::pproxy_t(ex, adv::apply_mask(fake, mt), adv::apply_mask(real, mt));
      rec["l_perc"] = term(l_perc, "perceptual loss", k);
      total = weighted(total, l_perc, cfg.lambda_perc);
    }

    rec["l_depth"] = 0.0;
    rec["depth_patches"] = 0;
    if (depth_on) {
      Rng drng(Rng::mix({cfg.seed, (uint64_t)k, kDepthPairTag}));
      std::map<int, std::vector<double>> dmaps;  // per-image prior, this iteration
      Tensor acc = Tensor::scalar(0.0);
      int used = 0;
      for (int b = 0; b < B; ++b) {
        const auto& im = st.dataset.by_id(picks[b].id);
        const Mask& pm = pmasks[b];
        if (pm.count() == 0 || pm.count() == (size_t)P * P) continue;
        auto mit = dmaps.find(im.id);
        if (mit == dmaps.end()) {
          auto dit = st.depth_prior_iter.find(im.id);
          int64_t ku = dit == st.depth_prior_iter.end() ? -1 : dit->second;
          mit = dmaps.emplace(im.id, estimate_depth_prior(im, cfg.seed, ku, cfg.depth_sigma))
                    .first;
        }
        const std::vector<double>& dmap = mit->second;
        std::vector<double> est((size_t)P * P), rend((size_t)P * P);
        std::vector<uint8_t> fit((size_t)P * P);
        const auto& dval = out.depth.value();
        for (int y = 0; y < P; ++y)
          for (int x = 0; x < P; ++x) {
            int iy = picks[b].loc.y + y, ix = picks[b].loc.x + x;
            size_t p = (size_t)y * P + x;
            est[p] = dmap[(size_t)iy * im.pixels.w + ix];
            rend[p] = dval[(size_t)b * P * P + p];
            fit[p] = pm.at(y, x) ? 0 : 1;  // alignment on reconstruction pixels
          }
        losses::DepthAlignment al;
        try {
          al = losses::solve_shift_scale(est, rend, fit);
        } catch (const Error&) {
          continue;  // constant prior over this window; no usable alignment
        }
        auto pairs = losses::sample_depth_pairs(pm, cfg.depth_pairs, cfg.depth_window, drng);
        if (pairs.empty()) continue;
        std::vector<double> aligned((size_t)P * P);
        for (size_t p = 0; p < aligned.size(); ++p) aligned[p] = al.apply(est[p]);
        Tensor dpatch = slice(out.depth, {b * P * P}, {P * P});
        bool empty = false;
        Tensor ld = losses::depth_ranking_loss(dpatch, aligned, pairs, cfg.depth_margin, &empty);
        if (empty) continue;
        acc = add(acc, ld);
        ++used;
      }
      if (used > 0) {
        Tensor l_depth = mul_scalar(acc, 1.0 / used);
        rec["l_depth"] = term(l_depth, "depth ranking loss", k);
        rec["depth_patches"] = used;
        total = weighted(total, l_depth, cfg.lambda_depth);
      }
    }

    if (!total.defined()) total = mul_scalar(sum_all(fake), 0.0);
    rec["l_inpaint"] = term(total, "inpainting objective", k);
    auto gs = grad(total, fparams);
    st.field_opt.step(gs, lr);
    fake_d = fake.detach();
  }

  // ---- step 3: discriminator --------------------------------------------------
  rec["l_disc"] = 0.0;
  rec["l_gp"] = 0.0;
  if (adv_on) {
    Tensor fake_slot, real_slot, r1_pixels, r1_mask;
    Tensor ones = Tensor::full(mt.shape(), 1.0);
    if (cfg.adv_real == "unmasked_gt") {
      fake_slot = cfg.adv_masking ? adv::apply_mask(real, mt) : real;
      real_slot = cfg.adv_masking ? adv::apply_mask(fake_d, inv_mt) : fake_d;
      r1_pixels = fake_d;
      r1_mask = cfg.adv_masking ? inv_mt : ones;
    } else {
      fake_slot = cfg.adv_masking ? adv::apply_mask(fake_d, mt) : fake_d;
      real_slot = cfg.adv_masking ? adv::apply_mask(real, mt) : real;
      r1_pixels = real;
      r1_mask = cfg.adv_masking ? mt : ones;
    }
    auto advd = adv::adversarial_losses(st.disc, fake_slot, real_slot);
    Tensor gp = adv::r1_penalty(st.disc, r1_pixels, r1_mask);
    l_disc = term(advd.total, "discriminator adversarial loss", k);
    l_gp = term(gp, "R1 penalty", k);
    Tensor total = add(advd.total, mul_scalar(gp, cfg.lambda_gp));
    auto dgs = grad(total, st.disc_opt.params());
    st.disc_opt.step(dgs);

    double peak = 0.0;
    const Tensor scores[2] = {advd.score_real, advd.score_fake};
    double sums[2] = {0.0, 0.0};
    for (int s = 0; s < 2; ++s) {
      const auto& v = scores[s].value();
      for (double x : v) {
        sums[s] += x;
        peak = std::max(peak, std::abs(x));
      }
      sums[s] /= (double)v.size();
    }
    s_real = sums[0];
    s_fake = sums[1];
    require(peak <= 1e3, "trainer",
            "discriminator divergence (|score| = " + std::to_string(peak) + ") at iteration " +
                std::to_string(k));
  }
  rec["l_disc"] = l_disc;
  rec["l_gp"] = l_gp;
  rec["s_real"] = s_real;
  rec["s_fake"] = s_fake;

  st.k = k + 1;
  return rec;
}

void save_checkpoint(const TrainState& st, const TrainConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  write_blob(dir + "/field.mnrf", st.field.to_blob());
  write_blob(dir + "/disc.mnrf", st.disc.to_blob());
  Blob fo;
  fo.kind = kOptimBlobKind;
  fo.meta = {st.field_opt.steps()};
  fo.params = st.field_opt.state_blob();
  write_blob(dir + "/optim_field.mnrf", fo);
  Blob dso;
  dso.kind = kOptimBlobKind;
  dso.meta = {st.disc_opt.steps()};
  dso.params = st.disc_opt.state_blob();
  write_blob(dir + "/optim_disc.mnrf", dso);
  scene::save_dataset(st.dataset, dir + "/dataset");
  ordered_json ts;
  ts["k"] = st.k;
  ts["revision"] = st.dataset.revision;
  ordered_json dp = ordered_json::array();
  for (const auto& [id, it] : st.depth_prior_iter) dp.push_back({id, it});
  ts["depth_prior_iter"] = dp;
  write_file(dir + "/trainstate.json", ts.dump(2) + "\n");
  write_file(dir + "/config.txt", print_config(cfg));
}

TrainState load_checkpoint(const std::string& dir, const TrainConfig& cfg) {
  cfg.validate();
  field::Field f = field::Field::from_blob(read_blob(dir + "/field.mnrf", field::kFieldBlobKind));
  adv::Discriminator d =
      adv::Discriminator::from_blob(read_blob(dir + "/disc.mnrf", adv::kDiscBlobKind));
  scene::SceneDataset ds = scene::load_dataset(dir + "/dataset");
  ordered_json ts;
  try {
    ts = ordered_json::parse(read_file(dir + "/trainstate.json"));
  } catch (const std::exception& e) {
    raise("checkpoint", std::string("trainstate unreadable: ") + e.what());
  }
  int64_t k = 0;
  std::map<int, int64_t> dp;
  try {
    k = ts.at("k").get<int64_t>();
    require(ts.at("revision").get<int64_t>() == ds.revision, "checkpoint",
            "trainstate revision does not match the dataset snapshot");
    for (const auto& e : ts.at("depth_prior_iter")) dp[e.at(0).get<int>()] = e.at(1).get<int64_t>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    raise("checkpoint", std::string("trainstate malformed: ") + e.what());
  }
  std::vector<Tensor> fp = f.params();
  std::vector<Tensor> dparams = d.params();
  AdamConfig foc{.lr = cfg.field_lr_init, .clip_norm = cfg.clip_norm};
  AdamConfig doc{.lr = cfg.disc_lr, .clip_norm = cfg.clip_norm};
  TrainState st{k,
                std::move(f),
                std::move(d),
                Adam(std::move(fp), foc),
                Adam(std::move(dparams), doc),
                std::move(ds),
                std::move(dp)};
  Blob fo = read_blob(dir + "/optim_field.mnrf", kOptimBlobKind);
  require(fo.meta.size() == 1, "checkpoint", "optimizer blob meta has wrong arity");
  st.field_opt.load_state(fo.params, fo.meta[0]);
  Blob dso = read_blob(dir + "/optim_disc.mnrf", kOptimBlobKind);
  require(dso.meta.size() == 1, "checkpoint", "optimizer blob meta has wrong arity");
  st.disc_opt.load_state(dso.params, dso.meta[0]);
  return st;
}

namespace {

void write_snapshot(const TrainState& st, const TrainConfig& cfg, const std::string& out_dir) {
  int view = cfg.snapshot_view;
  if (view < 0) {
    auto test = st.dataset.test_ids();
    view = test.empty() ? st.dataset.train_ids().front() : test.front();
  }
  const auto& im = st.dataset.by_id(view);
  ImageF r = render_view(st.field, im.camera, render_opts(cfg));
  fs::create_directories(out_dir + "/snapshots");
  write_png_rgb8(out_dir + "/snapshots/iter_" + pad6(st.k) + ".png", r);
}

}  // namespace

void train_loop(TrainState& st, const TrainConfig& cfg, const InpaintBackend& backend,
                const std::string& out_dir) {
  cfg.validate();
  require(st.k <= cfg.K, "trainer", "state is past the configured K");
  fs::create_directories(out_dir);
  write_file(out_dir + "/config.txt", print_config(cfg));
  const std::string log_path = out_dir + "/metrics.jsonl";
  std::ofstream log(log_path, std::ios::app);
  require(log.good(), "io", "cannot open " + log_path);
  while (st.k < cfg.K) {
    ordered_json rec = train_iteration(st, cfg, backend);
    append_line(log, rec, log_path);
    if (cfg.snapshot_every > 0 && st.k % cfg.snapshot_every == 0) write_snapshot(st, cfg, out_dir);
    if (cfg.checkpoint_every > 0 && st.k % cfg.checkpoint_every == 0 && st.k < cfg.K)
      save_checkpoint(st, cfg, out_dir + "/checkpoints/" + pad6(st.k));
  }
  save_checkpoint(st, cfg, out_dir + "/checkpoints/final");
}

TrainState train(const TrainConfig& cfg, const scene::SceneDataset& dataset,
                 const InpaintBackend& backend, const std::string& out_dir) {
  TrainState st = init_state(cfg, dataset);
  train_loop(st, cfg, backend, out_dir);
  return st;
}

}  // namespace maldnerf::trainer
