#include "maldnerf/eval/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "maldnerf/util/bridge.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::eval {

using ad::NoGradGuard;
using ad::Tensor;
using nlohmann::ordered_json;

namespace {

constexpr double kCovEps = 1e-6;

double act(double x) {  // same shape as the extractor's activation
  double sp = x > 30 ? x : std::log1p(std::exp(std::min(x, 30.0)));
  return 0.2 * x + 0.8 * sp;
}

Eigen::VectorXd mean_of(const FeatureRows& rows) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero((Eigen::Index)rows[0].size());
  for (const auto& r : rows)
    mu += Eigen::Map<const Eigen::VectorXd>(r.data(), (Eigen::Index)r.size());
  return mu / (double)rows.size();
}

Eigen::MatrixXd cov_of(const FeatureRows& rows, const Eigen::VectorXd& mu) {
  const Eigen::Index d = mu.size();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (const auto& r : rows) {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(r.data(), d) - mu;
    c.noalias() += v * v.transpose();
  }
  return c / (double)(rows.size() - 1);
}

// symmetric PSD square root; negative eigenvalues from roundoff are clamped
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd l = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

void check_rows(const FeatureRows& a, const FeatureRows& b, const char* who) {
  require(a.size() >= 2 && b.size() >= 2, "metric",
          std::string(who) + " needs at least 2 samples per side");
  for (const auto& rows : {&a, &b})
    for (const auto& r : *rows)
      require(r.size() == a[0].size(), "metric",
              std::string(who) + ": inconsistent feature dimensions");
}

double poly_kernel(const std::vector<double>& x, const std::vector<double>& y) {
  double dot = 0;
  for (size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
  double v = dot / (double)x.size() + 1.0;
  return v * v * v;
}

}  // namespace

// ---------------------------------------------------------------------------

double pproxy(const FeatureExtractor& ex, const ImageF& a, const ImageF& b) {
  require(a.same_dims(b), "metric", "pproxy inputs must have equal dims");
  require(a.c == 3, "metric", "pproxy expects 3-channel images");
  NoGradGuard ng;
  return pproxy_t(ex, image_tensor(a), image_tensor(b)).item();
}

double m_pproxy(const FeatureExtractor& ex, const ImageF& a, const ImageF& b, const Mask& mask) {
  require(a.same_dims(b), "metric", "m_pproxy inputs must have equal dims");
  require(mask.h == a.h && mask.w == a.w, "metric", "m_pproxy mask dims mismatch");
  ImageF ma = a, mb = b;
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x)
      if (!mask.at(y, x))
        for (int c = 0; c < a.c; ++c) {
          ma.at(y, x, c) = 0.f;
          mb.at(y, x, c) = 0.f;
        }
  return pproxy(ex, ma, mb);
}

// ---------------------------------------------------------------------------

double frechet_distance(const FeatureRows& a, const FeatureRows& b, bool* regularized) {
  check_rows(a, b, "frechet_distance");
  Eigen::VectorXd mu_a = mean_of(a), mu_b = mean_of(b);
  Eigen::MatrixXd ca = cov_of(a, mu_a), cb = cov_of(b, mu_b);

  // the cross-trace tr((√Σa·Σb·√Σa)^½) is symmetric in exact arithmetic but
  // not bit-exact under operand swap; a canonical order keeps fid(a,b) and
  // fid(b,a) the same float program
  auto lex_less = [](const Eigen::VectorXd& m1, const Eigen::MatrixXd& c1,
                     const Eigen::VectorXd& m2, const Eigen::MatrixXd& c2) {
    for (Eigen::Index i = 0; i < m1.size(); ++i)
      if (m1[i] != m2[i]) return m1[i] < m2[i];
    for (Eigen::Index i = 0; i < c1.size(); ++i)
      if (c1.data()[i] != c2.data()[i]) return c1.data()[i] < c2.data()[i];
    return false;
  };
  if (lex_less(mu_b, cb, mu_a, ca)) {
    mu_a.swap(mu_b);
    ca.swap(cb);
  }

  // rank-deficient fits are the norm at desk-scale sample counts; the fixed
  // ridge keeps the square root well defined and is small against unit-scale
  // features. Report whether it was actually load-bearing.
  if (regularized) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(ca), eb(cb);
    double lo = std::min(ea.eigenvalues().minCoeff(), eb.eigenvalues().minCoeff());
    *regularized = lo < 1e-8;
  }
  ca.diagonal().array() += kCovEps;
  cb.diagonal().array() += kCovEps;

  Eigen::MatrixXd sa = sqrt_psd(ca);
  Eigen::MatrixXd inner = sa * cb * sa;
  inner = 0.5 * (inner + inner.transpose().eval());
  double tr_cross = sqrt_psd(inner).trace();
  double v = (mu_a - mu_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_cross;
  return std::max(v, 0.0);
}

double kid_mmd2(const FeatureRows& a, const FeatureRows& b, int block_size) {
  check_rows(a, b, "kid_mmd2");
  int n = (int)std::min(a.size(), b.size());
  int bs = block_size > 0 ? block_size : std::min(n, 16);
  require(bs >= 2, "metric", "kid block size must be at least 2");
  int blocks = n / bs;
  require(blocks >= 1, "metric", "kid needs at least one full block per side");

  double total = 0;
  for (int blk = 0; blk < blocks; ++blk) {
    const int o = blk * bs;
    double xx = 0, yy = 0, xy = 0;
    for (int i = 0; i < bs; ++i)
      for (int j = 0; j < bs; ++j) {
        if (i == j) continue;  // unbiased: diagonals excluded on every term
        xx += poly_kernel(a[o + i], a[o + j]);
        yy += poly_kernel(b[o + i], b[o + j]);
        xy += poly_kernel(a[o + i], b[o + j]) + poly_kernel(a[o + j], b[o + i]);
      }
    total += (xx + yy - xy) / ((double)bs * (bs - 1));
  }
  return total / blocks;
}

FeatureRows embed_images(const FeatureExtractor& ex, const std::vector<ImageF>& images) {
  NoGradGuard ng;
  FeatureRows rows;
  rows.reserve(images.size());
  for (const auto& im : images) {
    require(im.c == 3, "metric", "embed_images expects 3-channel images");
    Tensor e = ex.embed(image_tensor(im));
    rows.push_back(e.value());
  }
  return rows;
}

double fid_proxy(const FeatureExtractor& ex, const std::vector<ImageF>& a,
                 const std::vector<ImageF>& b, bool* regularized) {
  return frechet_distance(embed_images(ex, a), embed_images(ex, b), regularized);
}

double kid_proxy(const FeatureExtractor& ex, const std::vector<ImageF>& a,
                 const std::vector<ImageF>& b, int block_size) {
  return kid_mmd2(embed_images(ex, a), embed_images(ex, b), block_size);
}

// ---------------------------------------------------------------------------

namespace {

CropWindow centered_window(int y, int x, int size, int h, int w) {
  CropWindow win;
  win.size = size;
  win.y = std::clamp(y - size / 2, 0, h - size);
  win.x = std::clamp(x - size / 2, 0, w - size);
  return win;
}

}  // namespace

CornerCrops corner_crops(const Mask& mask, int crop_size, int img_h, int img_w, CornerMode mode) {
  require(mask.count() > 0, "metric", "corner_crops needs a nonempty mask");
  require(mask.h == img_h && mask.w == img_w, "metric", "corner_crops mask/image dims mismatch");
  require(crop_size >= 1 && crop_size <= std::min(img_h, img_w), "metric",
          "crop_size must fit inside the image");

  CornerCrops out;
  if (mode == CornerMode::bbox) {
    int y0 = mask.h, y1 = -1, x0 = mask.w, x1 = -1;
    for (int y = 0; y < mask.h; ++y)
      for (int x = 0; x < mask.w; ++x)
        if (mask.at(y, x)) {
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
    const int cy[4] = {y0, y0, y1, y1}, cx[4] = {x0, x1, x0, x1};
    for (int q = 0; q < 4; ++q) out.win[q] = centered_window(cy[q], cx[q], crop_size, img_h, img_w);
    return out;
  }

  // centroid of the mask support
  double cy = 0, cx = 0, n = 0;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) {
        cy += y;
        cx += x;
        ++n;
      }
  cy /= n;
  cx /= n;

  // furthest mask pixel per quadrant (TL, TR, BL, BR) and globally;
  // ties by (row, col) lexicographic order
  struct Best {
    double d2 = -1;
    int y = 0, x = 0;
  };
  Best best[4], global;
  auto consider = [](Best& s, double d2, int y, int x) {
    if (d2 > s.d2 || (d2 == s.d2 && (y < s.y || (y == s.y && x < s.x)))) s = {d2, y, x};
  };
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      double dy = y - cy, dx = x - cx;
      double d2 = dy * dy + dx * dx;
      int q = (dy >= 0 ? 2 : 0) + (dx >= 0 ? 1 : 0);
      consider(best[q], d2, y, x);
      consider(global, d2, y, x);
    }
  for (int q = 0; q < 4; ++q) {
    if (best[q].d2 < 0) {
      best[q] = global;
      out.degenerate = true;
    }
    out.win[q] = centered_window(best[q].y, best[q].x, crop_size, img_h, img_w);
  }
  return out;
}

ImageF crop_image(const ImageF& img, const CropWindow& w) {
  require(w.y >= 0 && w.x >= 0 && w.y + w.size <= img.h && w.x + w.size <= img.w, "metric",
          "crop window out of bounds");
  ImageF out(w.size, w.size, img.c);
  for (int y = 0; y < w.size; ++y)
    for (int x = 0; x < w.size; ++x)
      for (int c = 0; c < img.c; ++c) out.at(y, x, c) = img.at(w.y + y, w.x + x, c);
  return out;
}

// ---------------------------------------------------------------------------

VideoExtractor VideoExtractor::init(uint64_t seed) {
  VideoExtractor vx;
  vx.seed = seed;
  vx.frame = FeatureExtractor::init(Rng::mix({seed, 0xfa3e}));
  Rng rng(Rng::mix({seed, 0x7e3b}));
  const int e = vx.frame.embed_dim();  // per-frame embedding width
  const int c1 = 64, k1 = 3;
  const int c2 = 64, k2 = 4;  // spans the 4 post-stride steps of a 10-frame clip
  auto he = [&](std::vector<double>& w, int fan_in) {
    double s = std::sqrt(2.0 / fan_in);
    for (auto& v : w) v = (float)(s * rng.normal());
  };
  vx.w1.assign(c1, std::vector<double>((size_t)e * k1));
  vx.b1.resize(c1);
  for (auto& r : vx.w1) he(r, e * k1);
  for (auto& v : vx.b1) v = (float)(0.1 * rng.normal());
  vx.w2.assign(c2, std::vector<double>((size_t)c1 * k2));
  vx.b2.resize(c2);
  for (auto& r : vx.w2) he(r, c1 * k2);
  for (auto& v : vx.b2) v = (float)(0.1 * rng.normal());
  return vx;
}

int VideoExtractor::dim() const { return (int)w2.size(); }

std::vector<double> VideoExtractor::embed(const std::vector<const ImageF*>& clip) const {
  require(clip.size() == 10, "metric", "video clips are exactly ten frames");
  NoGradGuard ng;
  const int e = frame.embed_dim();
  std::vector<std::vector<double>> h;  // [T][e]
  for (const ImageF* im : clip) {
    require(im->c == 3, "metric", "video frames must be 3-channel");
    h.push_back(frame.embed(image_tensor(*im)).value());
  }
  // temporal conv k=3 stride 2 → 4 steps, activation + per-step normalization
  const int c1 = (int)w1.size();
  std::vector<std::vector<double>> h1(4, std::vector<double>(c1));
  for (int t = 0; t < 4; ++t) {
    double nrm = 1e-10;
    for (int o = 0; o < c1; ++o) {
      double acc = b1[o];
      for (int k = 0; k < 3; ++k)
        for (int i = 0; i < e; ++i) acc += w1[o][(size_t)k * e + i] * h[2 * t + k][i];
      h1[t][o] = act(acc);
      nrm += h1[t][o] * h1[t][o];
    }
    nrm = std::sqrt(nrm);
    for (int o = 0; o < c1; ++o) h1[t][o] /= nrm;
  }
  // temporal conv k=4 over the remaining steps → one clip vector
  const int c2 = (int)w2.size();
  std::vector<double> out(c2);
  for (int o = 0; o < c2; ++o) {
    double acc = b2[o];
    for (int k = 0; k < 4; ++k)
      for (int i = 0; i < c1; ++i) acc += w2[o][(size_t)k * c1 + i] * h1[k][i];
    out[o] = act(acc);
  }
  return out;
}

int64_t fvd_clip_count(int64_t frames, int stride, int clip_len) {
  require(stride >= 1 && clip_len >= 1, "metric", "fvd stride and clip length must be positive");
  if (frames < clip_len) return 0;
  return (frames - clip_len) / stride + 1;
}

namespace {

void collect_clips(const VideoExtractor& vx, const std::vector<std::vector<ImageF>>& scenes,
                   const FvdOptions& opt, FeatureRows& rows, int& skipped) {
  for (const auto& scene : scenes) {
    int64_t n = fvd_clip_count((int64_t)scene.size(), opt.stride, opt.clip_len);
    if (n == 0) {
      ++skipped;
      continue;
    }
    for (int64_t s = 0; s < n; ++s) {
      std::vector<const ImageF*> clip;
      for (int t = 0; t < opt.clip_len; ++t) clip.push_back(&scene[(size_t)(s * opt.stride + t)]);
      rows.push_back(vx.embed(clip));
    }
  }
}

}  // namespace

double fvd_proxy(const VideoExtractor& vx, const std::vector<std::vector<ImageF>>& real,
                 const std::vector<std::vector<ImageF>>& fake, const FvdOptions& opt,
                 int* skipped_scenes, bool* regularized) {
  require(opt.clip_len == 10, "metric", "the video protocol uses ten-frame clips");
  FeatureRows ra, rb;
  int skipped = 0;
  collect_clips(vx, real, opt, ra, skipped);
  collect_clips(vx, fake, opt, rb, skipped);
  if (skipped_scenes) *skipped_scenes = skipped;
  require(ra.size() >= 2 && rb.size() >= 2, "metric",
          "fvd needs at least two clips per side after skipping short scenes");
  return frechet_distance(ra, rb, regularized);
}

// ---------------------------------------------------------------------------

FlowField exact_flow(const scene::PosedImage& a, const scene::PosedImage& b, double occ_tol) {
  require(a.gt_depth && b.gt_depth, "metric", "exact_flow needs gt_depth on both views");
  const int H = a.pixels.h, W = a.pixels.w;
  FlowField f;
  f.uv = ImageF(H, W, 2);
  f.covis = Mask(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      scene::Vec3 o, d;
      a.camera.ray(x + 0.5, y + 0.5, o, d);
      scene::Vec3 p = o + a.gt_depth->at(y, x, 0) * d;
      double px, py, depth;
      if (!b.camera.project(p, px, py, depth)) continue;
      double sy = py - 0.5, sx = px - 0.5;  // continuous → sample coordinates
      f.uv.at(y, x, 0) = (float)(sy - y);
      f.uv.at(y, x, 1) = (float)(sx - x);
      if (sy < 0 || sy > b.pixels.h - 1 || sx < 0 || sx > b.pixels.w - 1) continue;
      double seen = sample_bilinear(*b.gt_depth, sy, sx, 0);
      if (std::abs(seen - depth) <= occ_tol * depth) f.covis.set(y, x, true);
    }
  return f;
}

double flow_consistency(const std::vector<ImageF>& frames, const std::vector<FlowField>& flows) {
  require(frames.size() >= 1, "metric", "flow_consistency needs at least one frame");
  require(flows.size() + 1 == frames.size(), "metric",
          "flow_consistency needs one flow per consecutive pair");
  double total = 0;
  int pairs = 0;
  for (size_t t = 0; t + 1 < frames.size(); ++t) {
    const ImageF& cur = frames[t];
    const ImageF& nxt = frames[t + 1];
    const FlowField& fl = flows[t];
    require(fl.uv.h == cur.h && fl.uv.w == cur.w && fl.uv.c == 2, "metric",
            "flow field dims mismatch");
    double mae = 0;
    size_t n = 0;
    for (int y = 0; y < cur.h; ++y)
      for (int x = 0; x < cur.w; ++x) {
        if (!fl.covis.at(y, x)) continue;
        double sy = y + fl.uv.at(y, x, 0), sx = x + fl.uv.at(y, x, 1);
        for (int c = 0; c < cur.c; ++c)
          mae += std::abs((double)cur.at(y, x, c) - (double)sample_bilinear(nxt, sy, sx, c));
        ++n;
      }
    if (n == 0) continue;
    total += mae / ((double)n * cur.c);
    ++pairs;
  }
  return pairs == 0 ? 0.0 : total / pairs;
}

// ---------------------------------------------------------------------------

ordered_json MetricReport::to_json() const {
  ordered_json j;
  j["psnr_masked"] = psnr_masked;
  j["pproxy"] = pproxy;
  j["m_pproxy"] = m_pproxy;
  j["fid_proxy"] = fid_proxy;
  j["kid_proxy"] = kid_proxy;
  j["cfid_proxy"] = cfid_proxy;
  j["ckid_proxy"] = ckid_proxy;
  j["fvd_proxy"] = fvd_proxy;
  j["flow_consistency"] = flow_consistency;
  j["checkpoint_id"] = checkpoint_id;
  j["dataset_revision"] = dataset_revision;
  j["extractor_seed"] = extractor_seed;
  j["fid_regularized"] = fid_regularized;
  j["fvd_skipped"] = fvd_skipped;
  j["flow_advisory"] = flow_advisory;
  j["warnings"] = warnings;
  return j;
}

MetricReport MetricReport::from_json(const ordered_json& j) {
  MetricReport r;
  try {
    r.psnr_masked = j.at("psnr_masked").get<double>();
    r.pproxy = j.at("pproxy").get<double>();
    r.m_pproxy = j.at("m_pproxy").get<double>();
    r.fid_proxy = j.at("fid_proxy").get<double>();
    r.kid_proxy = j.at("kid_proxy").get<double>();
    r.cfid_proxy = j.at("cfid_proxy").get<double>();
    r.ckid_proxy = j.at("ckid_proxy").get<double>();
    r.fvd_proxy = j.at("fvd_proxy").get<double>();
    r.flow_consistency = j.at("flow_consistency").get<double>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.dataset_revision = j.at("dataset_revision").get<int64_t>();
    r.extractor_seed = j.at("extractor_seed").get<uint64_t>();
    r.fid_regularized = j.at("fid_regularized").get<bool>();
    r.fvd_skipped = j.at("fvd_skipped").get<bool>();
    r.flow_advisory = j.at("flow_advisory").get<bool>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    raise("metric", std::string("malformed metric report: ") + e.what());
  }
  return r;
}

bool MetricReport::all_finite() const {
  for (double v : {psnr_masked, pproxy, m_pproxy, fid_proxy, kid_proxy, cfid_proxy, ckid_proxy,
                   fvd_proxy, flow_consistency})
    if (!std::isfinite(v)) return false;
  return true;
}

MetricReport evaluate(const std::vector<ImageF>& renders, const scene::SceneDataset& dataset,
                      uint64_t extractor_seed, const std::string& checkpoint_id,
                      const EvaluateOptions& opt) {
  const std::vector<int> ids = dataset.test_ids();
  require(!ids.empty(), "eval", "dataset has no test views");
  require(renders.size() == ids.size(), "eval",
          "evaluate needs one render per test view, in test-id order");
  require(opt.crop_size % 8 == 0 && opt.crop_size >= 8, "eval",
          "crop_size must be a positive multiple of 8 (extractor stride)");

  FeatureExtractor ex = FeatureExtractor::init(extractor_seed);
  MetricReport rep;
  rep.checkpoint_id = checkpoint_id;
  rep.dataset_revision = dataset.revision;
  rep.extractor_seed = extractor_seed;

  std::vector<ImageF> gt;
  std::vector<ImageF> crops_r, crops_g;
  double psnr = 0, pp = 0, mpp = 0;
  int psnr_n = 0;
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& im = dataset.by_id(ids[i]);
    require(im.gt_removed.has_value(), "eval",
            "test view " + std::to_string(im.id) + " is missing gt_removed");
    const ImageF& g = *im.gt_removed;
    const ImageF& r = renders[i];
    require(r.same_dims(g), "eval", "render dims do not match the view");
    gt.push_back(g);
    pp += pproxy(ex, r, g);
    if (im.mask.count() > 0) {
      psnr += psnr_masked(r, g, im.mask);
      mpp += m_pproxy(ex, r, g, im.mask);
      ++psnr_n;
      CornerCrops cc = corner_crops(im.mask, opt.crop_size, g.h, g.w, opt.corner_mode);
      if (cc.degenerate)
        rep.warnings.push_back("degenerate corner crops on view " + std::to_string(im.id));
      for (const auto& w : cc.win) {
        crops_r.push_back(crop_image(r, w));
        crops_g.push_back(crop_image(g, w));
      }
    } else {
      rep.warnings.push_back("view " + std::to_string(im.id) +
                             " has an empty mask; skipped by masked metrics");
    }
  }
  rep.pproxy = pp / (double)ids.size();
  if (psnr_n > 0) {
    rep.psnr_masked = psnr / psnr_n;
    rep.m_pproxy = mpp / psnr_n;
  }

  bool reg_fid = false, reg_cfid = false, reg_fvd = false;
  rep.fid_proxy = fid_proxy(ex, renders, gt, &reg_fid);
  rep.kid_proxy = kid_proxy(ex, renders, gt);
  require(!crops_r.empty(), "eval", "no test view had a nonempty mask");
  rep.cfid_proxy = frechet_distance(embed_images(ex, crops_r), embed_images(ex, crops_g),
                                    &reg_cfid);
  rep.ckid_proxy = kid_mmd2(embed_images(ex, crops_r), embed_images(ex, crops_g));
  if (reg_cfid) rep.warnings.push_back("cfid covariance regularized");

  if (fvd_clip_count((int64_t)ids.size(), opt.fvd.stride, opt.fvd.clip_len) >= 2) {
    rep.fvd_proxy = fvd_proxy(VideoExtractor::init(extractor_seed), {gt}, {renders}, opt.fvd,
                              nullptr, &reg_fvd);
    if (reg_fvd) rep.warnings.push_back("fvd covariance regularized");
  } else {
    rep.fvd_skipped = true;
    rep.warnings.push_back("test split shorter than two ten-frame clips; fvd skipped");
  }
  rep.fid_regularized = reg_fid;

  // flow over the test-view sequence; exact flow from gt geometry. Advisory:
  // the metric rewards blur across the mask seam.
  std::vector<FlowField> flows;
  for (size_t i = 0; i + 1 < ids.size(); ++i)
    flows.push_back(exact_flow(dataset.by_id(ids[i]), dataset.by_id(ids[i + 1]), opt.occ_tol));
  rep.flow_consistency = flow_consistency(renders, flows);
  rep.flow_advisory = true;
  return rep;
}

}  // namespace maldnerf::eval
