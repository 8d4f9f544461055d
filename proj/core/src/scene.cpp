#include "maldnerf/scene/scene.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>

#include "json.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/io.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::scene {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
Vec3 normalize(Vec3 a) {
  double n = norm(a);
  require(n > 0, "geometry", "cannot normalize a zero vector");
  return (1.0 / n) * a;
}

double scene_t_near() { return 0.05; }
double scene_t_far() { return 12.0; }

// ---- camera -------------------------------------------------------------------

void CameraModel::validate() const {
  require(fx > 0 && fy > 0, "camera", "focal length must be positive");
  require(width >= 16 && height >= 16, "camera", "resolution must be at least 16x16");
  // rotation block orthonormality within 1e-6
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += c2w[k * 4 + i] * c2w[k * 4 + j];
      double want = i == j ? 1.0 : 0.0;
      require(std::abs(s - want) < 1e-6, "camera", "camera rotation is not orthonormal");
    }
}

Vec3 CameraModel::center() const { return {c2w[3], c2w[7], c2w[11]}; }

void CameraModel::ray(double px, double py, Vec3& origin, Vec3& dir) const {
  double u = (px - cx) / fx;
  double v = (py - cy) / fy;
  Vec3 d_cam{u, v, 1.0};
  Vec3 d{c2w[0] * d_cam.x + c2w[1] * d_cam.y + c2w[2] * d_cam.z,
         c2w[4] * d_cam.x + c2w[5] * d_cam.y + c2w[6] * d_cam.z,
         c2w[8] * d_cam.x + c2w[9] * d_cam.y + c2w[10] * d_cam.z};
  origin = center();
  dir = normalize(d);
}

bool CameraModel::project(Vec3 p, double& px, double& py, double& depth) const {
  Vec3 rel = p - center();
  // camera axes are the rotation columns
  double qx = c2w[0] * rel.x + c2w[4] * rel.y + c2w[8] * rel.z;
  double qy = c2w[1] * rel.x + c2w[5] * rel.y + c2w[9] * rel.z;
  double qz = c2w[2] * rel.x + c2w[6] * rel.y + c2w[10] * rel.z;
  if (qz <= 1e-9) return false;
  px = fx * qx / qz + cx;
  py = fy * qy / qz + cy;
  // distance along the (unit) pixel ray, matching gt_depth convention
  depth = std::sqrt(qx * qx + qy * qy + qz * qz);
  return true;
}

namespace {

CameraModel look_at(Vec3 eye, Vec3 target, double focal, int w, int h) {
  Vec3 f = normalize(target - eye);
  Vec3 x = normalize(cross(Vec3{0, 1, 0}, f));
  Vec3 y = cross(x, f);  // image-down
  CameraModel cam;
  cam.fx = cam.fy = focal;
  cam.cx = w * 0.5;
  cam.cy = h * 0.5;
  cam.width = w;
  cam.height = h;
  cam.c2w = {x.x, y.x, f.x, eye.x,  //
             x.y, y.y, f.y, eye.y,  //
             x.z, y.z, f.z, eye.z,  //
             0,   0,   0,   1};
  return cam;
}

// ---- procedural world -----------------------------------------------------------

constexpr double kEnvRadius = 8.0;
constexpr double kPlaneExtent = 7.5;

struct Obj {
  Vec3 c;
  double r;
  Vec3 base;
  Vec3 stripe_axis;
  double stripe_freq;
};

struct World {
  std::vector<Obj> objs;
};

World build_world(const SceneSpec& spec) {
  static const Vec3 palette[6] = {{0.85, 0.25, 0.20}, {0.20, 0.45, 0.85}, {0.90, 0.70, 0.15},
                                  {0.30, 0.75, 0.40}, {0.70, 0.30, 0.75}, {0.90, 0.50, 0.25}};
  World w;
  Rng rng(Rng::mix({spec.seed, 0x0b1ec7}));
  for (int k = 0; k < spec.objects; ++k) {
    Obj o;
    double ang = rng.uniform(0, 2 * M_PI);
    double dist = rng.uniform(0.08, 0.5);
    o.r = rng.uniform(0.17, 0.28);
    o.c = {dist * std::cos(ang), o.r, dist * std::sin(ang)};
    Vec3 base = palette[k % 6];
    double j = rng.uniform(-0.06, 0.06);
    o.base = {std::clamp(base.x + j, 0.0, 1.0), std::clamp(base.y + j, 0.0, 1.0),
              std::clamp(base.z + j, 0.0, 1.0)};
    o.stripe_axis = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()});
    o.stripe_freq = rng.uniform(14.0, 22.0);
    w.objs.push_back(o);
  }
  return w;
}

Vec3 ground_albedo(double x, double z) {
  double wv = 0.5 + 0.35 * std::sin(2.3 * x) * std::sin(2.9 * z + 0.7) +
              0.15 * std::sin(7.1 * (x + 0.6 * z));
  wv = std::clamp(wv, 0.0, 1.0);
  double d = 0.06 * std::sin(13.0 * x + 5.0 * z) * std::cos(9.0 * z - 3.0 * x);
  Vec3 c1{0.62, 0.55, 0.48}, c2{0.33, 0.40, 0.50};
  Vec3 a = (1 - wv) * c1 + wv * c2;
  double fade = 0.55 + 0.45 * std::exp(-0.05 * (x * x + z * z));
  return {std::clamp(fade * (a.x + d), 0.0, 1.0), std::clamp(fade * (a.y + d), 0.0, 1.0),
          std::clamp(fade * (a.z + d), 0.0, 1.0)};
}

Vec3 env_color(Vec3 d) {
  double m = 0.5 + 0.5 * d.y;
  Vec3 zen{0.45, 0.60, 0.85}, hor{0.80, 0.74, 0.62};
  Vec3 c = (1 - m) * hor + m * zen;
  double az = std::atan2(d.z, d.x);
  double band = 0.05 * std::sin(4.0 * az + 2.5 * d.y) + 0.03 * std::sin(9.0 * az - 3.0 * d.y);
  return {std::clamp(c.x + band, 0.0, 1.0), std::clamp(c.y + band, 0.0, 1.0),
          std::clamp(c.z + 0.5 * band, 0.0, 1.0)};
}

struct Hit {
  double t = -1;
  Vec3 p, n, albedo;
  int obj = -1;
  bool emissive = false;
};

bool sphere_t(Vec3 o, Vec3 d, Vec3 c, double r, double& t) {
  Vec3 oc = o - c;
  double b = dot(oc, d);
  double q = dot(oc, oc) - r * r;
  double disc = b * b - q;
  if (disc < 0) return false;
  double s = std::sqrt(disc);
  double t0 = -b - s, t1 = -b + s;
  t = t0 > 1e-4 ? t0 : t1;
  return t > 1e-4;
}

Hit trace(const World& w, Vec3 o, Vec3 d, bool with_objects) {
  Hit best;
  best.t = 1e30;
  // ground plane y = 0 (finite disk so the environment sphere closes the scene)
  if (std::abs(d.y) > 1e-12) {
    double t = -o.y / d.y;
    if (t > 1e-4 && t < best.t) {
      Vec3 p = o + t * d;
      if (p.x * p.x + p.z * p.z <= kPlaneExtent * kPlaneExtent) {
        best.t = t;
        best.p = p;
        best.n = {0, 1, 0};
        best.albedo = ground_albedo(p.x, p.z);
        best.obj = -1;
        best.emissive = false;
      }
    }
  }
  if (with_objects) {
    for (size_t k = 0; k < w.objs.size(); ++k) {
      double t;
      if (sphere_t(o, d, w.objs[k].c, w.objs[k].r, t) && t < best.t) {
        const Obj& ob = w.objs[k];
        Vec3 p = o + t * d;
        best.t = t;
        best.p = p;
        best.n = normalize(p - ob.c);
        double stripe = 0.85 + 0.15 * std::sin(ob.stripe_freq * dot(p - ob.c, ob.stripe_axis));
        best.albedo = stripe * ob.base;
        best.obj = (int)k;
        best.emissive = false;
      }
    }
  }
  // enclosing environment sphere (viewed from inside, emissive)
  {
    double t;
    if (sphere_t(o, d, Vec3{0, 0, 0}, kEnvRadius, t) && t < best.t) {
      Vec3 p = o + t * d;
      best.t = t;
      best.p = p;
      best.n = normalize(Vec3{0, 0, 0} - p);
      best.albedo = env_color(normalize(p));
      best.obj = -1;
      best.emissive = true;
    }
  }
  return best;
}

Vec3 shade(const Hit& h) {
  if (h.emissive) return h.albedo;
  static const Vec3 l1 = normalize(Vec3{0.55, 0.75, 0.35});
  static const Vec3 l2 = normalize(Vec3{-0.60, 0.45, -0.65});
  double li = 0.28 + 0.95 * std::max(0.0, dot(h.n, l1)) + 0.30 * std::max(0.0, dot(h.n, l2));
  return {std::clamp(li * h.albedo.x, 0.0, 1.0), std::clamp(li * h.albedo.y, 0.0, 1.0),
          std::clamp(li * h.albedo.z, 0.0, 1.0)};
}

void validate_image(const PosedImage& im, bool strict_gt) {
  size_t cnt = im.mask.count();
  require(cnt > 0, "empty mask",
          "view " + std::to_string(im.id) + " has an empty inpainting mask");
  require(cnt < im.mask.m.size(), "full mask",
          "view " + std::to_string(im.id) + " mask covers the whole image");
  for (float v : im.pixels.px)
    require(std::isfinite(v) && v >= 0.f && v <= 1.f, "pixel range",
            "view " + std::to_string(im.id) + " has pixels outside [0,1]");
  if (strict_gt && im.gt_removed) {
    const ImageF& gr = *im.gt_removed;
    require(gr.same_dims(im.pixels), "gt mismatch", "gt_removed resolution mismatch");
    for (int y = 0; y < im.pixels.h; ++y)
      for (int x = 0; x < im.pixels.w; ++x) {
        if (im.mask.at(y, x)) continue;
        for (int ch = 0; ch < 3; ++ch)
          require(gr.at(y, x, ch) == im.pixels.at(y, x, ch), "gt mismatch",
                  "view " + std::to_string(im.id) +
                      " differs from gt_removed outside the mask");
      }
  }
}

}  // namespace

// ---- dataset ----------------------------------------------------------------

const PosedImage& SceneDataset::by_id(int id) const {
  for (const auto& im : images)
    if (im.id == id) return im;
  raise("unknown image id", "no image with id " + std::to_string(id));
}

PosedImage& SceneDataset::by_id(int id) {
  for (auto& im : images)
    if (im.id == id) return im;
  raise("unknown image id", "no image with id " + std::to_string(id));
}

std::vector<int> SceneDataset::train_ids() const {
  std::vector<int> out;
  for (size_t i = 0; i < images.size(); ++i)
    if (!is_test[i]) out.push_back(images[i].id);
  return out;
}

std::vector<int> SceneDataset::test_ids() const {
  std::vector<int> out;
  for (size_t i = 0; i < images.size(); ++i)
    if (is_test[i]) out.push_back(images[i].id);
  return out;
}

SceneDataset synthesize_scene(const SceneSpec& spec) {
  require(spec.train_views >= 4 && spec.test_views >= 4, "scene-spec",
          "need at least 4 train and 4 test views");
  require(spec.res >= 16, "scene-spec", "resolution must be at least 16");
  require(spec.objects >= 0 && spec.objects <= 16, "scene-spec",
          "object count out of range [0,16]");

  World world = build_world(spec);
  int n = spec.train_views, m = spec.test_views;
  int W = spec.res, H = spec.res;
  double focal = 1.1 * spec.res;
  Vec3 target{0, 0.25, 0};

  // Camera centers first, so degenerate orbits are rejected before any ray
  // math can produce NaNs.
  Rng cams(Rng::mix({spec.seed, 0xca3e7a}));
  std::vector<Vec3> centers;
  std::vector<uint8_t> test_tag;
  for (int i = 0; i < n + m; ++i) {
    bool te = i >= n;
    double base = te ? (i - n + 0.5) / m : (double)i / n;
    double az = 2 * M_PI * (base + 0.3 * cams.uniform(-0.5, 0.5) / (te ? m : n));
    double rad = spec.orbit_radius * cams.uniform(0.95, 1.05);
    double hgt = cams.uniform(0.9, 1.4);
    centers.push_back({rad * std::cos(az), hgt, rad * std::sin(az)});
    test_tag.push_back(te);
  }
  {
    Eigen::MatrixXd P(centers.size(), 3);
    for (size_t i = 0; i < centers.size(); ++i)
      P.row(i) << centers[i].x, centers[i].y, centers[i].z;
    Eigen::RowVector3d mean = P.colwise().mean();
    P.rowwise() -= mean;
    Eigen::Vector3d ev =
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(P.transpose() * P).eigenvalues();
    require(ev(1) > 1e-10 * std::max(ev(2), 1e-30), "degenerate orbit",
            "camera centers are collinear; orbit spans no area");
  }

  SceneDataset ds;
  ds.descriptor = spec;
  int dil = (int)std::ceil(spec.dilate_frac * std::max(W, H));
  for (int i = 0; i < n + m; ++i) {
    PosedImage im;
    im.id = i;
    im.camera = look_at(centers[i], target, focal, W, H);
    im.camera.validate();
    ImageF with(H, W, 3), without(H, W, 3), depth(H, W, 1);
    Mask sil(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        Vec3 o, d;
        im.camera.ray(x + 0.5, y + 0.5, o, d);
        Hit hw = trace(world, o, d, true);
        Hit ho = trace(world, o, d, false);
        Vec3 cw = shade(hw), co = shade(ho);
        for (int ch = 0; ch < 3; ++ch) {
          with.at(y, x, ch) = (float)(ch == 0 ? cw.x : ch == 1 ? cw.y : cw.z);
          without.at(y, x, ch) = (float)(ch == 0 ? co.x : ch == 1 ? co.y : co.z);
        }
        depth.at(y, x, 0) = (float)ho.t;
        sil.set(y, x, hw.obj >= 0);
      }
    im.mask = dilate_disk(sil, dil);
    im.pixels = test_tag[i] ? without : with;
    im.gt_removed = without;
    im.gt_depth = depth;
    validate_image(im, true);
    ds.images.push_back(std::move(im));
    ds.is_test.push_back(test_tag[i]);
  }
  return ds;
}

void update_image(SceneDataset& ds, int id, const ImageF& new_pixels, const Mask& mask) {
  PosedImage& im = ds.by_id(id);
  require(new_pixels.h == im.pixels.h && new_pixels.w == im.pixels.w && new_pixels.c == 3,
          "shape", "update_image resolution mismatch");
  require(mask.h == im.mask.h && mask.w == im.mask.w && mask.m == im.mask.m, "mask mismatch",
          "update_image mask differs from the stored mask");
  for (int y = 0; y < im.pixels.h; ++y)
    for (int x = 0; x < im.pixels.w; ++x) {
      if (im.mask.at(y, x)) continue;
      for (int ch = 0; ch < 3; ++ch)
        require(new_pixels.at(y, x, ch) == im.pixels.at(y, x, ch), "non-mask pixels modified",
                "update_image would change pixels outside the mask of image " +
                    std::to_string(id));
    }
  for (float v : new_pixels.px)
    require(std::isfinite(v) && v >= 0.f && v <= 1.f, "pixel range",
            "update_image pixels outside [0,1]");
  im.pixels = new_pixels;
  ++ds.revision;
}

// ---- persistence -------------------------------------------------------------

void save_dataset(const SceneDataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  fs::create_directories(fs::path(dir) / "depth");
  fs::create_directories(fs::path(dir) / "gt_removed");

  ordered_json man;
  man["format"] = "maldnerf-dataset";
  man["version"] = 1;
  man["revision"] = ds.revision;
  const SceneSpec& sp = ds.descriptor;
  man["descriptor"] = {{"seed", sp.seed},
                       {"train_views", sp.train_views},
                       {"test_views", sp.test_views},
                       {"res", sp.res},
                       {"objects", sp.objects},
                       {"dilate_frac", sp.dilate_frac},
                       {"orbit_radius", sp.orbit_radius},
                       {"long_edge", sp.long_edge}};
  man["images"] = ordered_json::array();
  for (size_t i = 0; i < ds.images.size(); ++i) {
    const PosedImage& im = ds.images[i];
    const CameraModel& c = im.camera;
    ordered_json j;
    j["id"] = im.id;
    j["split"] = ds.is_test[i] ? "test" : "train";
    j["width"] = c.width;
    j["height"] = c.height;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["c2w"] = c.c2w;
    j["has_gt_removed"] = im.gt_removed.has_value();
    j["has_depth"] = im.gt_depth.has_value();
    man["images"].push_back(j);

    std::string id = std::to_string(im.id);
    write_f32(dir + "/images/" + id + ".f32", im.pixels.px.data(), im.pixels.px.size());
    write_png_rgb8(dir + "/images/" + id + ".png", im.pixels);
    write_png_gray8(dir + "/masks/" + id + ".png", im.mask);
    if (im.gt_depth)
      write_f32(dir + "/depth/" + id + ".f32", im.gt_depth->px.data(), im.gt_depth->px.size());
    if (im.gt_removed)
      write_f32(dir + "/gt_removed/" + id + ".f32", im.gt_removed->px.data(),
                im.gt_removed->px.size());
  }
  write_file(dir + "/manifest.json", man.dump(2) + "\n");
}

SceneDataset load_dataset(const std::string& dir) {
  std::string man_path = dir + "/manifest.json";
  require(file_exists(man_path), "dataset-load", "missing manifest: " + man_path);
  ordered_json man;
  try {
    man = ordered_json::parse(read_file(man_path));
  } catch (const nlohmann::json::exception& e) {
    raise("dataset-load", "corrupt manifest " + man_path + ": " + e.what());
  }
  SceneDataset ds;
  try {
    const auto& d = man.at("descriptor");
    ds.descriptor.seed = d.at("seed").get<uint64_t>();
    ds.descriptor.train_views = d.at("train_views").get<int>();
    ds.descriptor.test_views = d.at("test_views").get<int>();
    ds.descriptor.res = d.at("res").get<int>();
    ds.descriptor.objects = d.at("objects").get<int>();
    ds.descriptor.dilate_frac = d.at("dilate_frac").get<double>();
    ds.descriptor.orbit_radius = d.at("orbit_radius").get<double>();
    ds.descriptor.long_edge = d.at("long_edge").get<int>();
    ds.revision = man.at("revision").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    raise("dataset-load", "manifest " + man_path + " missing fields: " + e.what());
  }

  int long_edge = ds.descriptor.long_edge;
  for (const auto& j : man.at("images")) {
    PosedImage im;
    bool has_gt, has_depth;
    try {
      im.id = j.at("id").get<int>();
      CameraModel& c = im.camera;
      c.width = j.at("width").get<int>();
      c.height = j.at("height").get<int>();
      c.fx = j.at("fx").get<double>();
      c.fy = j.at("fy").get<double>();
      c.cx = j.at("cx").get<double>();
      c.cy = j.at("cy").get<double>();
      auto m16 = j.at("c2w").get<std::vector<double>>();
      require(m16.size() == 16, "dataset-load", "c2w must have 16 entries");
      std::copy(m16.begin(), m16.end(), im.camera.c2w.begin());
      ds.is_test.push_back(j.at("split").get<std::string>() == "test");
      has_gt = j.at("has_gt_removed").get<bool>();
      has_depth = j.at("has_depth").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      raise("dataset-load", "manifest " + man_path + " image entry invalid: " + e.what());
    }
    im.camera.validate();
    int H = im.camera.height, W = im.camera.width;
    std::string id = std::to_string(im.id);

    auto px = read_f32(dir + "/images/" + id + ".f32", (size_t)H * W * 3);
    im.pixels = ImageF(H, W, 3);
    im.pixels.px = std::move(px);
    std::string mask_path = dir + "/masks/" + id + ".png";
    require(file_exists(mask_path), "dataset-load", "missing mask file: " + mask_path);
    im.mask = read_png_mask(mask_path);
    require(im.mask.h == H && im.mask.w == W, "dataset-load",
            "mask resolution mismatch: " + mask_path);
    if (has_depth) {
      auto dp = read_f32(dir + "/depth/" + id + ".f32", (size_t)H * W);
      ImageF di(H, W, 1);
      di.px = std::move(dp);
      im.gt_depth = std::move(di);
    }
    if (has_gt) {
      auto gp = read_f32(dir + "/gt_removed/" + id + ".f32", (size_t)H * W * 3);
      ImageF gi(H, W, 3);
      gi.px = std::move(gp);
      im.gt_removed = std::move(gi);
    }

    // Import path: external images above the long-edge target are downscaled.
    bool resized = false;
    if (std::max(H, W) > long_edge) {
      double s = (double)long_edge / std::max(H, W);
      int nh = std::max(1, (int)std::lround(H * s));
      int nw = std::max(1, (int)std::lround(W * s));
      im.pixels = resize_area(im.pixels, nh, nw);
      if (im.gt_removed) im.gt_removed = resize_area(*im.gt_removed, nh, nw);
      if (im.gt_depth) im.gt_depth = resize_area(*im.gt_depth, nh, nw);
      ImageF mf(H, W, 1);
      for (size_t k = 0; k < im.mask.m.size(); ++k) mf.px[k] = im.mask.m[k] ? 1.f : 0.f;
      ImageF mr = resize_area(mf, nh, nw);
      Mask nm(nh, nw);
      for (size_t k = 0; k < nm.m.size(); ++k) nm.m[k] = mr.px[k] > 0.f;
      im.mask = dilate_disk(nm, 1);  // re-cover blended boundary pixels
      CameraModel& c = im.camera;
      c.fx *= (double)nw / W;
      c.cx *= (double)nw / W;
      c.fy *= (double)nh / H;
      c.cy *= (double)nh / H;
      c.width = nw;
      c.height = nh;
      resized = true;
    }
    // After a lossy resize the bit-exact gt_removed contract cannot hold.
    validate_image(im, !resized);
    ds.images.push_back(std::move(im));
  }
  std::vector<int> seen;
  for (const auto& im : ds.images) seen.push_back(im.id);
  std::sort(seen.begin(), seen.end());
  require(std::adjacent_find(seen.begin(), seen.end()) == seen.end(), "dataset-load",
          "duplicate image ids in manifest");
  return ds;
}

}  // namespace maldnerf::scene
