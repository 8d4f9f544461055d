#include "maldnerf/util/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "maldnerf/util/error.hpp"

namespace maldnerf {

Mask dilate_disk(const Mask& in, int radius) {
  if (radius <= 0) return in;
  Mask out(in.h, in.w);
  const int r2 = radius * radius;
  // Precompute disk offsets once; masks are small at desk scale.
  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= r2) disk.emplace_back(dy, dx);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      if (!in.at(y, x)) continue;
      for (auto [dy, dx] : disk) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < in.h && xx >= 0 && xx < in.w) out.set(yy, xx, true);
      }
    }
  }
  return out;
}

float sample_bilinear(const ImageF& img, double y, double x, int ch) {
  const double yc = std::clamp(y, 0.0, double(img.h - 1));
  const double xc = std::clamp(x, 0.0, double(img.w - 1));
  const int y0 = int(std::floor(yc)), x0 = int(std::floor(xc));
  const int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
  const double fy = yc - y0, fx = xc - x0;
  const double v00 = img.at(y0, x0, ch), v01 = img.at(y0, x1, ch);
  const double v10 = img.at(y1, x0, ch), v11 = img.at(y1, x1, ch);
  return float((v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy);
}

ImageF resize_area(const ImageF& in, int oh, int ow) {
  require(oh > 0 && ow > 0, "bad resize", "target dims must be positive");
  ImageF out(oh, ow, in.c);
  const double sy = double(in.h) / oh, sx = double(in.w) / ow;
  for (int y = 0; y < oh; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < ow; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      for (int ch = 0; ch < in.c; ++ch) {
        double acc = 0.0, area = 0.0;
        for (int yy = int(std::floor(y0)); yy < int(std::ceil(y1)); ++yy) {
          const double hy = std::min(double(yy + 1), y1) - std::max(double(yy), y0);
          if (hy <= 0) continue;
          for (int xx = int(std::floor(x0)); xx < int(std::ceil(x1)); ++xx) {
            const double hx = std::min(double(xx + 1), x1) - std::max(double(xx), x0);
            if (hx <= 0) continue;
            acc += hy * hx * in.at(std::min(yy, in.h - 1), std::min(xx, in.w - 1), ch);
            area += hy * hx;
          }
        }
        out.at(y, x, ch) = float(acc / area);
      }
    }
  }
  return out;
}

double seam_energy(const ImageF& img, const Mask& mask) {
  double acc = 0.0;
  size_t n = 0;
  auto edge = [&](int y0, int x0, int y1, int x1) {
    if (mask.at(y0, x0) == mask.at(y1, x1)) return;
    double e = 0.0;
    for (int ch = 0; ch < img.c; ++ch) {
      const double d = double(img.at(y0, x0, ch)) - double(img.at(y1, x1, ch));
      e += d * d;
    }
    acc += e;
    ++n;
  };
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      if (x + 1 < img.w) edge(y, x, y, x + 1);
      if (y + 1 < img.h) edge(y, x, y + 1, x);
    }
  return n ? acc / double(n) : 0.0;
}

double psnr_masked(const ImageF& a, const ImageF& b, const Mask& mask) {
  require(a.same_dims(b), "dim mismatch", "psnr_masked inputs must match");
  double mse = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      if (!mask.at(y, x)) continue;
      for (int ch = 0; ch < a.c; ++ch) {
        const double d = double(a.at(y, x, ch)) - double(b.at(y, x, ch));
        mse += d * d;
      }
      ++n;
    }
  if (n == 0) return 0.0;
  mse /= double(n * a.c);
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace maldnerf
