#include "maldnerf/losses/losses.hpp"

#include <cmath>

#include "maldnerf/util/error.hpp"

namespace maldnerf::losses {

using namespace maldnerf::ad;

Tensor pixel_loss(const Tensor& x, const Tensor& target) {
  require(x.shape() == target.shape(), "loss", "pixel_loss shape mismatch");
  require(x.numel() > 0, "loss", "pixel_loss on an empty pixel set");
  return mean_all(square(sub(x, target)));
}

Tensor interlevel_loss(const Histogram& final_h, const Histogram& prop_h) {
  int R = final_h.weights.shape()[0], n = final_h.weights.shape()[1];
  int m = prop_h.weights.shape()[1];
  require(prop_h.weights.shape()[0] == R, "loss", "interlevel_loss ray count mismatch");

  // inclusive cumulative proposal mass with a leading zero: [R, m+1]
  Tensor z = concat({Tensor::zeros({R, 1}), cumsum_last(prop_h.weights, false)}, 1);

  const auto& fs = final_h.s_edges.value();
  const auto& ps = prop_h.s_edges.value();
  std::vector<int64_t> lo((size_t)R * n), hi((size_t)R * n);
  std::vector<double> valid((size_t)R * n, 1.0);
  for (int r = 0; r < R; ++r) {
    const double* f = fs.data() + (size_t)r * (n + 1);
    const double* p = ps.data() + (size_t)r * (m + 1);
    int a = 0, b = 0;
    for (int i = 0; i < n; ++i) {
      size_t k = (size_t)r * n + i;
      if (!(f[i + 1] > f[i])) {
        valid[k] = 0.0;
        lo[k] = hi[k] = 0;
        continue;
      }
      while (a + 1 < m && p[a + 1] <= f[i]) ++a;
      while (b + 1 < m && p[b + 1] < f[i + 1]) ++b;
      lo[k] = a;
      hi[k] = b + 1;
    }
  }
  Tensor bound = sub(gather_last(z, hi, n), gather_last(z, lo, n));
  Tensor w = final_h.weights.detach();
  Tensor term = div(square(relu(sub(w, bound))), add_scalar(w, 1e-7));
  return mul_scalar(sum_all(mul(term, Tensor::from({R, n}, std::move(valid)))), 1.0 / R);
}

Tensor distortion_loss(const Histogram& h) {
  int R = h.weights.shape()[0], S = h.weights.shape()[1];
  Tensor e0 = slice(h.s_edges, {0, 0}, {R, S});
  Tensor e1 = slice(h.s_edges, {0, 1}, {R, S});
  Tensor mid = mul_scalar(add(e0, e1), 0.5);  // const: edges carry no grad
  Tensor width = sub(e1, e0);
  const Tensor& w = h.weights;
  // Σ_{i,j} w_i w_j |m_i − m_j| = 2 Σ_i w_i (m_i Σ_{j<i} w_j − Σ_{j<i} w_j m_j)
  // using that midpoints ascend within a ray.
  Tensor below_w = cumsum_last(w, true);
  Tensor below_wm = cumsum_last(mul(w, mid), true);
  Tensor cross = mul_scalar(sum_all(mul(w, sub(mul(mid, below_w), below_wm))), 2.0);
  Tensor self = mul_scalar(sum_all(mul(square(w), width)), 1.0 / 3.0);
  return mul_scalar(add(cross, self), 1.0 / R);
}

DepthAlignment solve_shift_scale(const std::vector<double>& estimated,
                                 const std::vector<double>& rendered,
                                 const std::vector<uint8_t>& fit_mask) {
  require(estimated.size() == rendered.size() && estimated.size() == fit_mask.size(), "loss",
          "solve_shift_scale length mismatch");
  double se = 0, sd = 0;
  int n = 0;
  for (size_t k = 0; k < fit_mask.size(); ++k)
    if (fit_mask[k]) {
      se += estimated[k];
      sd += rendered[k];
      ++n;
    }
  require(n >= 2, "degenerate depth prior", "shift-scale fit needs at least 2 pixels");
  double me = se / n, md = sd / n;
  double var = 0, cov = 0, scale = 0;
  for (size_t k = 0; k < fit_mask.size(); ++k)
    if (fit_mask[k]) {
      double de = estimated[k] - me;
      var += de * de;
      cov += de * (rendered[k] - md);
      scale = std::max(scale, estimated[k] * estimated[k]);
    }
  require(var > 1e-12 * std::max(1.0, scale) * n, "degenerate depth prior",
          "estimated depth is constant on the fit region");
  DepthAlignment out;
  out.a = cov / var;
  out.b = md - out.a * me;
  out.n_fit = n;
  double ss = 0;
  for (size_t k = 0; k < fit_mask.size(); ++k)
    if (fit_mask[k]) {
      double r = out.a * estimated[k] + out.b - rendered[k];
      ss += r * r;
    }
  out.residual = std::sqrt(ss / n);
  require(std::isfinite(out.a) && std::isfinite(out.b), "degenerate depth prior",
          "shift-scale fit is not finite");
  return out;
}

std::vector<DepthPair> sample_depth_pairs(const Mask& mask, int n_pairs, int window, Rng& rng) {
  std::vector<int> inside;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) inside.push_back(y * mask.w + x);
  std::vector<DepthPair> pairs;
  if (inside.size() < 2) return pairs;
  for (int k = 0; k < n_pairs; ++k) {
    int i = inside[rng.uniform_int((int)inside.size())];
    int yi = i / mask.w, xi = i % mask.w;
    for (int attempt = 0; attempt < 32; ++attempt) {
      int xj = xi + rng.uniform_int(2 * window + 1) - window;
      int yj = yi + rng.uniform_int(2 * window + 1) - window;
      if (xj < 0 || yj < 0 || xj >= mask.w || yj >= mask.h) continue;
      if (!mask.at(yj, xj)) continue;
      int j = yj * mask.w + xj;
      if (j == i) continue;
      pairs.push_back({i, j});
      break;
    }
  }
  return pairs;
}

Tensor depth_ranking_loss(const Tensor& d, const std::vector<double>& aligned,
                          const std::vector<DepthPair>& pairs, double margin,
                          bool* empty_warning) {
  int N = d.shape()[0];
  require((int)aligned.size() == N, "loss", "depth_ranking_loss length mismatch");
  std::vector<int64_t> ii, jj;
  for (const auto& p : pairs) {
    if (aligned[p.i] < aligned[p.j]) {
      ii.push_back(p.i);
      jj.push_back(p.j);
    } else if (aligned[p.j] < aligned[p.i]) {
      ii.push_back(p.j);
      jj.push_back(p.i);
    }
  }
  if (ii.empty()) {
    if (empty_warning) *empty_warning = true;
    return Tensor::scalar(0.0);
  }
  if (empty_warning) *empty_warning = false;
  Tensor d2 = reshape(d, {N, 1});
  Tensor di = gather_rows(d2, ii), dj = gather_rows(d2, jj);
  return mean_all(relu(add_scalar(sub(di, dj), margin)));
}

}  // namespace maldnerf::losses
