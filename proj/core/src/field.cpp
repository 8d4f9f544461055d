#include "maldnerf/field/field.hpp"

#include <cmath>

#include "maldnerf/util/error.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::field {

using namespace maldnerf::ad;

std::vector<int> level_resolutions(int levels, int base_res, int max_res) {
  std::vector<int> out;
  for (int l = 0; l < levels; ++l) {
    double f = levels == 1 ? 0.0 : (double)l / (levels - 1);
    out.push_back((int)std::lround(base_res * std::pow((double)max_res / base_res, f)));
  }
  return out;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < W.size(); ++i) {
    h = add(matmul(h, W[i], false, true), b[i]);
    if (i + 1 < W.size()) h = softplus(h);
  }
  return h;
}

namespace {

Mlp init_mlp(const std::vector<int>& dims, Rng& rng) {
  Mlp m;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    int in = dims[i], out = dims[i + 1];
    std::vector<double> w((int64_t)in * out);
    double s = std::sqrt(2.0 / in);
    for (auto& v : w) v = s * rng.normal();
    m.W.push_back(Tensor::from({out, in}, std::move(w), true));
    m.b.push_back(Tensor::zeros({out}, true));
  }
  return m;
}

HashField init_hash(int levels, int log2_table, int features, int base_res, int max_res,
                    const std::vector<int>& mlp_dims, Rng& rng) {
  HashField hf;
  hf.res = level_resolutions(levels, base_res, max_res);
  int T = 1 << log2_table;
  for (int l = 0; l < levels; ++l) {
    std::vector<double> t((int64_t)T * features);
    for (auto& v : t) v = rng.uniform(-1e-4, 1e-4);
    hf.tables.push_back(Tensor::from({T, features}, std::move(t), true));
  }
  hf.mlp = init_mlp(mlp_dims, rng);
  return hf;
}

void append_params(const HashField& hf, std::vector<Tensor>& out) {
  for (const auto& t : hf.tables) out.push_back(t);
  for (size_t i = 0; i < hf.mlp.W.size(); ++i) {
    out.push_back(hf.mlp.W[i]);
    out.push_back(hf.mlp.b[i]);
  }
}

}  // namespace

Field Field::init(const FieldConfig& cfg, uint64_t seed) {
  require(cfg.levels >= 2, "field-config", "need at least 2 hash levels");
  require(cfg.features == 2 || cfg.features == 4, "field-config", "features must be 2 or 4");
  Field f;
  f.cfg = cfg;
  Rng rng(Rng::mix({seed, 0xf1e1d}));
  int enc = cfg.levels * cfg.features;
  f.main = init_hash(cfg.levels, cfg.log2_table, cfg.features, cfg.base_res, cfg.max_res,
                     {enc, cfg.density_hidden, 1 + cfg.geo_features}, rng);
  f.color = init_mlp({cfg.geo_features + 3, cfg.color_hidden, 3}, rng);
  f.bg_raw = Tensor::zeros({3}, true);
  int penc = cfg.prop_levels * cfg.features;
  for (int p = 0; p < 2; ++p)
    f.props.push_back(init_hash(cfg.prop_levels, cfg.prop_log2_table, cfg.features, cfg.base_res,
                                cfg.prop_max_res, {penc, cfg.prop_hidden, 1}, rng));
  // keep parameters on the f32 grid so checkpoints are lossless from step 0
  for (auto& p : f.params())
    for (auto& v : p.leaf_value()) v = (double)(float)v;
  return f;
}

std::vector<Tensor> Field::params() const {
  std::vector<Tensor> out;
  append_params(main, out);
  for (size_t i = 0; i < color.W.size(); ++i) {
    out.push_back(color.W[i]);
    out.push_back(color.b[i]);
  }
  out.push_back(bg_raw);
  for (const auto& p : props) append_params(p, out);
  return out;
}

Blob Field::to_blob() const {
  Blob b;
  b.kind = kFieldBlobKind;
  b.meta = {cfg.levels,      cfg.log2_table,      cfg.features,    cfg.base_res,
            cfg.max_res,     cfg.density_hidden,  cfg.geo_features, cfg.color_hidden,
            cfg.prop_levels, cfg.prop_log2_table, cfg.prop_hidden, cfg.prop_max_res,
            (int64_t)std::llround(cfg.t_near * 1e9), (int64_t)std::llround(cfg.t_far * 1e9)};
  for (const auto& p : params())
    for (double v : p.value()) b.params.push_back((float)v);
  return b;
}

Field Field::from_blob(const Blob& b) {
  require(b.meta.size() == 14, "checkpoint", "field blob meta has wrong arity");
  FieldConfig cfg;
  cfg.levels = (int)b.meta[0];
  cfg.log2_table = (int)b.meta[1];
  cfg.features = (int)b.meta[2];
  cfg.base_res = (int)b.meta[3];
  cfg.max_res = (int)b.meta[4];
  cfg.density_hidden = (int)b.meta[5];
  cfg.geo_features = (int)b.meta[6];
  cfg.color_hidden = (int)b.meta[7];
  cfg.prop_levels = (int)b.meta[8];
  cfg.prop_log2_table = (int)b.meta[9];
  cfg.prop_hidden = (int)b.meta[10];
  cfg.prop_max_res = (int)b.meta[11];
  cfg.t_near = b.meta[12] * 1e-9;
  cfg.t_far = b.meta[13] * 1e-9;
  Field f = init(cfg, 0);
  auto ps = f.params();
  size_t need = 0;
  for (const auto& p : ps) need += p.numel();
  require(b.params.size() == need, "checkpoint", "field blob parameter count mismatch");
  size_t k = 0;
  for (auto& p : ps) {
    auto& v = p.leaf_value();
    for (auto& x : v) x = (double)b.params[k++];
  }
  return f;
}

// ---- geometry ----------------------------------------------------------------

Tensor contract(const Tensor& pts) {
  const Shape& s = pts.shape();
  require(s.size() == 2 && s[1] == 3, "shape", "contract expects [n,3] points");
  Tensor n2 = sum_axes(square(pts), {1}, true);                  // [n,1]
  Tensor nrm = sqrt(maximum(n2, Tensor::scalar(1e-24)));
  Tensor inside = ge_mask(Tensor::full({s[0], 1}, 1.0), nrm);    // 1 where |x| <= 1
  Tensor outside_factor = div(add_scalar(mul_scalar(nrm, 2.0), -1.0), mul(nrm, nrm));
  Tensor factor = add(inside, mul(add_scalar(neg(inside), 1.0), outside_factor));
  return mul(pts, factor);
}

Tensor to_unit_cube(const Tensor& pts) {
  return mul_scalar(add_scalar(contract(pts), 2.0), 0.25);
}

DensityOut eval_density(const HashField& hf, const Tensor& pts, bool has_geo) {
  Tensor enc = hash_grid_encode(to_unit_cube(pts), hf.tables, hf.res);
  Tensor out = hf.mlp.forward(enc);
  int n = out.shape()[0];
  DensityOut d;
  Tensor raw = reshape(slice(out, {0, 0}, {n, 1}), {n});
  d.sigma = softplus(add_scalar(raw, -1.0));
  if (has_geo) d.geo = slice(out, {0, 1}, {n, out.shape()[1] - 1});
  return d;
}

// ---- compositing ----------------------------------------------------------------

namespace {

// transmittance-weighted bin masses from densities and interval widths
Tensor bin_weights(const Tensor& sigma, const Tensor& t_edges) {
  int R = sigma.shape()[0], S = sigma.shape()[1];
  Tensor d = sub(slice(t_edges, {0, 1}, {R, S}), slice(t_edges, {0, 0}, {R, S}));
  Tensor tau = mul(sigma, d);
  Tensor trans = exp(neg(cumsum_last(tau, true)));
  Tensor alpha = add_scalar(neg(exp(neg(tau))), 1.0);
  return mul(trans, alpha);
}

}  // namespace

CompositeOut composite(const Tensor& sigma, const Tensor& rgb, const Tensor& t_edges,
                       const Tensor& bg, double t_far) {
  int R = sigma.shape()[0], S = sigma.shape()[1];
  CompositeOut out;
  out.weights = bin_weights(sigma, t_edges);
  out.acc = sum_axes(out.weights, {1}, false);
  Tensor w3 = reshape(out.weights, {R, S, 1});
  Tensor fg = sum_axes(mul(w3, rgb), {1}, false);  // [R,3]
  Tensor rest = add_scalar(neg(out.acc), 1.0);     // [R]
  out.rgb = add(fg, mul(reshape(rest, {R, 1}), reshape(bg, {1, 3})));
  Tensor tmid = mul_scalar(add(slice(t_edges, {0, 1}, {R, S}), slice(t_edges, {0, 0}, {R, S})),
                           0.5);
  out.depth = add(sum_axes(mul(out.weights, tmid), {1}, false), mul_scalar(rest, t_far));
  return out;
}

// ---- sampling --------------------------------------------------------------------

namespace {

// Inverse-CDF resampling of normalized-edge histograms. Pure value
// computation: positions are constants to the autodiff graph.
std::vector<double> resample_edges(const std::vector<double>& edges,
                                   const std::vector<double>& w, int R, int S, int n_new,
                                   bool jitter, Rng& rng) {
  std::vector<double> out((size_t)R * (n_new + 1));
  std::vector<double> cdf(S + 1);
  const double pad = 1e-3 / S;
  for (int r = 0; r < R; ++r) {
    const double* e = edges.data() + (size_t)r * (S + 1);
    const double* wr = w.data() + (size_t)r * S;
    cdf[0] = 0;
    for (int j = 0; j < S; ++j) cdf[j + 1] = cdf[j] + wr[j] + pad;
    double total = cdf[S];
    for (int j = 1; j <= S; ++j) cdf[j] /= total;
    double* o = out.data() + (size_t)r * (n_new + 1);
    o[0] = 0.0;
    o[n_new] = 1.0;
    int j = 0;
    for (int i = 1; i < n_new; ++i) {
      double u = jitter ? rng.uniform() : 0.5;
      double v = (i - 1 + u) / (n_new - 1);
      while (j + 1 < S && cdf[j + 1] <= v) ++j;
      double span = cdf[j + 1] - cdf[j];
      double frac = span > 0 ? (v - cdf[j]) / span : 0.5;
      o[i] = e[j] + frac * (e[j + 1] - e[j]);
    }
    for (int i = 1; i < n_new; ++i) o[i] = std::min(std::max(o[i], o[i - 1] + 1e-9), 1.0 - 1e-9);
  }
  return out;
}

Tensor uniform_edges(int R, int S) {
  std::vector<double> e((size_t)R * (S + 1));
  for (int r = 0; r < R; ++r)
    for (int i = 0; i <= S; ++i) e[(size_t)r * (S + 1) + i] = (double)i / S;
  return Tensor::from({R, S + 1}, std::move(e));
}

struct StageGeom {
  Tensor s_edges;  // [R,S+1] const
  Tensor t_edges;  // [R,S+1] const
  Tensor t_mid;    // [R,S]  const
  Tensor pts;      // [R*S,3] const
};

StageGeom stage_geometry(const Tensor& s_edges, const Tensor& origins, const Tensor& dirs,
                         double t_near, double t_far) {
  int R = s_edges.shape()[0], S = s_edges.shape()[1] - 1;
  StageGeom g;
  g.s_edges = s_edges;
  g.t_edges = add_scalar(mul_scalar(s_edges, t_far - t_near), t_near);
  g.t_mid = mul_scalar(add(slice(g.t_edges, {0, 1}, {R, S}), slice(g.t_edges, {0, 0}, {R, S})),
                       0.5);
  Tensor o3 = reshape(origins, {R, 1, 3});
  Tensor d3 = reshape(dirs, {R, 1, 3});
  Tensor tm = reshape(g.t_mid, {R, S, 1});
  g.pts = reshape(add(broadcast_to(o3, {R, S, 3}), mul(tm, d3)), {R * S, 3});
  return g;
}

void check_density(const Tensor& sigma, const char* stage) {
  const auto& v = sigma.value();
  int S = sigma.shape()[1];
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      raise("non-finite", std::string("density is non-finite at ") + stage + " ray " +
                              std::to_string(i / S) + " sample " + std::to_string(i % S));
}

}  // namespace

RenderOut render_rays(const Field& f, const Tensor& origins, const Tensor& dirs,
                      const RenderOptions& opt) {
  int R = origins.shape()[0];
  require(dirs.shape() == Shape({R, 3}) && origins.shape() == Shape({R, 3}), "shape",
          "render_rays expects [R,3] origins and dirs");
  double tn = f.cfg.t_near, tf = f.cfg.t_far;
  Rng rng(Rng::mix({opt.jitter_seed, 0x5a3b1e}));
  RenderOut out;

  Tensor s_edges = uniform_edges(R, opt.use_proposals ? opt.n_prop1 : opt.n_final);
  if (opt.use_proposals) {
    for (int stage = 0; stage < 2; ++stage) {
      const HashField& hf = f.props[stage];
      StageGeom g = stage_geometry(s_edges, origins, dirs, tn, tf);
      int S = s_edges.shape()[1] - 1;
      Tensor sigma = reshape(eval_density(hf, g.pts, false).sigma, {R, S});
      check_density(sigma, stage == 0 ? "proposal 1" : "proposal 2");
      Tensor w = bin_weights(sigma, g.t_edges);
      out.prop_h.push_back({g.s_edges, w, g.t_mid});
      int n_next = stage == 0 ? opt.n_prop2 : opt.n_final;
      auto new_edges = resample_edges(g.s_edges.value(), w.detach().value(), R, S, n_next,
                                      opt.jitter, rng);
      s_edges = Tensor::from({R, n_next + 1}, std::move(new_edges));
    }
  }

  StageGeom g = stage_geometry(s_edges, origins, dirs, tn, tf);
  int S = s_edges.shape()[1] - 1;
  DensityOut den = eval_density(f.main, g.pts, true);
  Tensor sigma = reshape(den.sigma, {R, S});
  check_density(sigma, "final");
  Tensor dirs_rep = reshape(broadcast_to(reshape(dirs, {R, 1, 3}), {R, S, 3}), {R * S, 3});
  Tensor rgb_samples = sigmoid(f.color.forward(concat({den.geo, dirs_rep}, 1)));
  CompositeOut c = composite(sigma, reshape(rgb_samples, {R, S, 3}), g.t_edges,
                             sigmoid(f.bg_raw), tf);
  out.rgb = c.rgb;
  out.depth = c.depth;
  out.acc = c.acc;
  out.final_h = {g.s_edges, c.weights, g.t_mid};
  return out;
}

Tensor hash_decay(const Field& f) {
  int64_t total = 0;
  Tensor s = Tensor::scalar(0.0);
  auto accum = [&](const HashField& hf) {
    for (const auto& t : hf.tables) {
      total += t.numel();
      s = add(s, sum_all(square(t)));
    }
  };
  accum(f.main);
  for (const auto& p : f.props) accum(p);
  return mul_scalar(s, 1.0 / (double)total);
}

}  // namespace maldnerf::field
