#include <cmath>
#include <vector>

#include "doctest.h"
#include "maldnerf/field/field.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/rng.hpp"

using namespace maldnerf;
using namespace maldnerf::ad;
using namespace maldnerf::field;

namespace {

FieldConfig tiny_config() {
  FieldConfig cfg;
  cfg.levels = 2;
  cfg.log2_table = 6;
  cfg.features = 2;
  cfg.base_res = 4;
  cfg.max_res = 8;
  cfg.density_hidden = 8;
  cfg.geo_features = 4;
  cfg.color_hidden = 8;
  cfg.prop_levels = 2;
  cfg.prop_log2_table = 5;
  cfg.prop_hidden = 4;
  cfg.prop_max_res = 8;
  return cfg;
}

// a few rays looking at the origin from outside
void make_rays(int n, uint64_t seed, std::vector<double>& o, std::vector<double>& d) {
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    double az = rng.uniform(0, 6.28), h = rng.uniform(0.5, 1.5);
    double ox = 2.0 * std::cos(az), oy = h, oz = 2.0 * std::sin(az);
    double nrm = std::sqrt(ox * ox + oy * oy + oz * oz);
    o.insert(o.end(), {ox, oy, oz});
    d.insert(d.end(), {-ox / nrm, -oy / nrm, -oz / nrm});
  }
}

// central finite differences on a handful of coordinates per parameter
template <typename F>
void fd_probe(const char* label, std::vector<Tensor> params, F f, double tol = 1e-4) {
  Tensor loss = f();
  auto gs = grad(loss, params, {});
  Rng rng(17);
  const double h = 1e-4;
  for (size_t p = 0; p < params.size(); ++p) {
    auto& v = params[p].leaf_value();
    int probes = std::min<int>(6, (int)v.size());
    for (int q = 0; q < probes; ++q) {
      size_t j = rng.u64() % v.size();
      double keep = v[j];
      v[j] = keep + h;
      double up = [&] { NoGradGuard ng; return f().item(); }();
      v[j] = keep - h;
      double dn = [&] { NoGradGuard ng; return f().item(); }();
      v[j] = keep;
      double fd = (up - dn) / (2 * h);
      double an = gs[p].value()[j];
      INFO(label << " param " << p << " coord " << j << " fd=" << fd << " an=" << an);
      CHECK(std::abs(an - fd) <= 1e-6 + 1e-4 * std::max(std::abs(fd), std::abs(an)));
    }
  }
}

}  // namespace

TEST_CASE("level resolutions are geometric and hit both endpoints") {
  auto r = level_resolutions(8, 4, 64);
  REQUIRE(r.size() == 8);
  CHECK(r.front() == 4);
  CHECK(r.back() == 64);
  for (size_t i = 1; i < r.size(); ++i) CHECK(r[i] >= r[i - 1]);
  // geometric spacing: ratios of consecutive levels stay near (64/4)^(1/7)
  double target = std::pow(16.0, 1.0 / 7.0);
  for (size_t i = 1; i < r.size(); ++i)
    CHECK(std::abs((double)r[i] / r[i - 1] - target) < 0.25);
  auto one = level_resolutions(1, 4, 64);
  CHECK(one == std::vector<int>{4});
}

TEST_CASE("contract matches its closed form") {
  auto run = [](double x, double y, double z) {
    Tensor p = Tensor::from({1, 3}, {x, y, z});
    return contract(p).value();
  };
  auto v = run(0.5, 0, 0);
  CHECK(v[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(v[1] == 0.0);
  v = run(2, 0, 0);
  CHECK(v[0] == doctest::Approx(1.5).epsilon(1e-12));
  // limit behavior at huge radius
  Rng rng(4);
  double a = rng.normal(), b = rng.normal(), c = rng.normal();
  double n = std::sqrt(a * a + b * b + c * c);
  double s = 1e6 / n;
  v = run(a * s, b * s, c * s);
  double nn = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  CHECK(nn > 1.999);
  CHECK(nn < 2.0);

  SUBCASE("output norm below 2 and 1-Lipschitz radially outside the unit ball") {
    Rng r2(11);
    for (int i = 0; i < 200; ++i) {
      double x = r2.normal(), y = r2.normal(), z = r2.normal();
      double nrm = std::sqrt(x * x + y * y + z * z);
      double s1 = r2.uniform(1.01, 50.0) / nrm;
      double s2 = s1 * r2.uniform(1.0, 3.0);
      auto c1 = run(x * s1, y * s1, z * s1);
      auto c2 = run(x * s2, y * s2, z * s2);
      double n1 = std::sqrt(c1[0] * c1[0] + c1[1] * c1[1] + c1[2] * c1[2]);
      double n2 = std::sqrt(c2[0] * c2[0] + c2[1] * c2[1] + c2[2] * c2[2]);
      CHECK(n2 < 2.0);
      CHECK(std::abs(n2 - n1) <= (s2 - s1) * nrm * (1 + 1e-9));
      // closed form of the radial contraction
      CHECK(n1 == doctest::Approx(2.0 - 1.0 / (s1 * nrm)).epsilon(1e-9));
    }
  }

  SUBCASE("gradient through the contraction matches finite differences") {
    Rng r3(5);
    std::vector<double> pts;
    for (int i = 0; i < 4; ++i) {
      // keep clear of the |x| = 1 seam where the mask kinks
      double x = r3.normal(), y = r3.normal(), z = r3.normal();
      double nrm = std::sqrt(x * x + y * y + z * z);
      double target = i % 2 == 0 ? r3.uniform(0.2, 0.8) : r3.uniform(1.3, 3.0);
      double s = target / nrm;
      pts.insert(pts.end(), {x * s, y * s, z * s});
    }
    Tensor p = Tensor::from({4, 3}, std::move(pts), true);
    Tensor probe = Tensor::from({4, 3}, {0.3, -0.7, 0.2, 1.1, 0.4, -0.2, 0.9, 0.1, 0.5, -0.4, 0.8, 0.6});
    fd_probe("contract", {p}, [&] { return sum_all(mul(square(contract(p)), probe)); });
  }

  SUBCASE("to_unit_cube lands strictly inside the unit cube") {
    Rng r4(6);
    std::vector<double> pts;
    for (int i = 0; i < 50; ++i) {
      double sc = std::pow(10.0, r4.uniform(-2, 3));
      pts.push_back(r4.normal() * sc);
      pts.push_back(r4.normal() * sc);
      pts.push_back(r4.normal() * sc);
    }
    auto u = to_unit_cube(Tensor::from({50, 3}, std::move(pts))).value();
    for (double x : u) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
  }
}

TEST_CASE("hash field features interpolate the tables") {
  auto cfg = tiny_config();
  Field f = Field::init(cfg, 3);
  // zero tables → zero features regardless of position
  for (auto& t : f.main.tables)
    for (auto& v : t.leaf_value()) v = 0.0;
  Tensor pts = Tensor::from({2, 3}, {0.1, 0.7, 0.3, 0.9, 0.2, 0.6});
  auto enc = hash_grid_encode(pts, f.main.tables, f.main.res).value();
  for (double e : enc) CHECK(e == 0.0);
}

TEST_CASE("composite matches a brute-force transmittance oracle") {
  Rng rng(21);
  const int R = 3, S = 7;
  const double t_far = 12.0;
  std::vector<double> sig((size_t)R * S), col((size_t)R * S * 3), edges((size_t)R * (S + 1));
  for (auto& v : sig) v = rng.uniform(0, 3.0);
  for (auto& v : col) v = rng.uniform();
  for (int r = 0; r < R; ++r) {
    edges[(size_t)r * (S + 1)] = 0.05;
    for (int j = 1; j <= S; ++j)
      edges[(size_t)r * (S + 1) + j] = edges[(size_t)r * (S + 1) + j - 1] + rng.uniform(0.1, 2.0);
  }
  std::vector<double> bg = {0.2, 0.5, 0.8};
  auto out = composite(Tensor::from({R, S}, sig), Tensor::from({R, S, 3}, col),
                       Tensor::from({R, S + 1}, edges), Tensor::from({3}, bg), t_far);
  for (int r = 0; r < R; ++r) {
    double T = 1.0, acc = 0, depth = 0, rgb[3] = {0, 0, 0};
    for (int j = 0; j < S; ++j) {
      double e0 = edges[(size_t)r * (S + 1) + j], e1 = edges[(size_t)r * (S + 1) + j + 1];
      double tau = sig[(size_t)r * S + j] * (e1 - e0);
      double w = T * (1 - std::exp(-tau));
      T *= std::exp(-tau);
      acc += w;
      depth += w * 0.5 * (e0 + e1);
      for (int ch = 0; ch < 3; ++ch) rgb[ch] += w * col[((size_t)r * S + j) * 3 + ch];
    }
    depth += (1 - acc) * t_far;
    for (int ch = 0; ch < 3; ++ch) rgb[ch] += (1 - acc) * bg[ch];
    CHECK(out.acc.value()[r] == doctest::Approx(acc).epsilon(1e-12));
    CHECK(out.depth.value()[r] == doctest::Approx(depth).epsilon(1e-12));
    for (int ch = 0; ch < 3; ++ch)
      CHECK(out.rgb.value()[(size_t)r * 3 + ch] == doctest::Approx(rgb[ch]).epsilon(1e-12));
  }

  SUBCASE("zero density → background color, far depth, zero mass") {
    auto z = composite(Tensor::zeros({1, S}), Tensor::from({1, S, 3}, std::vector<double>(S * 3, 0.9)),
                       Tensor::from({1, S + 1}, std::vector<double>(edges.begin(), edges.begin() + S + 1)),
                       Tensor::from({3}, bg), t_far);
    CHECK(z.acc.value()[0] == 0.0);
    CHECK(z.depth.value()[0] == doctest::Approx(t_far).epsilon(1e-12));
    for (int ch = 0; ch < 3; ++ch)
      CHECK(z.rgb.value()[ch] == doctest::Approx(bg[ch]).epsilon(1e-12));
  }

  SUBCASE("opaque slab → its color and midpoint depth") {
    std::vector<double> s2(S, 0.0);
    s2[3] = 1e8;  // slab in bin 3
    std::vector<double> c2((size_t)S * 3, 0.0);
    c2[9] = 0.1;
    c2[10] = 0.6;
    c2[11] = 0.9;
    std::vector<double> e2(S + 1);
    for (int j = 0; j <= S; ++j) e2[j] = 0.05 + 0.5 * j;
    auto z = composite(Tensor::from({1, S}, s2), Tensor::from({1, S, 3}, c2),
                       Tensor::from({1, S + 1}, e2), Tensor::from({3}, bg), t_far);
    CHECK(z.acc.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(z.depth.value()[0] == doctest::Approx(0.5 * (e2[3] + e2[4])).epsilon(1e-12));
    CHECK(z.rgb.value()[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(z.rgb.value()[1] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(z.rgb.value()[2] == doctest::Approx(0.9).epsilon(1e-12));
  }
}

TEST_CASE("compositing color is invariant to splitting constant intervals") {
  // piecewise-constant density and color on 4 bins, refined to 8 by halving
  Rng rng(31);
  const int S = 4;
  std::vector<double> sig(S), col(S * 3), e(S + 1), e2(2 * S + 1), sig2(2 * S), col2(2 * S * 3);
  e[0] = 0.1;
  for (int j = 0; j < S; ++j) {
    sig[j] = rng.uniform(0, 4.0);
    for (int ch = 0; ch < 3; ++ch) col[j * 3 + ch] = rng.uniform();
    e[j + 1] = e[j] + rng.uniform(0.2, 1.5);
  }
  for (int j = 0; j < S; ++j) {
    e2[2 * j] = e[j];
    e2[2 * j + 1] = 0.5 * (e[j] + e[j + 1]);
    sig2[2 * j] = sig2[2 * j + 1] = sig[j];
    for (int ch = 0; ch < 3; ++ch) {
      col2[(2 * j) * 3 + ch] = col[j * 3 + ch];
      col2[(2 * j + 1) * 3 + ch] = col[j * 3 + ch];
    }
  }
  e2[2 * S] = e[S];
  Tensor bg = Tensor::from({3}, {0.3, 0.3, 0.3});
  auto coarse = composite(Tensor::from({1, S}, sig), Tensor::from({1, S, 3}, col),
                          Tensor::from({1, S + 1}, e), bg, 12.0);
  auto fine = composite(Tensor::from({1, 2 * S}, sig2), Tensor::from({1, 2 * S, 3}, col2),
                        Tensor::from({1, 2 * S + 1}, e2), bg, 12.0);
  for (int ch = 0; ch < 3; ++ch)
    CHECK(coarse.rgb.value()[ch] == doctest::Approx(fine.rgb.value()[ch]).epsilon(1e-6));
  CHECK(coarse.acc.value()[0] == doctest::Approx(fine.acc.value()[0]).epsilon(1e-6));
  // per-parent mass is preserved exactly
  for (int j = 0; j < S; ++j) {
    double child = fine.weights.value()[2 * j] + fine.weights.value()[2 * j + 1];
    CHECK(coarse.weights.value()[j] == doctest::Approx(child).epsilon(1e-12));
  }
}

TEST_CASE("rendered weights form sub-probability histograms with ascending edges") {
  Field f = Field::init(tiny_config(), 12);
  std::vector<double> o, d;
  make_rays(6, 91, o, d);
  RenderOptions opt;
  opt.n_prop1 = 8;
  opt.n_prop2 = 8;
  opt.n_final = 6;
  opt.jitter = true;
  opt.jitter_seed = 5;
  auto out = render_rays(f, Tensor::from({6, 3}, o), Tensor::from({6, 3}, d), opt);
  auto check_h = [](const Histogram& h) {
    int R = h.weights.shape()[0], S = h.weights.shape()[1];
    const auto& w = h.weights.value();
    const auto& e = h.s_edges.value();
    for (int r = 0; r < R; ++r) {
      double sum = 0;
      for (int j = 0; j < S; ++j) {
        CHECK(w[(size_t)r * S + j] >= 0.0);
        sum += w[(size_t)r * S + j];
      }
      CHECK(sum <= 1.0 + 1e-6);
      for (int j = 0; j < S; ++j)
        CHECK(e[(size_t)r * (S + 1) + j] < e[(size_t)r * (S + 1) + j + 1]);
      CHECK(e[(size_t)r * (S + 1)] >= 0.0);
      CHECK(e[(size_t)r * (S + 1) + S] <= 1.0);
    }
  };
  REQUIRE(out.prop_h.size() == 2);
  check_h(out.prop_h[0]);
  check_h(out.prop_h[1]);
  check_h(out.final_h);
  for (double v : out.rgb.value()) CHECK(std::isfinite(v));
  for (double v : out.depth.value()) {
    CHECK(v > 0.0);
    CHECK(v <= 12.0 + 1e-9);
  }

  SUBCASE("same jitter seed reproduces the render bitwise, another seed moves it") {
    auto again = render_rays(f, Tensor::from({6, 3}, o), Tensor::from({6, 3}, d), opt);
    CHECK(again.rgb.value() == out.rgb.value());
    CHECK(again.depth.value() == out.depth.value());
    opt.jitter_seed = 6;
    auto moved = render_rays(f, Tensor::from({6, 3}, o), Tensor::from({6, 3}, d), opt);
    CHECK(moved.final_h.s_edges.value() != out.final_h.s_edges.value());
  }

  SUBCASE("single-stage rendering skips the proposals") {
    opt.use_proposals = false;
    auto single = render_rays(f, Tensor::from({6, 3}, o), Tensor::from({6, 3}, d), opt);
    CHECK(single.prop_h.empty());
    CHECK(single.final_h.weights.shape() == Shape({6, opt.n_final}));
  }
}

TEST_CASE("near-zero density renders the background at the far bound") {
  Field f = Field::init(tiny_config(), 8);
  f.main.mlp.b.back().leaf_value()[0] = -60.0;  // density ≈ softplus(-61) ≈ 3e-27
  std::vector<double> o, d;
  make_rays(4, 17, o, d);
  RenderOptions opt;
  opt.n_prop1 = 8;
  opt.n_prop2 = 8;
  opt.n_final = 6;
  auto out = render_rays(f, Tensor::from({4, 3}, o), Tensor::from({4, 3}, d), opt);
  auto bgv = [&] { NoGradGuard ng; return sigmoid(f.bg_raw).value(); }();
  for (int r = 0; r < 4; ++r) {
    CHECK(out.acc.value()[r] < 1e-12);
    CHECK(out.depth.value()[r] == doctest::Approx(12.0).epsilon(1e-12));
    for (int ch = 0; ch < 3; ++ch)
      CHECK(out.rgb.value()[(size_t)r * 3 + ch] == doctest::Approx(bgv[ch]).epsilon(1e-10));
  }
}

TEST_CASE("render gradients match finite differences") {
  Field f = Field::init(tiny_config(), 23);
  std::vector<double> o, d;
  make_rays(3, 41, o, d);
  Tensor origins = Tensor::from({3, 3}, o), dirs = Tensor::from({3, 3}, d);
  RenderOptions opt;
  opt.n_prop1 = 6;
  opt.n_prop2 = 6;
  opt.n_final = 4;

  SUBCASE("color and depth w.r.t. main field, color head, and background") {
    std::vector<Tensor> params;
    for (auto& t : f.main.tables) params.push_back(t);
    params.push_back(f.main.mlp.W[0]);
    params.push_back(f.main.mlp.b[1]);
    params.push_back(f.color.W[0]);
    params.push_back(f.color.b[1]);
    params.push_back(f.bg_raw);
    fd_probe("render", params, [&] {
      auto out = render_rays(f, origins, dirs, opt);
      return add(sum_all(square(out.rgb)), mul_scalar(sum_all(square(out.depth)), 0.1));
    });
  }

  SUBCASE("proposal histogram weights w.r.t. their own parameters") {
    // stage-k sample positions never depend on stage-k parameters, so finite
    // differences are exact here even though resampling is stop-grad
    std::vector<Tensor> p1 = {f.props[0].tables[0], f.props[0].mlp.W[0], f.props[0].mlp.b[1]};
    fd_probe("prop1", p1, [&] {
      return sum_all(square(render_rays(f, origins, dirs, opt).prop_h[0].weights));
    });
    std::vector<Tensor> p2 = {f.props[1].tables[1], f.props[1].mlp.W[1]};
    fd_probe("prop2", p2, [&] {
      return sum_all(square(render_rays(f, origins, dirs, opt).prop_h[1].weights));
    });
  }
}

TEST_CASE("hash decay is the mean squared table entry") {
  Field f = Field::init(tiny_config(), 30);
  double sum = 0;
  int64_t n = 0;
  auto tally = [&](const HashField& hf) {
    for (const auto& t : hf.tables) {
      for (double v : t.value()) sum += v * v;
      n += t.numel();
    }
  };
  tally(f.main);
  tally(f.props[0]);
  tally(f.props[1]);
  CHECK(hash_decay(f).item() == doctest::Approx(sum / n).epsilon(1e-12));

  SUBCASE("all-zero tables give zero; a single entry gives v²/M") {
    auto zero_all = [&](Field& g) {
      for (auto* hf : {&g.main, &g.props[0], &g.props[1]})
        for (auto& t : hf->tables)
          for (auto& v : t.leaf_value()) v = 0.0;
    };
    zero_all(f);
    CHECK(hash_decay(f).item() == 0.0);
    f.main.tables[1].leaf_value()[7] = 0.25;
    CHECK(hash_decay(f).item() == doctest::Approx(0.0625 / n).epsilon(1e-12));
  }

  SUBCASE("decay gradient reaches the tables") {
    Rng rng(2);
    for (auto& v : f.main.tables[0].leaf_value()) v = rng.uniform(-0.2, 0.2);
    fd_probe("decay", {f.main.tables[0]}, [&] { return hash_decay(f); });
  }
}

TEST_CASE("field blob round-trip restores bit-identical renders") {
  Field f = Field::init(tiny_config(), 77);
  std::vector<double> o, d;
  make_rays(4, 3, o, d);
  RenderOptions opt;
  opt.n_prop1 = 8;
  opt.n_prop2 = 8;
  opt.n_final = 6;
  auto before = render_rays(f, Tensor::from({4, 3}, o), Tensor::from({4, 3}, d), opt);

  Blob b = f.to_blob();
  CHECK(b.kind == kFieldBlobKind);
  Field g = Field::from_blob(b);
  auto after = render_rays(g, Tensor::from({4, 3}, o), Tensor::from({4, 3}, d), opt);
  CHECK(before.rgb.value() == after.rgb.value());
  CHECK(before.depth.value() == after.depth.value());
  CHECK(before.final_h.weights.value() == after.final_h.weights.value());

  SUBCASE("parameter order and count are stable") {
    auto pf = f.params(), pg = g.params();
    REQUIRE(pf.size() == pg.size());
    for (size_t i = 0; i < pf.size(); ++i) CHECK(pf[i].value() == pg[i].value());
  }

  SUBCASE("malformed blobs are rejected") {
    Blob bad = b;
    bad.meta.resize(3);
    CHECK_THROWS_WITH_AS(Field::from_blob(bad), doctest::Contains("meta"), Error);
    Blob short_params = b;
    short_params.params.pop_back();
    CHECK_THROWS_WITH_AS(Field::from_blob(short_params), doctest::Contains("count"), Error);
  }
}
