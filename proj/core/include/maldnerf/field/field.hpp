#pragma once

#include <cstdint>
#include <vector>

#include "maldnerf/ad/tensor.hpp"
#include "maldnerf/util/io.hpp"

namespace maldnerf::field {

using ad::Tensor;

struct FieldConfig {
  // main field
  int levels = 8;
  int log2_table = 14;
  int features = 2;
  int base_res = 4;
  int max_res = 64;
  int density_hidden = 32;
  int geo_features = 16;
  int color_hidden = 32;
  // proposal fields (density-only, half levels / table size)
  int prop_levels = 4;
  int prop_log2_table = 13;
  int prop_hidden = 16;
  int prop_max_res = 32;
  // ray bounds (metric)
  double t_near = 0.05;
  double t_far = 12.0;
};

// Per-level grid resolutions, geometric from base_res to max_res.
std::vector<int> level_resolutions(int levels, int base_res, int max_res);

struct Mlp {
  std::vector<Tensor> W;  // [out,in] each
  std::vector<Tensor> b;  // [out]
  // softplus hidden activations, linear output
  Tensor forward(const Tensor& x) const;
};

struct HashField {
  std::vector<Tensor> tables;  // levels x [T,F]
  std::vector<int> res;
  Mlp mlp;
};

struct Field {
  FieldConfig cfg;
  HashField main;        // mlp: L*F -> hidden -> 1 + geo_features
  Mlp color;             // geo + dir(3) -> hidden -> 3, sigmoid outside
  Tensor bg_raw;         // [3], background color = sigmoid(bg_raw)
  std::vector<HashField> props;  // 2 proposal fields, mlp: L*F -> hidden -> 1

  static Field init(const FieldConfig& cfg, uint64_t seed);
  std::vector<Tensor> params() const;  // declaration order, stable
  Blob to_blob() const;
  static Field from_blob(const Blob& blob);
};

// Scene contraction: identity inside the unit ball, (2 - 1/|x|) x/|x| outside.
Tensor contract(const Tensor& pts);
// contract + affine map of [-2,2]^3 to [0,1]^3
Tensor to_unit_cube(const Tensor& pts);

struct DensityOut {
  Tensor sigma;  // [n]
  Tensor geo;    // [n, geo_features] (main field only)
};

// Density of the main field (has_geo) or a proposal field at world points.
DensityOut eval_density(const HashField& hf, const Tensor& pts, bool has_geo);

struct Histogram {
  Tensor s_edges;  // const [R, S+1], normalized distances in [0,1]
  Tensor weights;  // [R, S]
  Tensor t_mid;    // const [R, S], metric midpoints
};

struct CompositeOut {
  Tensor rgb;      // [R,3]
  Tensor depth;    // [R]
  Tensor weights;  // [R,S]
  Tensor acc;      // [R]
};

// Volume compositing: w_j = T_j (1 - exp(-sigma_j delta_j)); residual
// transmittance goes to the background color and t_far.
CompositeOut composite(const Tensor& sigma, const Tensor& rgb, const Tensor& t_edges,
                       const Tensor& bg, double t_far);

struct RenderOptions {
  int n_prop1 = 48;
  int n_prop2 = 48;
  int n_final = 32;
  bool use_proposals = true;  // false: one uniform stage straight into the main field
  bool jitter = false;        // stratified jitter of sample positions
  uint64_t jitter_seed = 0;
};

struct RenderOut {
  Tensor rgb;    // [R,3]
  Tensor depth;  // [R]
  Tensor acc;    // [R]
  Histogram final_h;
  std::vector<Histogram> prop_h;
};

// Batched two-stage proposal rendering. Sample positions are treated as
// constants (resampling reads detached weights), so gradients flow through
// densities and colors at fixed positions; proposal fields learn from the
// interlevel loss only.
RenderOut render_rays(const Field& f, const Tensor& origins, const Tensor& dirs,
                      const RenderOptions& opt);

// Mean of squared hash-table entries across every level of every field.
Tensor hash_decay(const Field& f);

inline constexpr uint32_t kFieldBlobKind = 1;

}  // namespace maldnerf::field
