#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "maldnerf/eval/extractor.hpp"
#include "maldnerf/scene/scene.hpp"
#include "maldnerf/util/image.hpp"

namespace maldnerf::eval {

// ---------------------------------------------------------------------------
// perceptual proxies

// Sum over pyramid stages of the mean squared difference of channel-
// normalized features. Equal dims required; zero iff a == b.
double pproxy(const FeatureExtractor& ex, const ImageF& a, const ImageF& b);

// Masked variant: both inputs are zeroed outside the mask *before*
// extraction (the image is masked, not the features), so the score depends
// only on pixels inside the mask.
double m_pproxy(const FeatureExtractor& ex, const ImageF& a, const ImageF& b, const Mask& mask);

// ---------------------------------------------------------------------------
// distributional proxies (feature-space core + image-set wrappers)

using FeatureRows = std::vector<std::vector<double>>;  // rows = samples

// Fréchet distance between Gaussian fits: ‖μa−μb‖² + tr(Σa+Σb−2(ΣaΣb)^½).
// Covariances are regularized with +1e-6·I (reported through `regularized`).
// Needs ≥ 2 rows per side.
double frechet_distance(const FeatureRows& a, const FeatureRows& b, bool* regularized = nullptr);

// Unbiased polynomial-kernel (k(x,y) = (x·y/d + 1)³) MMD², averaged over
// consecutive equal-size blocks. block_size 0 picks min(|a|, |b|, 16); every
// block needs ≥ 2 samples.
double kid_mmd2(const FeatureRows& a, const FeatureRows& b, int block_size = 0);

FeatureRows embed_images(const FeatureExtractor& ex, const std::vector<ImageF>& images);

double fid_proxy(const FeatureExtractor& ex, const std::vector<ImageF>& a,
                 const std::vector<ImageF>& b, bool* regularized = nullptr);
double kid_proxy(const FeatureExtractor& ex, const std::vector<ImageF>& a,
                 const std::vector<ImageF>& b, int block_size = 0);

// ---------------------------------------------------------------------------
// corner crops

struct CropWindow {
  int y = 0, x = 0;  // top-left, clamped inside the image
  int size = 0;
};

enum class CornerMode {
  quadrant,  // per-quadrant furthest mask pixel from the mask centroid
  bbox,      // corners of the mask bounding box
};

struct CornerCrops {
  std::array<CropWindow, 4> win;  // TL, TR, BL, BR quadrant order
  bool degenerate = false;        // some quadrant fell back to the global extremum
};

// The four mask pixels furthest from the mask centroid, one per quadrant
// (ties broken by (row, col)); windows of crop_size centered there, clamped
// to [0, dim − crop_size]. Empty quadrants duplicate the global extremum and
// set `degenerate`. Mask must be nonempty, crop_size ≤ min(H, W).
CornerCrops corner_crops(const Mask& mask, int crop_size, int img_h, int img_w,
                         CornerMode mode = CornerMode::quadrant);

ImageF crop_image(const ImageF& img, const CropWindow& w);

// ---------------------------------------------------------------------------
// video proxy

// Frozen spatiotemporal extractor: per-frame FeatureExtractor embeddings fed
// through two frozen temporal convolutions (order-sensitive by construction).
struct VideoExtractor {
  uint64_t seed = 0;
  FeatureExtractor frame;
  // temporal conv stacks, [out][in*k] row-major
  std::vector<std::vector<double>> w1, w2;
  std::vector<double> b1, b2;

  static VideoExtractor init(uint64_t seed);
  int dim() const;  // clip embedding dimension
  std::vector<double> embed(const std::vector<const ImageF*>& clip) const;  // exactly 10 frames
};

struct FvdOptions {
  int clip_len = 10;
  int stride = 5;
};

// Closed-form number of clips from an N-frame scene: ⌊(N−len)/stride⌋+1,
// zero when N < len.
int64_t fvd_clip_count(int64_t frames, int stride, int clip_len = 10);

// Fréchet distance between clip-embedding sets. Scenes shorter than clip_len
// are skipped (counted through `skipped_scenes`); both sides must keep ≥ 2
// clips in total.
double fvd_proxy(const VideoExtractor& vx, const std::vector<std::vector<ImageF>>& real,
                 const std::vector<std::vector<ImageF>>& fake, const FvdOptions& opt = {},
                 int* skipped_scenes = nullptr, bool* regularized = nullptr);

// ---------------------------------------------------------------------------
// flow consistency

struct FlowField {
  ImageF uv;   // H x W x 2: (dy, dx) from frame t to frame t+1, pixel units
  Mask covis;  // true where the correspondence is valid (in-bounds, unoccluded)
};

// Exact correspondence between two posed views of the object-free scene, from
// gt_depth and the cameras. occ_tol is the relative depth tolerance of the
// occlusion test.
FlowField exact_flow(const scene::PosedImage& a, const scene::PosedImage& b,
                     double occ_tol = 0.01);

// Mean over consecutive pairs of the masked mean absolute error between
// frame t and the bilinear backward-warp of frame t+1. Pairs with an empty
// mask contribute nothing; no pairs → 0.
double flow_consistency(const std::vector<ImageF>& frames, const std::vector<FlowField>& flows);

// ---------------------------------------------------------------------------
// the full protocol

struct MetricReport {
  double psnr_masked = 0;
  double pproxy = 0;
  double m_pproxy = 0;
  double fid_proxy = 0;
  double kid_proxy = 0;
  double cfid_proxy = 0;  // corner-crop FID
  double ckid_proxy = 0;  // corner-crop KID
  double fvd_proxy = 0;
  double flow_consistency = 0;

  // provenance
  std::string checkpoint_id;
  int64_t dataset_revision = 0;
  uint64_t extractor_seed = 0;

  bool fid_regularized = false;
  bool fvd_skipped = false;          // test split too short for any clip
  bool flow_advisory = true;         // the flow metric favors blur; advisory
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
  static MetricReport from_json(const nlohmann::ordered_json& j);
  bool all_finite() const;
};

struct EvaluateOptions {
  int crop_size = 16;
  CornerMode corner_mode = CornerMode::quadrant;
  FvdOptions fvd;
  double occ_tol = 0.01;
};

// Scores pre-rendered test views (ordered as dataset.test_ids()) against
// gt_removed. Rendering is the caller's side (checkpoint → render_view);
// this keeps the protocol pure and cheap to test.
MetricReport evaluate(const std::vector<ImageF>& renders, const scene::SceneDataset& dataset,
                      uint64_t extractor_seed, const std::string& checkpoint_id,
                      const EvaluateOptions& opt = {});

}  // namespace maldnerf::eval
