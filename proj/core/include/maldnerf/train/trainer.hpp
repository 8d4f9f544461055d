#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maldnerf/ad/adam.hpp"
#include "maldnerf/adv/adversarial.hpp"
#include "maldnerf/field/field.hpp"
#include "maldnerf/prior/prior.hpp"
#include "maldnerf/scene/scene.hpp"

namespace maldnerf::trainer {

// Every knob of the training stage. Defaults marked `paper` in the config
// schema come from the published recipe; `desk` defaults are this artifact's
// CPU-scale choices. The flat key=value config file sets any field by name.
struct TrainConfig {
  // iteration structure
  int64_t K = 30000;   // total three-step iterations
  int64_t U = 80;      // dataset-update period
  int idu_batch = 8;   // images refreshed per update round

  // loss weights
  double lambda_pix = 1.0;
  double lambda_inter = 3.0;
  double lambda_distort = 0.002;
  double lambda_decay = 0.1;
  double lambda_adv = 1.0;
  double lambda_fm = 1.0;
  double lambda_gp = 15.0;
  double lambda_depth = 0.1;
  double lambda_perc = 1.0;  // only with add_perceptual_loss_in_mask

  // partial-DDIM noise schedule
  int t_max = 980;
  int t_min = 20;
  int n_ddim_steps = 20;

  // depth supervision
  int64_t depth_gate = 2000;  // iterations before the depth term turns on
  double depth_sigma = 0.02;  // oracle noise on the depth prior
  int depth_pairs = 32;       // ranking pairs sampled per patch
  int depth_window = 8;       // pair window (pixels)
  double depth_margin = 1e-4;

  // batches and sampling
  int ray_batch = 1024;     // reconstruction rays per step
  int disc_batch = 4;       // adversarial patches per step
  int patch_size = 16;
  int candidate_size = 16;  // importance-sampling window (= patch: one tile)
  int samples_prop1 = 48;
  int samples_prop2 = 48;
  int samples_final = 32;
  bool jitter = true;

  // discriminator architecture
  int r_blocks = 4;
  int base_channels = 32;
  int max_channels = 256;

  // optimizers
  double field_lr_init = 0.01;
  double field_lr_final = 0.0001;
  double disc_lr = 0.0001;
  double clip_norm = 10.0;

  // prior backend
  std::string prior_kind = "diffusion";  // diffusion | oracle
  std::string prior_token = "auto";      // auto: the customized token if present
  double oracle_sigma_incon = 0.05;
  bool oracle_texture_shift = true;

  // ablation toggles
  bool adv_masking = true;
  bool add_pixel_loss_in_mask = false;
  bool add_perceptual_loss_in_mask = false;
  std::string adv_real = "inpaint";  // inpaint | unmasked_gt
  uint64_t perc_seed = 4242;         // training-time perceptual extractor

  // artifact cadence (0 disables; a final checkpoint is always written)
  int64_t checkpoint_every = 1000;
  int64_t snapshot_every = 500;
  int snapshot_view = -1;  // -1: first test view

  uint64_t seed = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Flat key=value schema. parse accepts the output of print (round-trip
// identity); '#' starts a comment, blank lines are ignored, unknown keys and
// malformed values are config errors.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
std::string print_config(const TrainConfig& cfg);  // annotated paper|desk

// t = t_max − (t_max − t_min)·√(k/K), rounded, clamped to [t_min, t_max].
int hifa_timestep(int64_t k, int64_t K, int t_max, int t_min);

// Exponential decay from field_lr_init at k=0 to field_lr_final at k=K−1.
double field_lr(const TrainConfig& cfg, int64_t k);

// The IDU inpainting source: either a diffusion prior (with a conditioning
// token) or the ground-truth oracle with planted inconsistency.
struct InpaintBackend {
  const prior::Prior* prior = nullptr;
  std::string token = "base";
  bool oracle = false;
  double sigma_incon = 0.0;
  prior::OracleShift shift;
};

// Resolves prior_kind/prior_token against an optional loaded prior.
InpaintBackend make_backend(const TrainConfig& cfg, const prior::Prior* p);

// Copies share parameter storage (Tensor handles alias); treat TrainState as
// move-only in practice.
struct TrainState {
  int64_t k = 0;  // completed iterations
  field::Field field;
  adv::Discriminator disc;
  ad::Adam field_opt;
  ad::Adam disc_opt;
  scene::SceneDataset dataset;
  // image id → iteration whose update last re-drew its depth prior
  std::map<int, int64_t> depth_prior_iter;
};

TrainState init_state(const TrainConfig& cfg, const scene::SceneDataset& dataset);

// Full-view render of the current field (no autodiff graph).
ImageF render_view(const field::Field& f, const scene::CameraModel& cam,
                   const field::RenderOptions& opt, ImageF* depth_out = nullptr);

// Synthetic stand-in for a monocular depth estimate of image `im`: gt_depth
// under a per-(image, update) affine distortion plus i.i.d. noise.
std::vector<double> estimate_depth_prior(const scene::PosedImage& im, uint64_t seed,
                                         int64_t k_updated, double sigma);

// One dataset-update round at iteration k (distinct ids, partial inpainting
// at the HiFA timestep, depth priors re-drawn for the touched images).
void idu_round(TrainState& st, const TrainConfig& cfg, const InpaintBackend& backend);

// One three-step iteration (IDU fires first when k % U == 0). Returns the
// metric record and advances st.k.
nlohmann::ordered_json train_iteration(TrainState& st, const TrainConfig& cfg,
                                       const InpaintBackend& backend);

// Checkpoint bundle: field/disc/optimizer blobs, dataset snapshot,
// trainstate.json. Loading restores bit-identical forward passes and an
// optimizer trajectory identical to an uninterrupted run.
void save_checkpoint(const TrainState& st, const TrainConfig& cfg, const std::string& dir);
TrainState load_checkpoint(const std::string& dir, const TrainConfig& cfg);

// Runs iterations [st.k, cfg.K): appends to out_dir/metrics.jsonl, writes
// snapshots and periodic checkpoints, ends with checkpoints/final.
void train_loop(TrainState& st, const TrainConfig& cfg, const InpaintBackend& backend,
                const std::string& out_dir);

// init_state + train_loop over a fresh copy of the dataset.
TrainState train(const TrainConfig& cfg, const scene::SceneDataset& dataset,
                 const InpaintBackend& backend, const std::string& out_dir);

inline constexpr uint32_t kOptimBlobKind = 4;

}  // namespace maldnerf::trainer
