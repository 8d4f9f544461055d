#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "maldnerf/eval/metrics.hpp"
#include "maldnerf/scene/scene.hpp"
#include "maldnerf/train/trainer.hpp"

namespace maldnerf::pipe {

// Participates in every stage key; bump when a stage's algorithm changes in a
// way that should invalidate cached artifacts.
inline constexpr const char* kCodeVersion = "maldnerf-0.1.0";

// ---------------------------------------------------------------------------
// configuration

struct PipelineConfig {
  scene::SceneSpec scene;

  // base prior training (diffusion backend only)
  uint64_t prior_seed = 3;
  int prior_ae_steps = 2500;
  int prior_ddpm_steps = 800;
  double prior_lr = 2e-3;

  // per-scene customization
  bool customize = true;
  int custom_rank = 4;
  int custom_steps = 400;
  uint64_t custom_seed = 5;

  trainer::TrainConfig train;

  // evaluation protocol
  uint64_t extractor_seed = 1234;
  int crop_size = 16;

  // layout: per-run outputs under `out`; shared artifact cache under `cache`
  // (empty: $MALDNERF_CACHE if set, else <out>/cache)
  std::string out = "runs/scene";
  std::string cache;

  void validate() const;
  bool operator==(const PipelineConfig&) const = default;
};

// Flat key=value schema with dotted prefixes (scene., prior., custom.,
// train., eval., run.); train.* keys are routed through the training-config
// schema. parse accepts the output of print (round-trip identity).
PipelineConfig parse_pipeline_config(const std::string& text);
PipelineConfig load_pipeline_config(const std::string& path);
std::string print_pipeline_config(const PipelineConfig& cfg);

// $MALDNERF_CACHE > cfg.cache > <cfg.out>/cache.
std::string cache_root(const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// runs

struct StageRecord {
  std::string name;
  std::string key;     // sha256 over code version, stage config slice, inputs
  std::string config;  // the stage's config slice (includes its seeds)
  std::string dir;     // cache directory holding the stage artifacts
  nlohmann::ordered_json inputs;   // input label → digest
  nlohmann::ordered_json outputs;  // artifact relpath → digest
  double wall_ms = 0;              // of the producing execution
  bool cached = false;             // this run reused the artifacts
};

struct RunManifest {
  std::string code_version;
  uint32_t blob_version = 0;
  std::string config_text;  // full config snapshot (print_pipeline_config)
  std::vector<StageRecord> stages;

  const StageRecord& stage(const std::string& name) const;  // error if absent
  nlohmann::ordered_json to_json() const;
  static RunManifest from_json(const nlohmann::ordered_json& j);
};

// Executes synth → [train-prior → customize] → train → evaluate with
// content-addressed caching: a stage is skipped iff its key and recorded
// artifacts are intact on disk and nothing upstream re-ran. Writes
// <out>/manifest.json and <out>/report.json. Any stage failure is rethrown
// with the stage name prefixed (original error kind preserved).
RunManifest run_pipeline(const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// ablations

// {adv_masking, feature_matching, customization, add_pixel_loss_in_mask,
//  add_perceptual_loss_in_mask, oracle_vs_diffusion}
const std::vector<std::string>& ablation_toggles();

// Flips each named aspect relative to `base`. Unknown names are config
// errors listing the valid set.
PipelineConfig apply_toggles(const PipelineConfig& base, const std::vector<std::string>& on);

struct AblationRun {
  std::string label;  // "full" or "+"-joined toggle names
  std::vector<std::string> toggles;
  RunManifest manifest;
  eval::MetricReport report;
};

// Runs every subset of `toggles` (2^n runs) under <out>/<label> with a shared
// artifact cache and writes the comparison table to <out>/ablation.md.
std::vector<AblationRun> ablate(const PipelineConfig& base,
                                const std::vector<std::string>& toggles);

// ---------------------------------------------------------------------------
// reporting

// Comparison tables + score-vs-iteration SVG plots over finished run dirs
// (each holding manifest.json and report.json). Writes `out_md` and a
// sibling <stem>_loss.svg.
void write_report(const std::vector<std::string>& run_dirs, const std::string& out_md);

}  // namespace maldnerf::pipe
