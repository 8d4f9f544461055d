#include "maldnerf/pipe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "maldnerf/prior/prior.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/io.hpp"
#include "maldnerf/util/rng.hpp"

namespace maldnerf::pipe {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// configuration schema

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct Key {
  const char* name;
  const char* doc;
  bool may_be_empty = false;  // string keys only
  std::function<std::string(const PipelineConfig&)> print;
  std::function<void(PipelineConfig&, const std::string& raw)> parse;
};

[[noreturn]] void bad_value(const char* key, const char* want, const std::string& raw) {
  raise("config", std::string("key '") + key + "' expects " + want + ", got '" + raw + "'");
}

template <class T>
Key make_key(const char* name, const char* doc, T& (*acc)(PipelineConfig&),
             bool may_be_empty = false) {
  Key k;
  k.name = name;
  k.doc = doc;
  k.may_be_empty = may_be_empty;
  k.print = [acc](const PipelineConfig& c) -> std::string {
    const T& v = acc(const_cast<PipelineConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, std::string>) return v;
    else if constexpr (std::is_same_v<T, double>) return nlohmann::json(v).dump();
    else return std::to_string(v);
  };
  k.parse = [acc](PipelineConfig& c, const std::string& raw) {
    T& v = acc(c);
    try {
      size_t used = 0;
      if constexpr (std::is_same_v<T, bool>) {
        if (raw == "true" || raw == "1" || raw == "on") v = true;
        else if (raw == "false" || raw == "0" || raw == "off") v = false;
        else throw std::invalid_argument("bool");
      } else if constexpr (std::is_same_v<T, std::string>) {
        v = raw;
      } else if constexpr (std::is_same_v<T, double>) {
        v = std::stod(raw, &used);
        if (used != raw.size()) throw std::invalid_argument("num");
      } else if constexpr (std::is_same_v<T, uint64_t>) {
        v = std::stoull(raw, &used);
        if (used != raw.size()) throw std::invalid_argument("u64");
      } else {
        long long x = std::stoll(raw, &used);
        if (used != raw.size() || x < INT32_MIN || x > INT32_MAX)
          throw std::invalid_argument("int");
        v = (T)x;
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("value");
    }
  };
  return k;
}

#define PIPE_ACC(T, expr) \
  +[](PipelineConfig& c) -> T& { return expr; }

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      make_key<uint64_t>("scene.seed", "scene generator seed",
                         PIPE_ACC(uint64_t, c.scene.seed)),
      make_key<int>("scene.train_views", "posed views with the objects present",
                    PIPE_ACC(int, c.scene.train_views)),
      make_key<int>("scene.test_views", "held-out views with the objects removed",
                    PIPE_ACC(int, c.scene.test_views)),
      make_key<int>("scene.res", "square view resolution", PIPE_ACC(int, c.scene.res)),
      make_key<int>("scene.objects", "removable primitives per scene",
                    PIPE_ACC(int, c.scene.objects)),
      make_key<double>("scene.dilate_frac", "mask dilation radius as a fraction of max(H, W)",
                       PIPE_ACC(double, c.scene.dilate_frac)),
      make_key<double>("scene.orbit_radius", "camera orbit radius",
                       PIPE_ACC(double, c.scene.orbit_radius)),
      make_key<int>("scene.long_edge", "import-time downscale target",
                    PIPE_ACC(int, c.scene.long_edge)),
      make_key<uint64_t>("prior.seed", "base prior initialization seed",
                         PIPE_ACC(uint64_t, c.prior_seed)),
      make_key<int>("prior.ae_steps", "autoencoder training steps",
                    PIPE_ACC(int, c.prior_ae_steps)),
      make_key<int>("prior.ddpm_steps", "denoiser training steps",
                    PIPE_ACC(int, c.prior_ddpm_steps)),
      make_key<double>("prior.lr", "prior training learning rate (exponentially decayed)",
                       PIPE_ACC(double, c.prior_lr)),
      make_key<bool>("custom.enable", "per-scene low-rank customization stage",
                     PIPE_ACC(bool, c.customize)),
      make_key<int>("custom.rank", "adapter rank", PIPE_ACC(int, c.custom_rank)),
      make_key<int>("custom.steps", "customization training steps",
                    PIPE_ACC(int, c.custom_steps)),
      make_key<uint64_t>("custom.seed", "customization seed",
                         PIPE_ACC(uint64_t, c.custom_seed)),
      make_key<uint64_t>("eval.extractor_seed",
                         "frozen metric extractor seed (recorded in reports)",
                         PIPE_ACC(uint64_t, c.extractor_seed)),
      make_key<int>("eval.crop_size", "corner-crop edge for C-FID/C-KID",
                    PIPE_ACC(int, c.crop_size)),
      make_key<std::string>("run.out", "run output directory",
                            PIPE_ACC(std::string, c.out)),
      make_key<std::string>("run.cache",
                            "artifact cache root; empty = $MALDNERF_CACHE or <out>/cache",
                            PIPE_ACC(std::string, c.cache), true),
  };
  return keys;
}

}  // namespace

void PipelineConfig::validate() const {
  auto need = [](bool cond, const std::string& what) { require(cond, "config", what); };
  need(prior_ae_steps >= 0, "prior.ae_steps must be >= 0");
  need(prior_ddpm_steps >= 0, "prior.ddpm_steps must be >= 0");
  need(prior_lr > 0, "prior.lr must be > 0");
  need(custom_rank >= 0, "custom.rank must be >= 0");
  need(custom_steps >= 1, "custom.steps must be >= 1");
  need(crop_size >= 8 && crop_size % 8 == 0,
       "eval.crop_size must be a positive multiple of 8");
  need(crop_size <= scene.res, "eval.crop_size must fit inside a view");
  need(!out.empty(), "run.out must be non-empty");
  train.validate();
}

PipelineConfig parse_pipeline_config(const std::string& text) {
  PipelineConfig cfg;
  std::string train_text;  // same line numbering as the pipeline file
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (size_t h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) {
      train_text += "\n";
      continue;
    }
    size_t eq = line.find('=');
    require(eq != std::string::npos, "config",
            "line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.rfind("train.", 0) == 0) {
      train_text += key.substr(6) + " = " + val + "\n";
      continue;
    }
    train_text += "\n";
    const Key* found = nullptr;
    for (const auto& k : schema())
      if (key == k.name) {
        found = &k;
        break;
      }
    require(found != nullptr, "config",
            "unknown config key '" + key + "' (see --print-config for the schema)");
    require(found->may_be_empty || !val.empty(), "config",
            "key '" + key + "' expects a non-empty value");
    try {
      found->parse(cfg, val);
    } catch (const std::invalid_argument&) {
      bad_value(found->name, "a parseable value", val);
    }
  }
  cfg.train = trainer::parse_config(train_text);
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  return parse_pipeline_config(read_file(path));
}

std::string print_pipeline_config(const PipelineConfig& cfg) {
  std::string out =
      "# maldnerf pipeline configuration (key = value, '#' starts a comment)\n"
      "# sections: scene.* prior.* custom.* train.* eval.* run.*\n";
  for (const auto& k : schema()) {
    std::string line = std::string(k.name) + " = " + k.print(cfg);
    if (line.size() < 36) line.resize(36, ' ');
    out += line + " # " + k.doc + "\n";
  }
  for (const std::string& tline : [&] {
         std::vector<std::string> lines;
         std::string t = trainer::print_config(cfg.train);
         size_t p = 0;
         while (p < t.size()) {
           size_t e = t.find('\n', p);
           if (e == std::string::npos) e = t.size();
           lines.push_back(t.substr(p, e - p));
           p = e + 1;
         }
         return lines;
       }()) {
    if (tline.empty() || tline[0] == '#') continue;
    out += "train." + tline + "\n";
  }
  return out;
}

std::string cache_root(const PipelineConfig& cfg) {
  if (const char* env = std::getenv("MALDNERF_CACHE"); env && *env) return env;
  if (!cfg.cache.empty()) return cfg.cache;
  return cfg.out + "/cache";
}

// ---------------------------------------------------------------------------
// manifests

const StageRecord& RunManifest::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return s;
  raise("pipeline", "manifest has no stage named '" + name + "'");
}

ordered_json RunManifest::to_json() const {
  ordered_json j;
  j["code_version"] = code_version;
  j["blob_version"] = blob_version;
  j["config"] = config_text;
  j["stages"] = ordered_json::array();
  for (const auto& s : stages) {
    ordered_json e;
    e["name"] = s.name;
    e["key"] = s.key;
    e["config"] = s.config;
    e["dir"] = s.dir;
    e["inputs"] = s.inputs;
    e["outputs"] = s.outputs;
    e["wall_ms"] = s.wall_ms;
    e["cached"] = s.cached;
    j["stages"].push_back(e);
  }
  return j;
}

RunManifest RunManifest::from_json(const ordered_json& j) {
  RunManifest m;
  try {
    m.code_version = j.at("code_version").get<std::string>();
    m.blob_version = j.at("blob_version").get<uint32_t>();
    m.config_text = j.at("config").get<std::string>();
    for (const auto& e : j.at("stages")) {
      StageRecord s;
      s.name = e.at("name").get<std::string>();
      s.key = e.at("key").get<std::string>();
      s.config = e.at("config").get<std::string>();
      s.dir = e.at("dir").get<std::string>();
      s.inputs = e.at("inputs");
      s.outputs = e.at("outputs");
      s.wall_ms = e.at("wall_ms").get<double>();
      s.cached = e.at("cached").get<bool>();
      m.stages.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    raise("pipeline", std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// stage runner

namespace {

// relpath → sha256 for every regular file under dir, minus the stamp itself
ordered_json digest_dir(const std::string& dir) {
  std::vector<std::string> rels;
  for (const auto& ent : fs::recursive_directory_iterator(dir))
    if (ent.is_regular_file()) {
      std::string rel = fs::relative(ent.path(), dir).generic_string();
      if (rel != "stamp.json") rels.push_back(rel);
    }
  std::sort(rels.begin(), rels.end());
  ordered_json out = ordered_json::object();
  for (const auto& rel : rels) out[rel] = sha256_file(dir + "/" + rel);
  return out;
}

std::string aggregate_digest(const ordered_json& outputs) {
  return sha256_hex(outputs.dump());
}

struct Runner {
  std::string cache;
  RunManifest manifest;
  bool upstream_ran = false;

  // Ensures the stage's artifacts exist, either by validating the stamp or
  // by (re)executing `produce` into a fresh dir, and records the outcome.
  StageRecord run(const std::string& name, const std::string& config_slice,
                  const ordered_json& inputs,
                  const std::function<void(const std::string& dir)>& produce) {
    std::string key =
        sha256_hex(std::string(kCodeVersion) + "\n" + name + "\n" + config_slice + "\n" +
                   inputs.dump());
    std::string dir = cache + "/" + name + "/" + key.substr(0, 16);
    StageRecord rec;
    rec.name = name;
    rec.key = key;
    rec.config = config_slice;
    rec.dir = dir;
    rec.inputs = inputs;

    if (!upstream_ran && stamp_valid(dir, key, &rec)) {
      rec.cached = true;
      manifest.stages.push_back(rec);
      return rec;
    }

    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    auto t0 = std::chrono::steady_clock::now();
    try {
      produce(dir);
    } catch (const Error& e) {
      throw Error(e.kind(), "stage '" + name + "' failed: " + e.what());
    } catch (const std::exception& e) {
      throw Error("stage-failure", "stage '" + name + "' failed: " + e.what());
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    rec.outputs = digest_dir(dir);
    rec.cached = false;
    ordered_json stamp;
    stamp["name"] = name;
    stamp["key"] = key;
    stamp["config"] = config_slice;
    stamp["inputs"] = inputs;
    stamp["outputs"] = rec.outputs;
    stamp["wall_ms"] = rec.wall_ms;
    write_file(dir + "/stamp.json", stamp.dump(2) + "\n");
    upstream_ran = true;
    manifest.stages.push_back(rec);
    return rec;
  }

  static bool stamp_valid(const std::string& dir, const std::string& key, StageRecord* rec) {
    if (!file_exists(dir + "/stamp.json")) return false;
    ordered_json stamp;
    try {
      stamp = ordered_json::parse(read_file(dir + "/stamp.json"));
      if (stamp.at("key").get<std::string>() != key) return false;
      for (const auto& [rel, dig] : stamp.at("outputs").items()) {
        std::string path = dir + "/" + rel;
        if (!file_exists(path) || sha256_file(path) != dig.get<std::string>()) return false;
      }
      rec->outputs = stamp.at("outputs");
      rec->wall_ms = stamp.at("wall_ms").get<double>();
    } catch (const std::exception&) {
      return false;
    }
    return true;
  }
};

std::string scene_slice(const scene::SceneSpec& s) {
  ordered_json j;
  j["seed"] = s.seed;
  j["train_views"] = s.train_views;
  j["test_views"] = s.test_views;
  j["res"] = s.res;
  j["objects"] = s.objects;
  j["dilate_frac"] = s.dilate_frac;
  j["orbit_radius"] = s.orbit_radius;
  j["long_edge"] = s.long_edge;
  return j.dump();
}

// AE on the clean regions of the train views, then the denoiser under the
// base token — the recipe proven on held-out textures in the prior tests.
void train_base_prior(const PipelineConfig& cfg, const scene::SceneDataset& ds,
                      const std::string& out_path) {
  prior::Prior p = prior::Prior::init(cfg.prior_seed);
  std::vector<int> ids = ds.train_ids();
  require(!ids.empty(), "prior", "base prior training needs train views");
  Rng pick(Rng::mix({cfg.prior_seed, 0x9a5e}));

  ad::AdamConfig ac;
  ac.lr = cfg.prior_lr;
  ad::Adam ae_opt(p.base_params(), ac);
  for (int k = 1; k <= cfg.prior_ae_steps; ++k) {
    const auto& im = ds.by_id(ids[(size_t)pick.uniform_int((int)ids.size())]);
    prior::ae_train_step(p, im.pixels, im.mask, ae_opt,
                         cfg.prior_lr * std::pow(0.1, (double)k / cfg.prior_ae_steps));
  }

  ad::AdamConfig dc;
  dc.lr = cfg.prior_lr;
  dc.clip_norm = 1.0;
  ad::Adam dn_opt(p.base_params(), dc);
  for (int k = 1; k <= cfg.prior_ddpm_steps; ++k) {
    const auto& im = ds.by_id(ids[(size_t)pick.uniform_int((int)ids.size())]);
    Mask rects = prior::random_rect_mask(im.pixels.h, im.pixels.w, pick);
    prior::ddpm_train_step(p, im.pixels, rects, im.mask, "base", pick, dn_opt,
                           cfg.prior_lr * std::pow(0.1, (double)k / cfg.prior_ddpm_steps));
  }
  prior::save_prior(p, out_path);
}

}  // namespace

// ---------------------------------------------------------------------------
// the pipeline

RunManifest run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  const bool diffusion = cfg.train.prior_kind == "diffusion";
  const bool customized = diffusion && cfg.customize && cfg.custom_rank > 0;

  Runner r;
  r.cache = cache_root(cfg);
  r.manifest.code_version = kCodeVersion;
  r.manifest.blob_version = kBlobVersion;
  r.manifest.config_text = print_pipeline_config(cfg);

  StageRecord synth =
      r.run("synth", scene_slice(cfg.scene), ordered_json::object(), [&](const std::string& d) {
        scene::SceneDataset ds = scene::synthesize_scene(cfg.scene);
        scene::save_dataset(ds, d + "/dataset");
      });
  std::string dataset_dir = synth.dir + "/dataset";
  ordered_json ds_input;
  ds_input["dataset"] = aggregate_digest(synth.outputs);

  std::string prior_path;
  if (diffusion) {
    ordered_json slice;
    slice["seed"] = cfg.prior_seed;
    slice["ae_steps"] = cfg.prior_ae_steps;
    slice["ddpm_steps"] = cfg.prior_ddpm_steps;
    slice["lr"] = cfg.prior_lr;
    StageRecord tp =
        r.run("train-prior", slice.dump(), ds_input, [&](const std::string& d) {
          scene::SceneDataset ds = scene::load_dataset(dataset_dir);
          train_base_prior(cfg, ds, d + "/prior.mnrf");
        });
    prior_path = tp.dir + "/prior.mnrf";

    if (customized) {
      ordered_json cslice;
      cslice["rank"] = cfg.custom_rank;
      cslice["steps"] = cfg.custom_steps;
      cslice["seed"] = cfg.custom_seed;
      ordered_json cin = ds_input;
      cin["prior"] = aggregate_digest(tp.outputs);
      std::string base_path = prior_path;
      StageRecord cu =
          r.run("customize", cslice.dump(), cin, [&](const std::string& d) {
            scene::SceneDataset ds = scene::load_dataset(dataset_dir);
            prior::Prior p = prior::load_prior(base_path);
            prior::Prior q =
                prior::customize(p, ds, cfg.custom_rank, cfg.custom_steps, cfg.custom_seed);
            prior::save_prior(q, d + "/prior.mnrf");
          });
      prior_path = cu.dir + "/prior.mnrf";
    }
  }

  ordered_json tin = ds_input;
  if (diffusion) tin["prior"] = sha256_file(prior_path);
  StageRecord tr =
      r.run("train", trainer::print_config(cfg.train), tin, [&](const std::string& d) {
        scene::SceneDataset ds = scene::load_dataset(dataset_dir);
        prior::Prior p;
        if (diffusion) p = prior::load_prior(prior_path);
        trainer::InpaintBackend backend =
            trainer::make_backend(cfg.train, diffusion ? &p : nullptr);
        trainer::train(cfg.train, ds, backend, d + "/work");
      });
  std::string final_ckpt = tr.dir + "/work/checkpoints/final";
  std::string checkpoint_id = fs::path(tr.dir).filename().string();

  ordered_json ein;
  ein["checkpoint"] = aggregate_digest(tr.outputs);
  ordered_json eslice;
  eslice["extractor_seed"] = cfg.extractor_seed;
  eslice["crop_size"] = cfg.crop_size;
  StageRecord ev = r.run("evaluate", eslice.dump(), ein, [&](const std::string& d) {
    trainer::TrainState st = trainer::load_checkpoint(final_ckpt, cfg.train);
    field::RenderOptions ro;
    ro.n_prop1 = cfg.train.samples_prop1;
    ro.n_prop2 = cfg.train.samples_prop2;
    ro.n_final = cfg.train.samples_final;
    ro.use_proposals = true;
    ro.jitter = false;
    std::vector<ImageF> renders;
    fs::create_directories(d + "/renders");
    for (int id : st.dataset.test_ids()) {
      const auto& im = st.dataset.by_id(id);
      renders.push_back(trainer::render_view(st.field, im.camera, ro));
      write_png_rgb8(d + "/renders/" + std::to_string(id) + ".png", renders.back());
    }
    eval::EvaluateOptions eo;
    eo.crop_size = cfg.crop_size;
    eval::MetricReport rep =
        eval::evaluate(renders, st.dataset, cfg.extractor_seed, checkpoint_id, eo);
    write_file(d + "/report.json", rep.to_json().dump(2) + "\n");
  });

  fs::create_directories(cfg.out);
  write_file(cfg.out + "/report.json", read_file(ev.dir + "/report.json"));
  write_file(cfg.out + "/manifest.json", r.manifest.to_json().dump(2) + "\n");
  return std::move(r.manifest);
}

// ---------------------------------------------------------------------------
// ablations

const std::vector<std::string>& ablation_toggles() {
  static const std::vector<std::string> names = {
      "adv_masking",           "feature_matching",
      "customization",         "add_pixel_loss_in_mask",
      "add_perceptual_loss_in_mask", "oracle_vs_diffusion",
  };
  return names;
}

PipelineConfig apply_toggles(const PipelineConfig& base, const std::vector<std::string>& on) {
  PipelineConfig cfg = base;
  for (const auto& t : on) {
    if (t == "adv_masking") {
      cfg.train.adv_masking = !cfg.train.adv_masking;
    } else if (t == "feature_matching") {
      cfg.train.lambda_fm = cfg.train.lambda_fm != 0.0 ? 0.0 : 1.0;
    } else if (t == "customization") {
      cfg.customize = !cfg.customize;
    } else if (t == "add_pixel_loss_in_mask") {
      cfg.train.add_pixel_loss_in_mask = !cfg.train.add_pixel_loss_in_mask;
    } else if (t == "add_perceptual_loss_in_mask") {
      cfg.train.add_perceptual_loss_in_mask = !cfg.train.add_perceptual_loss_in_mask;
    } else if (t == "oracle_vs_diffusion") {
      cfg.train.prior_kind = cfg.train.prior_kind == "oracle" ? "diffusion" : "oracle";
    } else {
      std::string valid;
      for (const auto& v : ablation_toggles()) valid += (valid.empty() ? "" : ", ") + v;
      raise("config", "unknown ablation toggle '" + t + "'; valid toggles: " + valid);
    }
  }
  return cfg;
}

namespace {

std::string metric_row(const std::string& label, const eval::MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "| %s | %.4f | %.6f | %.6f | %.6f | %.6f | %.6f | %.6f | %.6f | %.6f |\n",
                label.c_str(), r.psnr_masked, r.pproxy, r.m_pproxy, r.fid_proxy, r.kid_proxy,
                r.cfid_proxy, r.ckid_proxy, r.fvd_proxy, r.flow_consistency);
  return buf;
}

const char* kMetricHeader =
    "| run | psnr_masked | pproxy | m_pproxy | fid | kid | cfid | ckid | fvd | flow |\n"
    "|---|---|---|---|---|---|---|---|---|---|\n";

}  // namespace

std::vector<AblationRun> ablate(const PipelineConfig& base,
                                const std::vector<std::string>& toggles) {
  for (size_t i = 0; i < toggles.size(); ++i) {
    apply_toggles(base, {toggles[i]});  // name check
    for (size_t j = i + 1; j < toggles.size(); ++j)
      require(toggles[i] != toggles[j], "config",
              "duplicate ablation toggle '" + toggles[i] + "'");
  }
  require(toggles.size() <= 6, "config", "at most 6 ablation toggles");

  PipelineConfig shared = base;
  shared.cache = cache_root(base);  // combos reuse synth/prior artifacts

  std::vector<AblationRun> runs;
  for (uint32_t bits = 0; bits < (1u << toggles.size()); ++bits) {
    AblationRun run;
    for (size_t i = 0; i < toggles.size(); ++i)
      if (bits & (1u << i)) run.toggles.push_back(toggles[i]);
    run.label = run.toggles.empty() ? "full" : "";
    for (size_t i = 0; i < run.toggles.size(); ++i)
      run.label += (i ? "+" : "") + run.toggles[i];

    PipelineConfig cfg = apply_toggles(shared, run.toggles);
    cfg.out = base.out + "/" + run.label;
    run.manifest = run_pipeline(cfg);
    run.report = eval::MetricReport::from_json(
        ordered_json::parse(read_file(cfg.out + "/report.json")));
    runs.push_back(std::move(run));
  }

  std::string md = "# ablation grid\n\nbase run: `full`; each toggle flips one aspect of the "
                   "base configuration.\n\n";
  md += kMetricHeader;
  for (const auto& run : runs) md += metric_row(run.label, run.report);
  fs::create_directories(base.out);
  write_file(base.out + "/ablation.md", md);
  return runs;
}

// ---------------------------------------------------------------------------
// reporting

namespace {

struct Series {
  std::string label;
  std::vector<double> k, v;
};

// minimal polyline plot; axes annotated with the data ranges
std::string render_svg(const std::string& title, const std::vector<Series>& series) {
  const int W = 640, H = 360, L = 60, B = 40, T = 28, R = 16;
  double kmin = 0, kmax = 1, vmin = 0, vmax = 1;
  bool first = true;
  for (const auto& s : series)
    for (size_t i = 0; i < s.k.size(); ++i) {
      if (first) {
        kmin = kmax = s.k[i];
        vmin = vmax = s.v[i];
        first = false;
      }
      kmin = std::min(kmin, s.k[i]);
      kmax = std::max(kmax, s.k[i]);
      vmin = std::min(vmin, s.v[i]);
      vmax = std::max(vmax, s.v[i]);
    }
  if (kmax <= kmin) kmax = kmin + 1;
  if (vmax <= vmin) vmax = vmin + 1;
  auto px = [&](double k) { return L + (k - kmin) / (kmax - kmin) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - vmin) / (vmax - vmin) * (H - B - T); };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  char buf[256];
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
                    "\" height=\"" + std::to_string(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"18\" font-family=\"monospace\" font-size=\"13\">%s</text>\n",
                L, title.c_str());
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", L, H - B,
                W - R, H - B);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", L, T, L,
                H - B);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">k=%g</text>\n",
                L, H - B + 16, kmin);
  svg += buf;
  std::snprintf(
      buf, sizeof(buf),
      "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">"
      "%g</text>\n",
      W - R, H - B + 16, kmax);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"4\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">%.4g</text>\n",
                T + 8, vmax);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"4\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">%.4g</text>\n",
                H - B, vmin);
  svg += buf;

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = palette[si % (sizeof(palette) / sizeof(palette[0]))];
    std::string pts;
    for (size_t i = 0; i < s.k.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", px(s.k[i]), py(s.v[i]));
      pts += buf;
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" points=\"" + pts +
           "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\" "
                  "fill=\"%s\">%s</text>\n",
                  L + 8, T + 14 + (int)si * 14, color, s.label.c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace

void write_report(const std::vector<std::string>& run_dirs, const std::string& out_md) {
  require(!run_dirs.empty(), "report", "no run directories given");
  std::vector<std::string> dirs = run_dirs;
  std::sort(dirs.begin(), dirs.end());

  std::string md = "# maldnerf run comparison\n\n";
  md += "Scores from fixed-seed proxy extractors; comparable across runs of this artifact, "
        "not to published backbone metrics. The flow metric is advisory (favors blur).\n\n";
  md += kMetricHeader;
  std::vector<Series> loss;
  for (const auto& dir : dirs) {
    require(file_exists(dir + "/manifest.json"), "report",
            "'" + dir + "' has no manifest.json");
    RunManifest man =
        RunManifest::from_json(ordered_json::parse(read_file(dir + "/manifest.json")));
    eval::MetricReport rep = eval::MetricReport::from_json(
        ordered_json::parse(read_file(dir + "/report.json")));
    std::string label = fs::path(dir).filename().string();
    md += metric_row(label, rep);

    std::string mpath = man.stage("train").dir + "/work/metrics.jsonl";
    if (file_exists(mpath)) {
      Series s;
      s.label = label;
      std::string text = read_file(mpath);
      size_t pos = 0;
      while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (trim(line).empty()) continue;
        ordered_json rec = ordered_json::parse(line);
        s.k.push_back(rec.at("k").get<double>());
        s.v.push_back(rec.at("l_recon").get<double>());
      }
      loss.push_back(std::move(s));
    }
  }

  std::string stem = out_md;
  if (size_t dot = stem.rfind('.'); dot != std::string::npos && stem.find('/', dot) == std::string::npos)
    stem.resize(dot);
  std::string svg_path = stem + "_loss.svg";
  md += "\n![reconstruction loss](" + fs::path(svg_path).filename().string() + ")\n";
  if (fs::path(out_md).has_parent_path()) fs::create_directories(fs::path(out_md).parent_path());
  write_file(out_md, md);
  write_file(svg_path, render_svg("reconstruction loss vs iteration", loss));
}

}  // namespace maldnerf::pipe
