#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "maldnerf/train/trainer.hpp"
#include "maldnerf/util/error.hpp"
#include "maldnerf/util/io.hpp"

namespace maldnerf::trainer {

namespace {

using Member = std::variant<int64_t TrainConfig::*, int TrainConfig::*, double TrainConfig::*,
                            bool TrainConfig::*, uint64_t TrainConfig::*,
                            std::string TrainConfig::*>;

struct FieldDesc {
  const char* name;
  Member member;
  const char* origin;  // provenance of the default: "paper" or "desk"
  const char* doc;
};

const std::vector<FieldDesc>& schema() {
  using C = TrainConfig;
  static const std::vector<FieldDesc> fields = {
      {"K", &C::K, "paper", "total three-step training iterations"},
      {"U", &C::U, "paper", "iterations between dataset-update rounds"},
      {"idu_batch", &C::idu_batch, "paper", "images refreshed per dataset update"},
      {"lambda_pix", &C::lambda_pix, "paper", "reconstruction pixel loss weight"},
      {"lambda_inter", &C::lambda_inter, "paper", "interlevel loss weight"},
      {"lambda_distort", &C::lambda_distort, "paper", "distortion loss weight"},
      {"lambda_decay", &C::lambda_decay, "paper", "hash decay weight"},
      {"lambda_adv", &C::lambda_adv, "paper", "adversarial loss weight"},
      {"lambda_fm", &C::lambda_fm, "paper", "feature matching loss weight"},
      {"lambda_gp", &C::lambda_gp, "paper", "R1 gradient penalty weight"},
      {"lambda_depth", &C::lambda_depth, "desk", "depth ranking loss weight"},
      {"lambda_perc", &C::lambda_perc, "desk",
       "perceptual loss weight (add_perceptual_loss_in_mask)"},
      {"t_max", &C::t_max, "paper", "partial-DDIM start timestep at k=0"},
      {"t_min", &C::t_min, "paper", "partial-DDIM start timestep at k=K"},
      {"n_ddim_steps", &C::n_ddim_steps, "desk", "DDIM steps per dataset-update inpaint"},
      {"depth_gate", &C::depth_gate, "paper", "iterations before depth supervision starts"},
      {"depth_sigma", &C::depth_sigma, "desk", "noise of the synthetic depth estimator"},
      {"depth_pairs", &C::depth_pairs, "desk", "ranking pairs sampled per patch"},
      {"depth_window", &C::depth_window, "desk", "pair sampling window (pixels)"},
      {"depth_margin", &C::depth_margin, "desk", "ranking loss margin"},
      {"ray_batch", &C::ray_batch, "desk", "reconstruction rays per step (paper: 16384)"},
      {"disc_batch", &C::disc_batch, "desk", "adversarial patches per step"},
      {"patch_size", &C::patch_size, "desk", "discriminator patch edge (paper: 64)"},
      {"candidate_size", &C::candidate_size, "desk",
       "importance-sampling window edge (paper: 256)"},
      {"samples_prop1", &C::samples_prop1, "desk", "first proposal samples per ray"},
      {"samples_prop2", &C::samples_prop2, "desk", "second proposal samples per ray"},
      {"samples_final", &C::samples_final, "desk", "main field samples per ray"},
      {"jitter", &C::jitter, "desk", "stratified jitter of training ray samples"},
      {"r_blocks", &C::r_blocks, "desk", "discriminator residual blocks"},
      {"base_channels", &C::base_channels, "desk", "discriminator stem width"},
      {"max_channels", &C::max_channels, "desk", "discriminator channel cap"},
      {"field_lr_init", &C::field_lr_init, "paper", "field learning rate at k=0"},
      {"field_lr_final", &C::field_lr_final, "paper", "field learning rate at k=K-1"},
      {"disc_lr", &C::disc_lr, "paper", "discriminator learning rate (constant)"},
      {"clip_norm", &C::clip_norm, "desk", "global gradient-norm clip, 0 disables"},
      {"prior_kind", &C::prior_kind, "desk", "inpainting source: diffusion | oracle"},
      {"prior_token", &C::prior_token, "desk",
       "conditioning token; auto = the customized token if present"},
      {"oracle_sigma_incon", &C::oracle_sigma_incon, "desk",
       "oracle per-view inconsistency amplitude"},
      {"oracle_texture_shift", &C::oracle_texture_shift, "desk",
       "oracle applies the blur+offset texture shift"},
      {"adv_masking", &C::adv_masking, "paper",
       "mask both adversarial sides to the inpainting region"},
      {"add_pixel_loss_in_mask", &C::add_pixel_loss_in_mask, "paper",
       "ablation: pixel loss on inpainting patches"},
      {"add_perceptual_loss_in_mask", &C::add_perceptual_loss_in_mask, "paper",
       "ablation: perceptual loss on inpainting patches"},
      {"adv_real", &C::adv_real, "desk",
       "real patch source: inpaint (dataset) | unmasked_gt (literal-equation variant)"},
      {"perc_seed", &C::perc_seed, "desk", "training-time perceptual extractor seed"},
      {"checkpoint_every", &C::checkpoint_every, "desk", "checkpoint period, 0 = final only"},
      {"snapshot_every", &C::snapshot_every, "desk", "snapshot render period, 0 = off"},
      {"snapshot_view", &C::snapshot_view, "desk", "view id to snapshot, -1 = first test view"},
      {"seed", &C::seed, "desk", "master seed for every training stream"},
  };
  return fields;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string value_to_string(const TrainConfig& cfg, const Member& m) {
  return std::visit(
      [&](auto ptr) -> std::string {
        const auto& v = cfg.*ptr;
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return v;
        else if constexpr (std::is_same_v<T, double>) return nlohmann::json(v).dump();
        else return std::to_string(v);
      },
      m);
}

void assign(TrainConfig& cfg, const FieldDesc& f, const std::string& raw) {
  auto bad = [&](const char* want) {
    raise("config", std::string("key '") + f.name + "' expects " + want + ", got '" + raw + "'");
  };
  std::visit(
      [&](auto ptr) {
        auto& v = cfg.*ptr;
        using T = std::decay_t<decltype(v)>;
        try {
          size_t used = 0;
          if constexpr (std::is_same_v<T, bool>) {
            if (raw == "true" || raw == "1" || raw == "on") v = true;
            else if (raw == "false" || raw == "0" || raw == "off") v = false;
            else bad("true|false");
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (raw.empty()) bad("a non-empty string");
            v = raw;
          } else if constexpr (std::is_same_v<T, double>) {
            v = std::stod(raw, &used);
            if (used != raw.size()) bad("a number");
          } else if constexpr (std::is_same_v<T, uint64_t>) {
            v = std::stoull(raw, &used);
            if (used != raw.size()) bad("an unsigned integer");
          } else {
            long long x = std::stoll(raw, &used);
            if (used != raw.size()) bad("an integer");
            if constexpr (std::is_same_v<T, int>) {
              if (x < INT32_MIN || x > INT32_MAX) bad("a 32-bit integer");
            }
            v = (T)x;
          }
        } catch (const Error&) {
          throw;
        } catch (const std::exception&) {
          bad("a parseable value");
        }
      },
      f.member);
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool cond, const std::string& what) { require(cond, "config", what); };
  need(K >= 1, "K must be >= 1");
  need(U >= 1, "U must be >= 1");
  need(idu_batch >= 1, "idu_batch must be >= 1");
  const struct {
    const char* name;
    double v;
  } ls[] = {{"lambda_pix", lambda_pix},       {"lambda_inter", lambda_inter},
            {"lambda_distort", lambda_distort}, {"lambda_decay", lambda_decay},
            {"lambda_adv", lambda_adv},       {"lambda_fm", lambda_fm},
            {"lambda_gp", lambda_gp},         {"lambda_depth", lambda_depth},
            {"lambda_perc", lambda_perc}};
  for (const auto& l : ls) need(l.v >= 0.0, std::string(l.name) + " must be >= 0");
  need(0 < t_min && t_min < t_max && t_max < 1000,
       "need 0 < t_min < t_max < 1000 (the diffusion schedule length)");
  need(n_ddim_steps >= 1, "n_ddim_steps must be >= 1");
  need(depth_gate >= 0 && depth_gate < K, "need 0 <= depth_gate < K");
  need(depth_sigma >= 0.0, "depth_sigma must be >= 0");
  need(depth_pairs >= 1, "depth_pairs must be >= 1");
  need(depth_window >= 2, "depth_window must be >= 2");
  need(depth_margin >= 0.0, "depth_margin must be >= 0");
  need(ray_batch >= 1, "ray_batch must be >= 1");
  need(disc_batch >= 1, "disc_batch must be >= 1");
  need(r_blocks >= 1, "r_blocks must be >= 1");
  need(patch_size >= (1 << r_blocks), "patch_size must be >= 2^r_blocks");
  need(candidate_size >= patch_size && candidate_size % patch_size == 0,
       "candidate_size must be a positive multiple of patch_size");
  need(samples_prop1 >= 2 && samples_prop2 >= 2 && samples_final >= 2,
       "per-ray sample counts must be >= 2");
  need(base_channels >= 1 && max_channels >= base_channels,
       "need 1 <= base_channels <= max_channels");
  need(field_lr_init > 0 && field_lr_final > 0, "field learning rates must be > 0");
  need(disc_lr > 0, "disc_lr must be > 0");
  need(clip_norm >= 0, "clip_norm must be >= 0");
  need(prior_kind == "diffusion" || prior_kind == "oracle",
       "prior_kind must be diffusion or oracle");
  need(!prior_token.empty(), "prior_token must be non-empty");
  need(oracle_sigma_incon >= 0.0, "oracle_sigma_incon must be >= 0");
  need(adv_real == "inpaint" || adv_real == "unmasked_gt",
       "adv_real must be inpaint or unmasked_gt");
  need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  need(snapshot_every >= 0, "snapshot_every must be >= 0");
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
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
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, "config",
            "line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    const FieldDesc* found = nullptr;
    for (const auto& f : schema())
      if (key == f.name) {
        found = &f;
        break;
      }
    require(found != nullptr, "config",
            "unknown config key '" + key + "' (see --print-config for the schema)");
    assign(cfg, *found, val);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string print_config(const TrainConfig& cfg) {
  std::string out =
      "# maldnerf training configuration (key = value, '#' starts a comment)\n"
      "# default provenance: paper = published recipe, desk = CPU-scale artifact value\n";
  for (const auto& f : schema()) {
    std::string line = std::string(f.name) + " = " + value_to_string(cfg, f.member);
    if (line.size() < 36) line.resize(36, ' ');
    out += line + " # " + f.origin + ": " + f.doc + "\n";
  }
  return out;
}

}  // namespace maldnerf::trainer
