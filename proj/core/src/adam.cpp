#include "maldnerf/ad/adam.hpp"

#include <cmath>

#include "maldnerf/util/error.hpp"

namespace maldnerf::ad {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double Adam::global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.value()) s += x * x;
  return std::sqrt(s);
}

void Adam::step(const std::vector<Tensor>& grads, double lr_override) {
  require(grads.size() == params_.size(), "optimizer", "Adam: gradient count mismatch");
  double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double gn = global_norm(grads);
    if (gn > cfg_.clip_norm) scale = cfg_.clip_norm / gn;
  }
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].leaf_value();
    const auto& g = grads[i].value();
    require(g.size() == p.size(), "optimizer", "Adam: gradient shape mismatch");
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = g[j] * scale;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      double upd = p[j] - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      // Round state through f32 so checkpoints reproduce the trajectory.
      p[j] = (double)(float)upd;
      m[j] = (double)(float)m[j];
      v[j] = (double)(float)v[j];
    }
  }
}

std::vector<float> Adam::state_blob() const {
  std::vector<float> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    for (double x : m_[i]) out.push_back((float)x);
    for (double x : v_[i]) out.push_back((float)x);
  }
  return out;
}

void Adam::load_state(const std::vector<float>& blob, int64_t t) {
  size_t need = 0;
  for (const auto& m : m_) need += 2 * m.size();
  require(blob.size() == need, "optimizer", "Adam: optimizer state size mismatch");
  size_t k = 0;
  for (size_t i = 0; i < params_.size(); ++i) {
    for (auto& x : m_[i]) x = (double)blob[k++];
    for (auto& x : v_[i]) x = (double)blob[k++];
  }
  t_ = t;
}

}  // namespace maldnerf::ad
