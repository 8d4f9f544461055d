#pragma once

#include <cstdint>
#include <vector>

#include "maldnerf/ad/tensor.hpp"

namespace maldnerf::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

// Adam over leaf tensors. Parameters and moments are rounded to float32 after
// every step, so the trajectory is invariant under save/load through the f32
// checkpoint format.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // One update. Pass lr_override >= 0 to use a scheduled rate for this step.
  void step(const std::vector<Tensor>& grads, double lr_override = -1.0);

  int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

  std::vector<float> state_blob() const;  // m then v per parameter
  void load_state(const std::vector<float>& blob, int64_t t);

  static double global_norm(const std::vector<Tensor>& grads);

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace maldnerf::ad
