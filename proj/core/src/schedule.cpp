#include "maldnerf/prior/prior.hpp"
#include "maldnerf/util/error.hpp"

namespace maldnerf::prior {

DiffusionSchedule DiffusionSchedule::linear(int T, double beta_lo, double beta_hi) {
  require(T >= 2 && beta_lo > 0 && beta_hi > beta_lo && beta_hi < 1, "schedule",
          "invalid diffusion schedule parameters");
  DiffusionSchedule s;
  s.T = T;
  s.beta.resize(T + 1);
  s.alpha_bar.resize(T + 1);
  s.beta[0] = 0.0;
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = beta_lo + (beta_hi - beta_lo) * (t - 1) / (T - 1);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  return s;
}

}  // namespace maldnerf::prior
