#pragma once

#include <cstdint>
#include <initializer_list>

namespace maldnerf {

// Counter-free deterministic RNG (splitmix64 core, Box-Muller normals).
// All randomness in the project is drawn from instances seeded by
// Rng::mix(...) of a user seed plus stream identifiers (iteration, image id,
// purpose tag), so any point of the pipeline can be reproduced without
// serializing generator state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Order-sensitive hash combine for deriving stream seeds.
  static uint64_t mix(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x9e3779b97f4a7c15ull;
    for (uint64_t p : parts) {
      h ^= p + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      h = split(h);
    }
    return h;
  }

  uint64_t u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return split(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return double(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) { return int(u64() % uint64_t(n)); }

  double normal();

 private:
  static uint64_t split(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace maldnerf
