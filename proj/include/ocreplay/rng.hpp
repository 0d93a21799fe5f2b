#pragma once

#include <cstdint>

namespace ocreplay {

// xoshiro256++ seeded through splitmix64. Normal variates come from the
// classic Box-Muller transform (two uniforms give a cos/sin pair, the sin
// value is cached), so the whole draw sequence is a pure function of the
// 64-bit seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // uniform in [0, 1)
  double uniform();
  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n);
  // standard normal
  double normal();

  std::uint64_t seed() const { return seed_; }

  struct State {
    std::uint64_t seed;
    std::uint64_t s[4];
    bool has_cache;
    double cache;
  };
  State state() const;
  void restore(const State& st);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t s_[4] = {0, 0, 0, 0};
  bool has_cache_ = false;
  double cache_ = 0.0;
};

}  // namespace ocreplay
