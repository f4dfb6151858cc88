#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace eupe {

std::uint64_t splitmix64(std::uint64_t x);
// Independent seed for a named sub-stream of a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Random stream with explicit, portable conversions on top of mt19937_64.
// The distribution code lives here (not in <random>) so sequences are
// identical across standard libraries, and state() round-trips exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Normal(0, std) resampled until inside [-bound*std, bound*std].
  double truncated_normal(double std, double bound = 2.0);

  std::string state() const;
  void set_state(const std::string& text);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace eupe
