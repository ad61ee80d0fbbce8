#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modicf/numerics/tensor.hpp"

namespace modicf {

// Seeded generator with platform-independent draws. The engine is std::mt19937_64;
// the distributions are implemented here because the std:: ones are
// implementation-defined and carry hidden state that would break checkpoints.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  // Standard normal via Box-Muller; stateless (one value per call).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0);
  Tensor normal_tensor(std::size_t rows, std::size_t cols) {
    Tensor t(rows, cols);
    fill_normal(t);
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  std::string serialize() const;
  void deserialize(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix64(std::uint64_t x);
// Seed for a named sub-stream of a master seed ("mask", "init", "diffusion-noise", ...).
std::uint64_t substream_seed(std::uint64_t master, std::string_view name, std::uint64_t index = 0);
inline Rng substream(std::uint64_t master, std::string_view name, std::uint64_t index = 0) {
  return Rng(substream_seed(master, name, index));
}

}  // namespace modicf
