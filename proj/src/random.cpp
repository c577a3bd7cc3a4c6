#include "vble/random.hpp"

namespace vble {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * normal();
  return Tensor(std::move(shape), std::move(v));
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace vble
