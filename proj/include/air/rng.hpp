#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace air {

// Seeded random source. Every stochastic operation in the library draws from
// an explicit Rng so that runs are reproducible bit for bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] torch::Generator& generator() noexcept { return generator_; }

  // Independent stream keyed on (seed, stream). Does not advance this Rng.
  [[nodiscard]] Rng fork(std::uint64_t stream) const;

  double uniform(double low, double high);
  bool bernoulli(double p);

  torch::Tensor uniform(at::IntArrayRef sizes, double low, double high,
                        torch::Dtype dtype = torch::kFloat32);
  torch::Tensor normal(at::IntArrayRef sizes, torch::Dtype dtype = torch::kFloat32);
  torch::Tensor permutation(std::int64_t n);
  torch::Tensor integers(std::int64_t low, std::int64_t high, at::IntArrayRef sizes);

 private:
  std::uint64_t seed_;
  torch::Generator generator_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace air
