#include "air/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace air {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed)
    : seed_(seed), generator_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

double Rng::uniform(double low, double high) {
  auto u = torch::rand({}, generator_, torch::TensorOptions().dtype(torch::kFloat64));
  return low + (high - low) * u.item<double>();
}

bool Rng::bernoulli(double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform(0.0, 1.0) < p;
}

torch::Tensor Rng::uniform(at::IntArrayRef sizes, double low, double high, torch::Dtype dtype) {
  return torch::empty(sizes, torch::TensorOptions().dtype(dtype)).uniform_(low, high, generator_);
}

torch::Tensor Rng::normal(at::IntArrayRef sizes, torch::Dtype dtype) {
  return torch::randn(sizes, generator_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::permutation(std::int64_t n) {
  return torch::randperm(n, generator_, torch::TensorOptions().dtype(torch::kInt64));
}

torch::Tensor Rng::integers(std::int64_t low, std::int64_t high, at::IntArrayRef sizes) {
  return torch::randint(low, high, sizes, generator_, torch::TensorOptions().dtype(torch::kInt64));
}

}  // namespace air
