#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>

#include "air/attacks.hpp"
#include "air/model.hpp"
#include "air/rng.hpp"

namespace air {

// Stochastic neighborhood transform for isotropic replay. Stages run in a
// fixed order: Gaussian noise, rotation, pad-and-crop shift, horizontal flip,
// random erase. The result is clipped to [0,1] once, after the last stage.
struct AugmentationPolicy {
  // Gaussian noise scale. Unset means half the current task's epsilon.
  std::optional<double> noise_scale;
  double rotation_degrees = 15.0;
  std::int64_t crop_padding = 4;
  double flip_probability = 0.0;
  double erase_probability = 0.25;
  double erase_max_fraction = 0.1;

  void validate() const;
  [[nodiscard]] double resolved_noise_scale(const AttackSpec& spec) const;

  // Noise-free, transform-free policy.
  static AugmentationPolicy identity();
};

void to_json(nlohmann::json& j, const AugmentationPolicy& policy);
void from_json(const nlohmann::json& j, AugmentationPolicy& policy);

struct ReplayBatch {
  torch::Tensor isotropic;    // X_IR
  torch::Tensor anisotropic;  // X_AR
  double alpha = 0.5;
  torch::Tensor permutation;  // int64 index map producing the shuffled batch
  std::uint64_t noise_seed = 0;
};

torch::Tensor isotropic_augment(const torch::Tensor& x, const AugmentationPolicy& policy, double noise_scale,
                                Rng& rng);

struct MixResult {
  torch::Tensor mixed;
  double alpha;
  torch::Tensor permutation;
};

inline constexpr double kMixAlphaLow = 0.3;
inline constexpr double kMixAlphaHigh = 0.7;

// alpha ~ U[0.3, 0.7], uniform random permutation (fixed points allowed),
// output alpha * x + (1 - alpha) * x[perm].
MixResult anisotropic_mix(const torch::Tensor& x, Rng& rng);

// Same mixing with caller-provided weight and permutation.
torch::Tensor mix_with(const torch::Tensor& x, double alpha, const torch::Tensor& permutation);

// alpha * teacher(x) + (1 - alpha) * teacher(x[perm]) on logits.
torch::Tensor mixed_query_labels(const ModelSnapshot& teacher, const torch::Tensor& x,
                                 const torch::Tensor& permutation, double alpha);

// Builds both replay views of the current adversarial batch. The noise stream
// is forked from `rng` so the recorded seed reproduces it.
ReplayBatch make_replay_batch(const torch::Tensor& x_adv, const AugmentationPolicy& policy, double noise_scale,
                              Rng& rng);

}  // namespace air
