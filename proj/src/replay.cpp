#include "air/replay.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "air/errors.hpp"

namespace air {

namespace {

torch::Tensor rotate(const torch::Tensor& x, double max_degrees, Rng& rng) {
  const auto batch = x.size(0);
  const auto angles = rng.uniform({batch}, -max_degrees, max_degrees, torch::kFloat64) * (std::numbers::pi / 180.0);
  const auto cos = angles.cos();
  const auto sin = angles.sin();
  const auto zero = torch::zeros_like(angles);
  auto theta = torch::stack({torch::stack({cos, -sin, zero}, 1), torch::stack({sin, cos, zero}, 1)}, 1)
                   .to(x.scalar_type());
  auto grid = torch::nn::functional::affine_grid(theta, x.sizes().vec(), /*align_corners=*/false);
  return torch::nn::functional::grid_sample(
      x, grid,
      torch::nn::functional::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(
          false));
}

// Zero-pad by `padding` on every side, then crop back at a random offset.
torch::Tensor pad_and_crop(const torch::Tensor& x, std::int64_t padding, Rng& rng) {
  const auto batch = x.size(0);
  const auto h = x.size(2);
  const auto w = x.size(3);
  const auto offsets = rng.integers(0, 2 * padding + 1, {batch, 2});
  const auto padded = torch::constant_pad_nd(x, {padding, padding, padding, padding}, 0.0);
  auto out = torch::empty_like(x);
  auto acc = offsets.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < batch; ++i) {
    out[i] = padded[i].slice(1, acc[i][0], acc[i][0] + h).slice(2, acc[i][1], acc[i][1] + w);
  }
  return out;
}

torch::Tensor flip(const torch::Tensor& x, double probability, Rng& rng) {
  const auto coins = rng.uniform({x.size(0)}, 0.0, 1.0, torch::kFloat64);
  auto out = x.clone();
  auto acc = coins.accessor<double, 1>();
  for (std::int64_t i = 0; i < x.size(0); ++i) {
    if (acc[i] < probability) out[i] = x[i].flip({2});
  }
  return out;
}

torch::Tensor erase(const torch::Tensor& x, double probability, double max_fraction, Rng& rng) {
  const auto batch = x.size(0);
  const auto h = x.size(2);
  const auto w = x.size(3);
  const double min_fraction = std::min(0.02, max_fraction);
  auto out = x.clone();
  const auto coins = rng.uniform({batch}, 0.0, 1.0, torch::kFloat64);
  auto coin = coins.accessor<double, 1>();
  for (std::int64_t i = 0; i < batch; ++i) {
    if (coin[i] >= probability) continue;
    const double area = rng.uniform(min_fraction, max_fraction) * static_cast<double>(h * w);
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const auto eh = std::max<std::int64_t>(1, std::llround(std::sqrt(area * aspect)));
    const auto ew = std::max<std::int64_t>(1, std::llround(std::sqrt(area / aspect)));
    if (eh >= h || ew >= w) continue;
    const auto top = static_cast<std::int64_t>(rng.uniform(0.0, static_cast<double>(h - eh + 1)));
    const auto left = static_cast<std::int64_t>(rng.uniform(0.0, static_cast<double>(w - ew + 1)));
    out[i].slice(1, top, top + eh).slice(2, left, left + ew).zero_();
  }
  return out;
}

}  // namespace

void AugmentationPolicy::validate() const {
  if (noise_scale && !(*noise_scale >= 0.0)) throw ConfigError("augmentation.noise_scale", "must be >= 0");
  if (!(rotation_degrees >= 0.0)) throw ConfigError("augmentation.rotation_degrees", "must be >= 0");
  if (crop_padding < 0) throw ConfigError("augmentation.crop_padding", "must be >= 0");
  auto check_probability = [](double p, const char* field) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(field, "must lie in [0, 1]");
  };
  check_probability(flip_probability, "augmentation.flip_probability");
  check_probability(erase_probability, "augmentation.erase_probability");
  check_probability(erase_max_fraction, "augmentation.erase_max_fraction");
}

double AugmentationPolicy::resolved_noise_scale(const AttackSpec& spec) const {
  if (noise_scale) return *noise_scale;
  return spec.family == AttackFamily::kNone ? 0.0 : spec.epsilon / 2.0;
}

AugmentationPolicy AugmentationPolicy::identity() {
  AugmentationPolicy policy;
  policy.noise_scale = 0.0;
  policy.rotation_degrees = 0.0;
  policy.crop_padding = 0;
  policy.flip_probability = 0.0;
  policy.erase_probability = 0.0;
  policy.erase_max_fraction = 0.0;
  return policy;
}

void to_json(nlohmann::json& j, const AugmentationPolicy& policy) {
  j = {{"noise_scale", policy.noise_scale ? nlohmann::json(*policy.noise_scale) : nlohmann::json(nullptr)},
       {"rotation_degrees", policy.rotation_degrees},
       {"crop_padding", policy.crop_padding},
       {"flip_probability", policy.flip_probability},
       {"erase_probability", policy.erase_probability},
       {"erase_max_fraction", policy.erase_max_fraction}};
}

void from_json(const nlohmann::json& j, AugmentationPolicy& policy) {
  AugmentationPolicy defaults;
  if (j.contains("noise_scale") && !j.at("noise_scale").is_null()) {
    policy.noise_scale = j.at("noise_scale").get<double>();
  } else {
    policy.noise_scale.reset();
  }
  policy.rotation_degrees = j.value("rotation_degrees", defaults.rotation_degrees);
  policy.crop_padding = j.value("crop_padding", defaults.crop_padding);
  policy.flip_probability = j.value("flip_probability", defaults.flip_probability);
  policy.erase_probability = j.value("erase_probability", defaults.erase_probability);
  policy.erase_max_fraction = j.value("erase_max_fraction", defaults.erase_max_fraction);
}

torch::Tensor isotropic_augment(const torch::Tensor& x, const AugmentationPolicy& policy, double noise_scale,
                                Rng& rng) {
  policy.validate();
  if (!(noise_scale >= 0.0)) throw InputError("isotropic_augment: noise scale must be >= 0");
  torch::NoGradGuard no_grad;
  auto out = x.detach();
  if (noise_scale > 0.0) out = out + noise_scale * rng.normal(out.sizes(), out.scalar_type());
  if (out.dim() == 4) {
    if (policy.rotation_degrees > 0.0) out = rotate(out, policy.rotation_degrees, rng);
    if (policy.crop_padding > 0) out = pad_and_crop(out, policy.crop_padding, rng);
    if (policy.flip_probability > 0.0) out = flip(out, policy.flip_probability, rng);
    if (policy.erase_probability > 0.0 && policy.erase_max_fraction > 0.0) {
      out = erase(out, policy.erase_probability, policy.erase_max_fraction, rng);
    }
  }
  return out.clamp(0.0, 1.0);
}

torch::Tensor mix_with(const torch::Tensor& x, double alpha, const torch::Tensor& permutation) {
  if (permutation.dim() != 1 || permutation.size(0) != x.size(0)) {
    throw InputError("mix: permutation length must equal the batch size");
  }
  torch::NoGradGuard no_grad;
  const auto a = x.detach();
  const auto b = a.index_select(0, permutation);
  // b + alpha (a - b), kept inside the closed interval spanned by a and b.
  const auto mixed = b + alpha * (a - b);
  return torch::min(torch::max(mixed, torch::min(a, b)), torch::max(a, b));
}

MixResult anisotropic_mix(const torch::Tensor& x, Rng& rng) {
  if (x.dim() < 1 || x.size(0) < 2) throw InputError("anisotropic_mix: batch size must be >= 2");
  const double alpha = rng.uniform(kMixAlphaLow, kMixAlphaHigh);
  auto permutation = rng.permutation(x.size(0));
  auto mixed = mix_with(x, alpha, permutation);
  return {std::move(mixed), alpha, std::move(permutation)};
}

torch::Tensor mixed_query_labels(const ModelSnapshot& teacher, const torch::Tensor& x,
                                 const torch::Tensor& permutation, double alpha) {
  if (permutation.dim() != 1 || permutation.size(0) != x.size(0)) {
    throw InputError("mixed_query_labels: permutation length must equal the batch size");
  }
  const auto logits = teacher.forward(x);
  return alpha * logits + (1.0 - alpha) * logits.index_select(0, permutation);
}

ReplayBatch make_replay_batch(const torch::Tensor& x_adv, const AugmentationPolicy& policy, double noise_scale,
                              Rng& rng) {
  ReplayBatch batch;
  batch.noise_seed = static_cast<std::uint64_t>(
      rng.integers(0, std::numeric_limits<std::int64_t>::max(), {1}).item<std::int64_t>());
  Rng noise_rng(batch.noise_seed);
  batch.isotropic = isotropic_augment(x_adv, policy, noise_scale, noise_rng);
  auto mix = anisotropic_mix(x_adv, rng);
  batch.anisotropic = std::move(mix.mixed);
  batch.alpha = mix.alpha;
  batch.permutation = std::move(mix.permutation);
  return batch;
}

}  // namespace air
