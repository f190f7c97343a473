#include "air/attacks.hpp"

#include "air/errors.hpp"

namespace air {

namespace {

// Gradient of the summed cross-entropy with respect to the input batch. Summing
// keeps per-sample gradient magnitudes independent of the batch size; only the
// sign is used downstream.
torch::Tensor input_gradient(Classifier& model, const torch::Tensor& x, const torch::Tensor& y) {
  auto probe = x.detach().clone().requires_grad_(true);
  auto logits = model->forward(probe);
  auto loss = torch::nn::functional::cross_entropy(
      logits, y, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
  auto grad = torch::autograd::grad({loss}, {probe})[0];
  if (!torch::isfinite(grad).all().item<bool>()) throw CraftingError("attack: non-finite input gradient");
  return grad;
}

void check_pixels(const torch::Tensor& x) {
  if (x.numel() == 0) return;
  if (x.min().item<double>() < 0.0 || x.max().item<double>() > 1.0) {
    throw InputError("attack: pixel values must lie in [0, 1]");
  }
}

}  // namespace

std::string to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::kNone:
      return "none";
    case AttackFamily::kFgsm:
      return "fgsm";
    case AttackFamily::kPgd:
      return "pgd";
  }
  throw ConfigError("family", "unknown attack family");
}

AttackFamily attack_family_from_string(const std::string& name) {
  if (name == "none") return AttackFamily::kNone;
  if (name == "fgsm") return AttackFamily::kFgsm;
  if (name == "pgd") return AttackFamily::kPgd;
  throw ConfigError("family", "unknown attack family '" + name + "'");
}

void AttackSpec::validate() const {
  if (family == AttackFamily::kNone) return;
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon", "must be >= 0");
  if (family == AttackFamily::kPgd) {
    if (!(step_size > 0.0)) throw ConfigError("step_size", "must be > 0 for pgd");
    if (iterations < 1) throw ConfigError("iterations", "must be >= 1 for pgd");
  }
}

AttackSpec AttackSpec::none() { return {}; }

AttackSpec AttackSpec::fgsm(double epsilon) {
  return {AttackFamily::kFgsm, epsilon, epsilon, 1, false};
}

AttackSpec AttackSpec::pgd(double epsilon, double step_size, int iterations, bool random_start) {
  return {AttackFamily::kPgd, epsilon, step_size, iterations, random_start};
}

void to_json(nlohmann::json& j, const AttackSpec& spec) {
  j = {{"family", to_string(spec.family)},
       {"epsilon", spec.epsilon},
       {"step_size", spec.step_size},
       {"iterations", spec.iterations},
       {"random_start", spec.random_start}};
}

void from_json(const nlohmann::json& j, AttackSpec& spec) {
  spec.family = attack_family_from_string(j.at("family").get<std::string>());
  spec.epsilon = j.value("epsilon", 0.0);
  spec.step_size = j.value("step_size", spec.family == AttackFamily::kFgsm ? spec.epsilon : 0.0);
  spec.iterations = j.value("iterations", 1);
  spec.random_start = j.value("random_start", false);
}

torch::Tensor fgsm(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec) {
  if (spec.family != AttackFamily::kFgsm) throw ConfigError("family", "fgsm called with a non-fgsm spec");
  spec.validate();
  check_pixels(x);
  const auto grad = input_gradient(model, x, y);
  torch::NoGradGuard no_grad;
  return (x.detach() + spec.epsilon * grad.sign()).clamp(0.0, 1.0);
}

torch::Tensor pgd(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                  Rng& rng) {
  if (spec.family != AttackFamily::kPgd) throw ConfigError("family", "pgd called with a non-pgd spec");
  spec.validate();
  check_pixels(x);
  const auto clean = x.detach();
  const auto lower = clean - spec.epsilon;
  const auto upper = clean + spec.epsilon;
  auto adv = clean.clone();
  if (spec.random_start) {
    torch::NoGradGuard no_grad;
    adv = (adv + rng.uniform(clean.sizes(), -spec.epsilon, spec.epsilon, clean.scalar_type())).clamp(0.0, 1.0);
  }
  for (int k = 0; k < spec.iterations; ++k) {
    const auto grad = input_gradient(model, adv, y);
    torch::NoGradGuard no_grad;
    adv = (adv + spec.step_size * grad.sign()).clamp(0.0, 1.0);
    adv = torch::min(torch::max(adv, lower), upper);
  }
  return adv;
}

torch::Tensor craft(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                    Rng& rng) {
  switch (spec.family) {
    case AttackFamily::kNone:
      check_pixels(x);
      return x.detach();
    case AttackFamily::kFgsm:
      return fgsm(model, x, y, spec);
    case AttackFamily::kPgd:
      return pgd(model, x, y, spec, rng);
  }
  throw ConfigError("family", "unknown attack family");
}

}  // namespace air
