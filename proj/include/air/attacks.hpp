#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <string>

#include "air/model.hpp"
#include "air/rng.hpp"

namespace air {

enum class AttackFamily { kNone, kFgsm, kPgd };

std::string to_string(AttackFamily family);
AttackFamily attack_family_from_string(const std::string& name);

// White-box l-inf attack parameters. Budgets are in [0,1] pixel units.
struct AttackSpec {
  AttackFamily family = AttackFamily::kNone;
  double epsilon = 0.0;
  double step_size = 0.0;
  int iterations = 1;
  bool random_start = false;

  void validate() const;

  static AttackSpec none();
  static AttackSpec fgsm(double epsilon);
  static AttackSpec pgd(double epsilon, double step_size, int iterations, bool random_start = true);

  bool operator==(const AttackSpec&) const = default;
};

void to_json(nlohmann::json& j, const AttackSpec& spec);
void from_json(const nlohmann::json& j, AttackSpec& spec);

// clip(x + eps * sign(grad_x CE(f(x), y)), 0, 1). Dropout is disabled while
// taking the input gradient.
torch::Tensor fgsm(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec);

// K projected sign-gradient ascent steps inside the eps-ball, optionally from a
// uniform random start.
torch::Tensor pgd(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                  Rng& rng);

// Dispatches on spec.family; kNone returns x unchanged.
torch::Tensor craft(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                    Rng& rng);

}  // namespace air
