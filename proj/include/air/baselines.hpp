#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "air/attacks.hpp"
#include "air/model.hpp"
#include "air/rng.hpp"

namespace air {

// Diagonal Fisher estimate, laid out like Classifier::flat_parameters().
struct FisherInfo {
  torch::Tensor diagonal;
  std::int64_t samples = 0;
};

// F_i = mean over samples of (d log p(y|x) / d w_i)^2, with x crafted under
// `spec` against the model. Gradients are taken per sample, dropout off.
FisherInfo fisher_diag(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                       Rng& rng);

// (strength / 2) * sum_i F_i (w_i - anchor_i)^2, differentiable in the live model.
torch::Tensor ewc_penalty(Classifier& model, const ModelSnapshot& anchor, const FisherInfo& fisher, double strength);

// One consolidated task: anchor parameters plus their Fisher weights.
struct EwcTerm {
  ModelSnapshot anchor;
  FisherInfo fisher;
};

torch::Tensor ewc_penalty(Classifier& model, const std::vector<EwcTerm>& terms, double strength);

// strength * mean over the batch of ||features_student(x) - features_teacher(x)||^2.
torch::Tensor lfl_penalty(Classifier& model, const ModelSnapshot& teacher, const torch::Tensor& x, double strength);

}  // namespace air
