#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>

#include "air/attacks.hpp"
#include "air/model.hpp"
#include "air/replay.hpp"
#include "air/rng.hpp"

namespace air {

// Batch-mean KL(P || Q) in nats, P = softmax(target_logits), Q = softmax(learner_logits).
torch::Tensor kl_div(const torch::Tensor& target_logits, const torch::Tensor& learner_logits);

struct AtOptions {
  bool dropout_active = true;
  // Chance per batch of adding a two-pass dropout consistency term to the AT loss.
  double rdrop_probability = 0.0;
  double rdrop_weight = 1.0;
};

struct AtResult {
  torch::Tensor loss;
  torch::Tensor adversarial;
  bool rdrop_applied = false;
};

// Crafts the task's attack against the live model, then cross-entropy on it.
AtResult at_loss(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                 const AtOptions& options, Rng& rng);

// KL(teacher || student) on replay inputs. The teacher contributes constants only.
torch::Tensor distill_loss(Classifier& student, const ModelSnapshot& teacher, const torch::Tensor& x_replay);
torch::Tensor distill_loss(Classifier& student, const ModelSnapshot& teacher, const torch::Tensor& x_replay,
                           Rng& dropout_rng);

// 1/2 (KL(f1(x) || f1(x')) + KL(f2(x) || f2(x'))) where f1, f2 are two
// independently sampled dropout subnetworks, each shared by x and x'.
torch::Tensor rdrop_reg(Classifier& model, const torch::Tensor& x, const torch::Tensor& x_neighbor, Rng& rng);
torch::Tensor rdrop_reg(Classifier& model, const torch::Tensor& x, const torch::Tensor& x_neighbor,
                        const DropoutMasks& first, const DropoutMasks& second);

enum class ArLabelStrategy {
  kMixedData,   // teacher queried on the mixed inputs
  kMixedQuery,  // alpha-mix of teacher logits on the two unmixed components
};

std::string to_string(ArLabelStrategy strategy);
ArLabelStrategy ar_label_strategy_from_string(const std::string& name);

struct AirWeights {
  double sd = 1.0;
  double reg = 0.5;
};

struct AirOptions {
  AirWeights weights;
  bool enable_ir = true;
  bool enable_ar = true;
  bool enable_reg = true;
  ArLabelStrategy ar_labels = ArLabelStrategy::kMixedData;
  AtOptions at;
  AugmentationPolicy policy;
  // 1-based position of the current task in the sequence.
  int task_index = 1;
};

struct LossBreakdown {
  double at = 0.0;
  double ir = 0.0;
  double ar = 0.0;
  double reg = 0.0;
  double total = 0.0;
  AirWeights weights;
  torch::Tensor objective;  // differentiable total
  std::optional<ReplayBatch> replay;
  bool rdrop_applied = false;

  [[nodiscard]] double recompose(const AirWeights& w) const { return at + w.sd * (ir + ar) + w.reg * reg; }
};

// L_AT + sd (L_IR + L_AR) + reg L_Reg. Components whose weight or switch is
// zero are skipped entirely and reported as 0. Without a teacher (first task)
// only the AT and regularizer terms apply.
LossBreakdown air_loss(Classifier& student, const ModelSnapshot* teacher, const torch::Tensor& x,
                       const torch::Tensor& y, const AttackSpec& spec, const AirOptions& options, Rng& rng);

}  // namespace air
