#include "air/losses.hpp"

#include "air/errors.hpp"

namespace air {

namespace {

torch::Tensor student_forward(Classifier& model, const torch::Tensor& x, bool dropout_active, Rng& rng) {
  return dropout_active ? model->forward(x, rng) : model->forward(x);
}

}  // namespace

torch::Tensor kl_div(const torch::Tensor& target_logits, const torch::Tensor& learner_logits) {
  if (target_logits.sizes() != learner_logits.sizes() || target_logits.dim() != 2) {
    throw InputError("kl_div: logits must be [B, C] with matching shapes");
  }
  if (target_logits.size(1) < 2) throw InputError("kl_div: at least two classes required");
  if (!torch::isfinite(target_logits).all().item<bool>() || !torch::isfinite(learner_logits).all().item<bool>()) {
    throw NumericError("kl_div: non-finite logits");
  }
  const auto log_p = torch::log_softmax(target_logits, 1);
  const auto log_q = torch::log_softmax(learner_logits, 1);
  const auto per_sample = (log_p.exp() * (log_p - log_q)).sum(1);
  return per_sample.mean().clamp_min(0.0);
}

AtResult at_loss(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                 const AtOptions& options, Rng& rng) {
  AtResult result;
  result.adversarial = craft(model, x, y, spec, rng);
  auto logits = student_forward(model, result.adversarial, options.dropout_active, rng);
  result.loss = torch::nn::functional::cross_entropy(logits, y);
  if (options.rdrop_probability > 0.0 && rng.bernoulli(options.rdrop_probability)) {
    auto second = student_forward(model, result.adversarial, options.dropout_active, rng);
    result.loss = result.loss + options.rdrop_weight * 0.5 * (air::kl_div(logits, second) + air::kl_div(second, logits));
    result.rdrop_applied = true;
  }
  return result;
}

torch::Tensor distill_loss(Classifier& student, const ModelSnapshot& teacher, const torch::Tensor& x_replay) {
  return air::kl_div(teacher.forward(x_replay), student->forward(x_replay));
}

torch::Tensor distill_loss(Classifier& student, const ModelSnapshot& teacher, const torch::Tensor& x_replay,
                           Rng& dropout_rng) {
  return air::kl_div(teacher.forward(x_replay), student->forward(x_replay, dropout_rng));
}

torch::Tensor rdrop_reg(Classifier& model, const torch::Tensor& x, const torch::Tensor& x_neighbor,
                        const DropoutMasks& first, const DropoutMasks& second) {
  if (x.sizes() != x_neighbor.sizes()) throw InputError("rdrop_reg: x and its neighbor must share a shape");
  const auto first_term = air::kl_div(model->forward(x, first), model->forward(x_neighbor, first));
  const auto second_term = air::kl_div(model->forward(x, second), model->forward(x_neighbor, second));
  return 0.5 * (first_term + second_term);
}

torch::Tensor rdrop_reg(Classifier& model, const torch::Tensor& x, const torch::Tensor& x_neighbor, Rng& rng) {
  if (x.sizes() != x_neighbor.sizes()) throw InputError("rdrop_reg: x and its neighbor must share a shape");
  if (model->arch().dropout <= 0.0) {
    // Both passes are the same deterministic network.
    const auto term = air::kl_div(model->forward(x), model->forward(x_neighbor));
    return 0.5 * (term + term);
  }
  const auto first = model->sample_masks(x.size(0), rng);
  const auto second = model->sample_masks(x.size(0), rng);
  return rdrop_reg(model, x, x_neighbor, first, second);
}

std::string to_string(ArLabelStrategy strategy) {
  return strategy == ArLabelStrategy::kMixedData ? "mixed_data" : "mixed_query";
}

ArLabelStrategy ar_label_strategy_from_string(const std::string& name) {
  if (name == "mixed_data") return ArLabelStrategy::kMixedData;
  if (name == "mixed_query") return ArLabelStrategy::kMixedQuery;
  throw ConfigError("air.ar_label_strategy", "expected 'mixed_data' or 'mixed_query', got '" + name + "'");
}

LossBreakdown air_loss(Classifier& student, const ModelSnapshot* teacher, const torch::Tensor& x,
                       const torch::Tensor& y, const AttackSpec& spec, const AirOptions& options, Rng& rng) {
  if (teacher == nullptr && options.task_index >= 2) {
    throw ProtocolError("air_loss: task " + std::to_string(options.task_index) + " requires a teacher snapshot");
  }
  LossBreakdown out;
  out.weights = options.weights;

  auto at = at_loss(student, x, y, spec, options.at, rng);
  out.rdrop_applied = at.rdrop_applied;
  out.at = at.loss.item<double>();
  auto objective = at.loss;

  const bool use_ir = teacher != nullptr && options.enable_ir && options.weights.sd != 0.0;
  const bool use_ar = teacher != nullptr && options.enable_ar && options.weights.sd != 0.0;
  const bool use_reg = options.enable_reg && options.weights.reg != 0.0;
  if (!use_ir && !use_ar && !use_reg) {
    out.total = out.recompose(out.weights);
    out.objective = objective;
    return out;
  }

  const double noise_scale = options.policy.resolved_noise_scale(spec);
  auto replay = make_replay_batch(at.adversarial, options.policy, noise_scale, rng);

  if (use_ir) {
    auto ir = options.at.dropout_active ? distill_loss(student, *teacher, replay.isotropic, rng)
                                        : distill_loss(student, *teacher, replay.isotropic);
    out.ir = ir.item<double>();
    objective = objective + options.weights.sd * ir;
  }
  if (use_ar) {
    torch::Tensor ar;
    if (options.ar_labels == ArLabelStrategy::kMixedData) {
      ar = options.at.dropout_active ? distill_loss(student, *teacher, replay.anisotropic, rng)
                                     : distill_loss(student, *teacher, replay.anisotropic);
    } else {
      const auto targets = mixed_query_labels(*teacher, at.adversarial, replay.permutation, replay.alpha);
      ar = air::kl_div(targets, student_forward(student, replay.anisotropic, options.at.dropout_active, rng));
    }
    out.ar = ar.item<double>();
    objective = objective + options.weights.sd * ar;
  }
  if (use_reg) {
    auto reg = rdrop_reg(student, at.adversarial, replay.isotropic, rng);
    out.reg = reg.item<double>();
    objective = objective + options.weights.reg * reg;
  }
  out.total = out.recompose(out.weights);
  out.objective = objective;
  out.replay = std::move(replay);
  return out;
}

}  // namespace air
