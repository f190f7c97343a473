#include "air/baselines.hpp"

#include "air/errors.hpp"

namespace air {

namespace {

torch::Tensor flat_live_parameters(Classifier& model) {
  std::vector<torch::Tensor> flat;
  for (auto& p : model->parameters()) flat.push_back(p.reshape(-1));
  return torch::cat(flat);
}

}  // namespace

FisherInfo fisher_diag(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& spec,
                       Rng& rng) {
  if (x.size(0) == 0) throw InputError("fisher_diag: empty sample");
  if (y.size(0) != x.size(0)) throw InputError("fisher_diag: label count must match the sample count");
  const auto adv = craft(model, x, y, spec, rng);
  auto params = model->parameters();
  auto accum = torch::zeros({model->parameter_count()}, torch::TensorOptions().dtype(model->dtype()));
  for (std::int64_t i = 0; i < adv.size(0); ++i) {
    const auto logits = model->forward(adv.slice(0, i, i + 1));
    const auto log_prob = torch::log_softmax(logits, 1).select(1, y[i].item<std::int64_t>()).sum();
    const auto grads = torch::autograd::grad({log_prob}, params);
    std::vector<torch::Tensor> flat;
    flat.reserve(grads.size());
    for (const auto& g : grads) flat.push_back(g.reshape(-1));
    accum += torch::cat(flat).square();
  }
  FisherInfo info;
  info.samples = adv.size(0);
  info.diagonal = (accum / static_cast<double>(info.samples)).detach();
  if (!torch::isfinite(info.diagonal).all().item<bool>()) throw NumericError("fisher_diag: non-finite estimate");
  return info;
}

torch::Tensor ewc_penalty(Classifier& model, const ModelSnapshot& anchor, const FisherInfo& fisher, double strength) {
  const auto live = flat_live_parameters(model);
  const auto reference = anchor.flat_parameters().to(live.scalar_type());
  if (reference.sizes() != live.sizes() || fisher.diagonal.sizes() != live.sizes()) {
    throw InputError("ewc_penalty: anchor, Fisher and model parameter shapes differ");
  }
  return 0.5 * strength * (fisher.diagonal.to(live.scalar_type()) * (live - reference).square()).sum();
}

torch::Tensor ewc_penalty(Classifier& model, const std::vector<EwcTerm>& terms, double strength) {
  auto total = torch::zeros({}, torch::TensorOptions().dtype(model->dtype()));
  for (const auto& term : terms) total = total + ewc_penalty(model, term.anchor, term.fisher, strength);
  return total;
}

torch::Tensor lfl_penalty(Classifier& model, const ModelSnapshot& teacher, const torch::Tensor& x, double strength) {
  const auto target = teacher.features(x);
  const auto current = model->features(x);
  if (target.sizes() != current.sizes()) throw InputError("lfl_penalty: feature dimensions differ");
  return strength * (current - target.to(current.scalar_type())).square().sum(1).mean();
}

}  // namespace air
