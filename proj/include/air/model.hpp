#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "air/rng.hpp"

namespace air {

struct ConvLayerSpec {
  std::int64_t out_channels = 0;
  bool pool = false;  // 2x2 max-pool after the activation
};

// Layer layout of a Classifier. Convolutions are 3x3, stride 1, padding 1,
// each followed by ReLU. Dense hidden layers use ReLU. Dropout sits before
// every dense layer, the head included.
struct ArchSpec {
  std::string name = "custom";
  std::int64_t channels = 1;
  std::int64_t height = 28;
  std::int64_t width = 28;
  std::vector<ConvLayerSpec> conv;
  std::vector<std::int64_t> hidden;
  std::int64_t classes = 10;
  double dropout = 0.0;

  [[nodiscard]] std::int64_t input_size() const { return channels * height * width; }
  [[nodiscard]] std::int64_t flat_width() const;          // width entering the first dense layer
  [[nodiscard]] std::int64_t penultimate_width() const;   // width entering the head
  void validate() const;

  // 4 conv + 3 dense, for 28x28 grayscale digits.
  static ArchSpec small_cnn(double dropout = 0.1);
  // 2 conv + 2 dense, for fast tests.
  static ArchSpec tiny_cnn(double dropout = 0.0);
  // Dense-only net on a flat input of `features` values.
  static ArchSpec mlp(std::int64_t features, std::vector<std::int64_t> hidden,
                      std::int64_t classes, double dropout = 0.0);
};

void to_json(nlohmann::json& j, const ArchSpec& arch);
void from_json(const nlohmann::json& j, ArchSpec& arch);

// One inverted-dropout mask per dense layer input, already scaled by 1/(1-p).
struct DropoutMasks {
  std::vector<torch::Tensor> masks;
};

class ClassifierImpl : public torch::nn::Cloneable<ClassifierImpl> {
 public:
  explicit ClassifierImpl(ArchSpec arch);

  void reset() override;

  // Deterministic forward with dropout disabled.
  torch::Tensor forward(const torch::Tensor& x);
  // Forward with freshly sampled dropout masks.
  torch::Tensor forward(const torch::Tensor& x, Rng& rng);
  torch::Tensor forward(const torch::Tensor& x, const DropoutMasks& masks);

  // Penultimate activations (input to the head), dropout disabled.
  torch::Tensor features(const torch::Tensor& x);

  [[nodiscard]] DropoutMasks sample_masks(std::int64_t batch, Rng& rng) const;

  [[nodiscard]] const ArchSpec& arch() const noexcept { return arch_; }
  [[nodiscard]] torch::Dtype dtype() const;
  [[nodiscard]] std::int64_t parameter_count() const;

  // Concatenated copy of all parameters in registration order.
  [[nodiscard]] torch::Tensor flat_parameters() const;
  void set_flat_parameters(const torch::Tensor& flat);

  // Parameters of the final dense layer.
  [[nodiscard]] std::vector<torch::Tensor> head_parameters() const;
  [[nodiscard]] std::vector<torch::Tensor> body_parameters() const;

 private:
  torch::Tensor check_input(const torch::Tensor& x) const;
  torch::Tensor trunk(const torch::Tensor& x, const DropoutMasks* masks);

  ArchSpec arch_;
  std::vector<torch::nn::Conv2d> conv_;
  std::vector<torch::nn::Linear> dense_;  // hidden layers followed by the head
};

TORCH_MODULE(Classifier);

// He-normal weights, zero biases.
Classifier make_classifier(const ArchSpec& arch, Rng& rng, torch::Dtype dtype = torch::kFloat32);

// Frozen copy of a classifier, used as the teacher for the next task.
// Outputs are computed without autograd; the copy is never mutated.
class ModelSnapshot {
 public:
  ModelSnapshot(const Classifier& live, int task_index);

  [[nodiscard]] torch::Tensor forward(const torch::Tensor& x) const;
  [[nodiscard]] torch::Tensor features(const torch::Tensor& x) const;

  [[nodiscard]] int task_index() const noexcept { return task_index_; }
  [[nodiscard]] const ArchSpec& arch() const { return model_->arch(); }
  [[nodiscard]] torch::Dtype dtype() const { return model_->dtype(); }
  [[nodiscard]] torch::Tensor flat_parameters() const { return model_->flat_parameters(); }
  [[nodiscard]] std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;

  // Fresh trainable classifier holding a copy of the frozen parameters.
  [[nodiscard]] Classifier to_classifier() const;

 private:
  std::shared_ptr<ClassifierImpl> model_;
  int task_index_;
};

ModelSnapshot snapshot(const Classifier& model, int task_index);

// Binary checkpoint: magic, version, JSON header (architecture, task index,
// tensor table), then little-endian float64 tensor payloads. See
// docs/checkpoint-format.md.
void save_checkpoint(const std::filesystem::path& path, const ModelSnapshot& snap);
ModelSnapshot load_checkpoint(const std::filesystem::path& path);

}  // namespace air
