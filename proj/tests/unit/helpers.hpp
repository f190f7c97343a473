#pragma once

#include <torch/torch.h>

// c10 ships its own CHECK family; doctest's must win in test code.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "air/data.hpp"
#include "air/model.hpp"
#include "air/rng.hpp"
#include "air/training.hpp"

namespace air::test {

// Small conv net on 1x6x6 inputs, about 150 parameters.
inline ArchSpec toy_conv(double dropout = 0.0) {
  ArchSpec arch;
  arch.name = "toy_conv";
  arch.height = 6;
  arch.width = 6;
  arch.conv = {{2, true}};
  arch.hidden = {6};
  arch.classes = 3;
  arch.dropout = dropout;
  return arch;
}

inline torch::Tensor images(std::int64_t n, const ArchSpec& arch, Rng& rng, torch::Dtype dtype = torch::kFloat64) {
  return rng.uniform({n, arch.channels, arch.height, arch.width}, 0.0, 1.0, dtype);
}

inline torch::Tensor labels(std::int64_t n, std::int64_t classes, Rng& rng) {
  return rng.integers(0, classes, {n});
}

// Central finite differences over every parameter coordinate of `model`.
// `loss` must rebuild all randomness from a fixed seed on every call.
struct GradCheck {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double worst_coordinate = 0.0;
  double analytic_norm = 0.0;
};

inline GradCheck finite_difference(Classifier& model, const std::function<torch::Tensor(Classifier&)>& loss,
                                   double h = 1e-6) {
  for (auto& p : model->parameters()) p.mutable_grad() = torch::Tensor();
  loss(model).backward();
  std::vector<torch::Tensor> analytic_parts;
  for (auto& p : model->parameters()) {
    analytic_parts.push_back(p.grad().defined() ? p.grad().detach().flatten().clone()
                                                : torch::zeros({p.numel()}, p.options()));
  }
  const auto analytic = torch::cat(analytic_parts);
  const auto base = model->flat_parameters().detach();
  auto numeric = torch::zeros_like(base);
  // Losses that craft attacks need autograd on the inputs, so no global NoGradGuard here.
  const auto assign = [&](const torch::Tensor& values) {
    torch::NoGradGuard guard;
    model->set_flat_parameters(values);
  };
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    auto plus = base.clone();
    plus[i] += h;
    assign(plus);
    const double up = loss(model).item<double>();
    auto minus = base.clone();
    minus[i] -= h;
    assign(minus);
    const double down = loss(model).item<double>();
    numeric[i] = (up - down) / (2.0 * h);
  }
  assign(base);
  GradCheck out;
  const double an = analytic.norm().item<double>();
  const double nn = numeric.norm().item<double>();
  out.analytic_norm = an;
  out.relative_error = (analytic - numeric).norm().item<double>() / std::max({an, nn, 1e-12});
  out.worst_coordinate = (analytic - numeric).abs().max().item<double>();
  return out;
}

// Moves every parameter off its initial value. Zero-initialized biases put
// units fed by all-zero patches (padding, erasing) exactly on the ReLU kink,
// where finite differences and the subgradient legitimately disagree.
inline void jitter(Classifier& model, Rng& rng, double scale = 0.05) {
  torch::NoGradGuard guard;
  const auto flat = model->flat_parameters().detach();
  model->set_flat_parameters(flat + scale * rng.normal(flat.sizes(), flat.scalar_type()));
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("air-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int counter = 0;
    return counter;
  }
  std::filesystem::path path_;
};

// Synthetic digit-like pool: class c lights up a class-specific 3x3 block on a
// 28x28 canvas, plus faint noise. Separable, so training learns fast.
inline LabeledImages synthetic_pool(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  auto y = rng.integers(0, 10, {n});
  auto x = rng.uniform({n, 1, 28, 28}, 0.0, 0.15);
  auto acc = y.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto c = acc[i];
    const auto r = 3 + (c / 5) * 12;
    const auto col = 2 + (c % 5) * 5;
    x.index_put_({i, 0, torch::indexing::Slice(r, r + 8), torch::indexing::Slice(col, col + 3)}, 0.9);
  }
  return {x, y};
}

}  // namespace air::test

namespace air::test {

// Two-feature, two-class task: label = [x1 + x2 > 1], points within 0.1 of the
// boundary are dropped so the classes are separable with a margin.
inline TaskDataset separable_task(std::int64_t n, std::uint64_t seed, AttackSpec attack = AttackSpec::none(),
                                  int id = 1) {
  Rng rng(seed);
  auto x = rng.uniform({4 * n, 2}, 0.0, 1.0, torch::kFloat64);
  const auto s = x.sum(1) - 1.0;
  const auto keep = s.abs() > 0.1;
  x = x.index({keep}).slice(0, 0, 2 * n).contiguous();
  const auto y = (x.sum(1) > 1.0).to(torch::kInt64);
  TaskDataset task;
  task.id = id;
  task.name = "toy" + std::to_string(id);
  task.train_x = x.slice(0, 0, n);
  task.train_y = y.slice(0, 0, n);
  task.test_x = x.slice(0, n, 2 * n);
  task.test_y = y.slice(0, n, 2 * n);
  task.attack = attack;
  return task;
}

// Classification task on the synthetic digit pool for the given conv arch.
inline TaskDataset pool_task(std::int64_t train, std::int64_t test, std::uint64_t seed, AttackSpec attack,
                             int id = 1) {
  const auto pool = synthetic_pool(train + test, seed);
  TaskDataset task;
  task.id = id;
  task.name = "pool" + std::to_string(id);
  task.train_x = pool.x.slice(0, 0, train);
  task.train_y = pool.y.slice(0, 0, train);
  task.test_x = pool.x.slice(0, train, train + test);
  task.test_y = pool.y.slice(0, train, train + test);
  task.attack = attack;
  return task;
}

}  // namespace air::test
