#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "air/attacks.hpp"

namespace air {

// One attack task: labeled splits plus the attack that defines it.
struct TaskDataset {
  int id = 1;
  std::string name;
  torch::Tensor train_x;  // [N, C, H, W], float32 in [0,1]
  torch::Tensor train_y;  // [N], int64
  torch::Tensor val_x;    // may be empty
  torch::Tensor val_y;
  torch::Tensor test_x;
  torch::Tensor test_y;
  AttackSpec attack;

  [[nodiscard]] std::int64_t train_size() const { return train_x.defined() ? train_x.size(0) : 0; }
  [[nodiscard]] std::int64_t test_size() const { return test_x.defined() ? test_x.size(0) : 0; }
  [[nodiscard]] std::int64_t val_size() const { return val_x.defined() ? val_x.size(0) : 0; }
  void validate(std::int64_t classes) const;
};

struct AttackSequence {
  std::string name;
  std::vector<TaskDataset> tasks;

  void validate(std::int64_t classes) const;
};

struct LabeledImages {
  torch::Tensor x;  // [N, 1, H, W] float32 in [0,1]
  torch::Tensor y;  // [N] int64
};

// Reads an IDX image/label pair, gzip-compressed or raw.
LabeledImages read_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                    const LabeledImages& data);

// $AIR_DATA_DIR, else $XDG_CACHE_HOME/air-defense, else ~/.cache/air-defense.
std::filesystem::path default_data_root();

// Every image found under <root>/mnist (train and t10k files concatenated).
LabeledImages load_mnist_pool(const std::filesystem::path& root);

struct SplitSizes {
  std::int64_t train = 5000;
  std::int64_t validation = 0;
  std::int64_t test = 1000;
};

// Disjoint train/validation/test draws from the pool, shared by every task of
// the sequence; each task differs only in its attack.
AttackSequence build_sequence(const LabeledImages& pool, const SplitSizes& sizes,
                              const std::vector<std::pair<std::string, AttackSpec>>& attacks,
                              const std::string& name, std::uint64_t split_seed);

// Populates <root>/mnist from `source`: a directory of IDX files, an unpacked
// npm "mnist" package, or an http(s) URL prefix serving the IDX files.
// Returns the number of images written.
std::int64_t fetch_mnist(const std::string& source, const std::filesystem::path& root);

}  // namespace air
