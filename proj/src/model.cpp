#include "air/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "air/errors.hpp"
#include "air/io.hpp"

namespace air {

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'I', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

}  // namespace

std::int64_t ArchSpec::flat_width() const {
  std::int64_t h = height;
  std::int64_t w = width;
  std::int64_t c = channels;
  for (const auto& layer : conv) {
    c = layer.out_channels;
    if (layer.pool) {
      h /= 2;
      w /= 2;
    }
  }
  return c * h * w;
}

std::int64_t ArchSpec::penultimate_width() const {
  return hidden.empty() ? flat_width() : hidden.back();
}

void ArchSpec::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw InputError("architecture: input shape must be positive");
  if (classes < 2) throw InputError("architecture: at least two classes required");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("architecture: dropout must lie in [0, 1)");
  std::int64_t h = height;
  std::int64_t w = width;
  for (const auto& layer : conv) {
    if (layer.out_channels < 1) throw InputError("architecture: conv channels must be positive");
    if (layer.pool) {
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) throw InputError("architecture: too many pooling stages for the input size");
    }
  }
  for (auto width_i : hidden) {
    if (width_i < 1) throw InputError("architecture: hidden widths must be positive");
  }
}

ArchSpec ArchSpec::small_cnn(double dropout) {
  ArchSpec arch;
  arch.name = "small_cnn";
  arch.conv = {{8, false}, {8, true}, {16, false}, {16, true}};
  arch.hidden = {64, 64};
  arch.classes = 10;
  arch.dropout = dropout;
  return arch;
}

ArchSpec ArchSpec::tiny_cnn(double dropout) {
  ArchSpec arch;
  arch.name = "tiny_cnn";
  arch.conv = {{4, true}, {8, true}};
  arch.hidden = {32};
  arch.classes = 10;
  arch.dropout = dropout;
  return arch;
}

ArchSpec ArchSpec::mlp(std::int64_t features, std::vector<std::int64_t> hidden, std::int64_t classes,
                       double dropout) {
  ArchSpec arch;
  arch.name = "mlp";
  arch.channels = 1;
  arch.height = 1;
  arch.width = features;
  arch.hidden = std::move(hidden);
  arch.classes = classes;
  arch.dropout = dropout;
  return arch;
}

void to_json(nlohmann::json& j, const ArchSpec& arch) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& layer : arch.conv) conv.push_back({{"out_channels", layer.out_channels}, {"pool", layer.pool}});
  j = {{"name", arch.name},
       {"input_shape", {arch.channels, arch.height, arch.width}},
       {"conv", conv},
       {"hidden", arch.hidden},
       {"classes", arch.classes},
       {"dropout", arch.dropout}};
}

void from_json(const nlohmann::json& j, ArchSpec& arch) {
  arch.name = j.at("name").get<std::string>();
  const auto& shape = j.at("input_shape");
  if (!shape.is_array() || shape.size() != 3) throw InputError("architecture: input_shape must have 3 entries");
  arch.channels = shape[0].get<std::int64_t>();
  arch.height = shape[1].get<std::int64_t>();
  arch.width = shape[2].get<std::int64_t>();
  arch.conv.clear();
  for (const auto& layer : j.at("conv")) {
    arch.conv.push_back({layer.at("out_channels").get<std::int64_t>(), layer.at("pool").get<bool>()});
  }
  arch.hidden = j.at("hidden").get<std::vector<std::int64_t>>();
  arch.classes = j.at("classes").get<std::int64_t>();
  arch.dropout = j.at("dropout").get<double>();
}

ClassifierImpl::ClassifierImpl(ArchSpec arch) : arch_(std::move(arch)) {
  arch_.validate();
  reset();
}

void ClassifierImpl::reset() {
  conv_.clear();
  dense_.clear();
  std::int64_t in_channels = arch_.channels;
  for (std::size_t i = 0; i < arch_.conv.size(); ++i) {
    auto layer = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_channels, arch_.conv[i].out_channels, 3).stride(1).padding(1));
    conv_.push_back(register_module("conv" + std::to_string(i), layer));
    in_channels = arch_.conv[i].out_channels;
  }
  std::int64_t in_features = arch_.flat_width();
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    dense_.push_back(register_module("dense" + std::to_string(i),
                                     torch::nn::Linear(in_features, arch_.hidden[i])));
    in_features = arch_.hidden[i];
  }
  dense_.push_back(register_module("head", torch::nn::Linear(in_features, arch_.classes)));
}

torch::Dtype ClassifierImpl::dtype() const {
  return dense_.back()->weight.scalar_type();
}

std::int64_t ClassifierImpl::parameter_count() const {
  std::int64_t count = 0;
  for (const auto& p : parameters()) count += p.numel();
  return count;
}

torch::Tensor ClassifierImpl::check_input(const torch::Tensor& x) const {
  const bool image_ok = x.dim() == 4 && x.size(1) == arch_.channels && x.size(2) == arch_.height &&
                        x.size(3) == arch_.width;
  const bool flat_ok = arch_.conv.empty() && x.dim() == 2 && x.size(1) == arch_.input_size();
  if (!image_ok && !flat_ok) {
    throw InputError("forward: input shape " + std::string(c10::str(x.sizes())) + " does not match [B, " +
                     std::to_string(arch_.channels) + ", " + std::to_string(arch_.height) + ", " +
                     std::to_string(arch_.width) + "]");
  }
  if (x.scalar_type() != dtype()) return x.to(dtype());
  return x;
}

torch::Tensor ClassifierImpl::trunk(const torch::Tensor& input, const DropoutMasks* masks) {
  auto h = check_input(input);
  if (!conv_.empty()) {
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      h = torch::relu(conv_[i]->forward(h));
      if (arch_.conv[i].pool) h = torch::max_pool2d(h, 2);
    }
  }
  h = h.flatten(1);
  for (std::size_t i = 0; i + 1 < dense_.size(); ++i) {
    if (masks != nullptr) h = h * masks->masks[i];
    h = torch::relu(dense_[i]->forward(h));
  }
  return h;
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& x) {
  return dense_.back()->forward(trunk(x, nullptr));
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& x, Rng& rng) {
  if (arch_.dropout <= 0.0) return forward(x);
  const auto masks = sample_masks(x.size(0), rng);
  return forward(x, masks);
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& x, const DropoutMasks& masks) {
  if (masks.masks.size() != dense_.size()) throw InputError("forward: dropout mask count mismatch");
  auto h = trunk(x, &masks);
  return dense_.back()->forward(h * masks.masks.back());
}

torch::Tensor ClassifierImpl::features(const torch::Tensor& x) { return trunk(x, nullptr); }

DropoutMasks ClassifierImpl::sample_masks(std::int64_t batch, Rng& rng) const {
  DropoutMasks out;
  const double keep = 1.0 - arch_.dropout;
  const auto opts = torch::TensorOptions().dtype(dtype());
  for (const auto& layer : dense_) {
    const auto width = layer->weight.size(1);
    if (arch_.dropout <= 0.0) {
      out.masks.push_back(torch::ones({batch, width}, opts));
    } else {
      auto keep_prob = torch::full({batch, width}, keep, opts);
      out.masks.push_back(torch::bernoulli(keep_prob, rng.generator()) / keep);
    }
  }
  return out;
}

torch::Tensor ClassifierImpl::flat_parameters() const {
  std::vector<torch::Tensor> flat;
  for (const auto& p : parameters()) flat.push_back(p.detach().reshape(-1));
  return torch::cat(flat).clone();
}

void ClassifierImpl::set_flat_parameters(const torch::Tensor& flat) {
  if (flat.dim() != 1 || flat.numel() != parameter_count()) {
    throw InputError("set_flat_parameters: expected " + std::to_string(parameter_count()) + " values");
  }
  torch::NoGradGuard no_grad;
  std::int64_t offset = 0;
  for (auto& p : parameters()) {
    const auto n = p.numel();
    p.copy_(flat.slice(0, offset, offset + n).view_as(p));
    offset += n;
  }
}

std::vector<torch::Tensor> ClassifierImpl::head_parameters() const {
  return dense_.back()->parameters();
}

std::vector<torch::Tensor> ClassifierImpl::body_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& layer : conv_) {
    for (const auto& p : layer->parameters()) out.push_back(p);
  }
  for (std::size_t i = 0; i + 1 < dense_.size(); ++i) {
    for (const auto& p : dense_[i]->parameters()) out.push_back(p);
  }
  return out;
}

Classifier make_classifier(const ArchSpec& arch, Rng& rng, torch::Dtype dtype) {
  Classifier model(arch);
  model->to(dtype);
  torch::NoGradGuard no_grad;
  for (auto& item : model->named_parameters()) {
    auto& p = item.value();
    if (item.key().ends_with(".bias")) {
      p.zero_();
      continue;
    }
    const auto fan_in = p.numel() / p.size(0);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    p.copy_(rng.normal(p.sizes(), dtype) * stddev);
  }
  return model;
}

ModelSnapshot::ModelSnapshot(const Classifier& live, int task_index)
    : model_(std::dynamic_pointer_cast<ClassifierImpl>(live->clone())), task_index_(task_index) {
  for (auto& p : model_->parameters()) p.requires_grad_(false);
  model_->eval();
}

torch::Tensor ModelSnapshot::forward(const torch::Tensor& x) const {
  torch::NoGradGuard no_grad;
  return model_->forward(x.detach());
}

torch::Tensor ModelSnapshot::features(const torch::Tensor& x) const {
  torch::NoGradGuard no_grad;
  return model_->features(x.detach());
}

std::vector<std::pair<std::string, torch::Tensor>> ModelSnapshot::named_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : model_->named_parameters()) out.emplace_back(item.key(), item.value());
  return out;
}

Classifier ModelSnapshot::to_classifier() const {
  auto copy = std::dynamic_pointer_cast<ClassifierImpl>(model_->clone());
  for (auto& p : copy->parameters()) p.requires_grad_(true);
  copy->train();
  return Classifier(copy);
}

ModelSnapshot snapshot(const Classifier& model, int task_index) { return ModelSnapshot(model, task_index); }

void save_checkpoint(const std::filesystem::path& path, const ModelSnapshot& snap) {
  nlohmann::json header;
  header["arch"] = snap.arch();
  header["task_index"] = snap.task_index();
  header["dtype"] = snap.dtype() == torch::kFloat64 ? "float64" : "float32";
  header["payload"] = "float64";
  header["tensors"] = nlohmann::json::array();
  const auto params = snap.named_parameters();
  for (const auto& [name, tensor] : params) {
    header["tensors"].push_back({{"name", name}, {"shape", tensor.sizes().vec()}});
  }
  const std::string header_text = header.dump();

  std::string blob;
  blob.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  blob.append(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t header_len = header_text.size();
  blob.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  blob += header_text;
  for (const auto& [name, tensor] : params) {
    const auto values = tensor.detach().to(torch::kFloat64).contiguous();
    blob.append(reinterpret_cast<const char*>(values.data_ptr<double>()),
                static_cast<std::size_t>(values.numel()) * sizeof(double));
  }
  write_file_atomic(path, blob);
}

ModelSnapshot load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  std::size_t offset = 0;
  auto take = [&](std::size_t n) {
    if (offset + n > blob.size()) throw DataError(path.string() + ": truncated checkpoint");
    const char* p = blob.data() + offset;
    offset += n;
    return p;
  };
  if (std::memcmp(take(sizeof(kCheckpointMagic)), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, take(sizeof(version)), sizeof(version));
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, take(sizeof(header_len)), sizeof(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string_view(take(header_len), header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }

  const auto arch = header.at("arch").get<ArchSpec>();
  Classifier model(arch);
  model->to(torch::kFloat64);
  auto named = model->named_parameters();
  const auto& table = header.at("tensors");
  if (table.size() != named.size()) throw DataError(path.string() + ": tensor table does not match architecture");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<std::vector<std::int64_t>>();
    auto* target = named.find(name);
    if (target == nullptr || target->sizes().vec() != shape) {
      throw DataError(path.string() + ": unexpected tensor " + name);
    }
    const auto n = static_cast<std::size_t>(target->numel());
    std::vector<double> values(n);
    std::memcpy(values.data(), take(n * sizeof(double)), n * sizeof(double));
    target->copy_(torch::from_blob(values.data(), target->sizes(), torch::kFloat64));
  }
  if (offset != blob.size()) throw DataError(path.string() + ": trailing bytes after checkpoint payload");
  if (header.value("dtype", "float64") == "float32") model->to(torch::kFloat32);
  return ModelSnapshot(model, header.at("task_index").get<int>());
}

}  // namespace air
