#include "air/data.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <regex>

#include <nlohmann/json.hpp>

#include "air/errors.hpp"
#include "air/io.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

namespace air {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

const char* const kIdxFiles[][2] = {
    {"train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
    {"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"},
};

// gzread passes uncompressed files through unchanged.
std::string read_maybe_gzip(const fs::path& path) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) throw DataError("cannot open " + path.string());
  std::string out;
  char buffer[1 << 16];
  int n = 0;
  while ((n = gzread(file, buffer, sizeof(buffer))) > 0) out.append(buffer, static_cast<std::size_t>(n));
  const bool failed = n < 0;
  gzclose(file);
  if (failed) throw DataError("corrupt gzip stream in " + path.string());
  return out;
}

void write_gzip(const fs::path& path, const std::string& contents) {
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".partial";
  gzFile file = gzopen(tmp.c_str(), "wb9");
  if (file == nullptr) throw DataError("cannot write " + tmp.string());
  const int written = gzwrite(file, contents.data(), static_cast<unsigned>(contents.size()));
  gzclose(file);
  if (written != static_cast<int>(contents.size())) throw DataError("short write to " + tmp.string());
  fs::rename(tmp, path);
}

std::uint32_t read_be32(const std::string& blob, std::size_t offset, const fs::path& path) {
  if (offset + 4 > blob.size()) throw DataError(path.string() + ": truncated IDX header");
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data() + offset);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

void append_be32(std::string& blob, std::uint32_t value) {
  for (int shift = 24; shift >= 0; shift -= 8) blob.push_back(static_cast<char>((value >> shift) & 0xff));
}

fs::path find_variant(const fs::path& dir, const std::string& stem) {
  for (const auto* suffix : {".gz", ""}) {
    auto candidate = dir / (stem + suffix);
    if (fs::exists(candidate)) return candidate;
  }
  return {};
}

LabeledImages concat(std::vector<LabeledImages> parts) {
  std::vector<torch::Tensor> xs;
  std::vector<torch::Tensor> ys;
  for (auto& part : parts) {
    xs.push_back(part.x);
    ys.push_back(part.y);
  }
  return {torch::cat(xs), torch::cat(ys)};
}

LabeledImages read_npm_package(const fs::path& digits_dir) {
  std::vector<LabeledImages> parts;
  for (int digit = 0; digit < 10; ++digit) {
    const auto path = digits_dir / (std::to_string(digit) + ".json");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    const auto values = doc.at("data").get<std::vector<double>>();
    if (values.size() % 784 != 0) throw DataError(path.string() + ": pixel count is not a multiple of 784");
    const auto n = static_cast<std::int64_t>(values.size() / 784);
    // Stored as 3-decimal fractions of 255; recover the original bytes.
    auto x = (torch::tensor(values, torch::kFloat64) * 255.0).round().div(255.0).to(torch::kFloat32);
    parts.push_back({x.view({n, 1, 28, 28}), torch::full({n}, digit, torch::kInt64)});
  }
  return concat(std::move(parts));
}

std::string http_get(const std::string& url) {
  static const std::regex pattern(R"(^(https?://[^/]+)(/.*)$)");
  std::smatch match;
  if (!std::regex_match(url, match, pattern)) throw DataError("malformed URL " + url);
  httplib::Client client(match[1].str());
  client.set_follow_location(true);
  client.set_connection_timeout(30);
  client.set_read_timeout(120);
  auto response = client.Get(match[2].str());
  if (!response) throw DataError("download failed for " + url + ": " + httplib::to_string(response.error()));
  if (response->status != 200) throw DataError("download failed for " + url + ": HTTP " + std::to_string(response->status));
  return response->body;
}

}  // namespace

void TaskDataset::validate(std::int64_t classes) const {
  if (train_size() < 1) throw InputError("task " + std::to_string(id) + ": empty training split");
  auto check_labels = [&](const torch::Tensor& y) {
    if (!y.defined() || y.numel() == 0) return;
    if (y.min().item<std::int64_t>() < 0 || y.max().item<std::int64_t>() >= classes) {
      throw InputError("task " + std::to_string(id) + ": labels outside [0, " + std::to_string(classes) + ")");
    }
  };
  check_labels(train_y);
  check_labels(val_y);
  check_labels(test_y);
  attack.validate();
}

void AttackSequence::validate(std::int64_t classes) const {
  if (tasks.empty()) throw InputError("attack sequence '" + name + "' is empty");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i > 0 && tasks[i].id <= tasks[i - 1].id) throw InputError("task ids must be strictly increasing");
    tasks[i].validate(classes);
  }
}

LabeledImages read_idx_pair(const fs::path& images, const fs::path& labels) {
  const auto image_blob = read_maybe_gzip(images);
  const auto label_blob = read_maybe_gzip(labels);
  if (read_be32(image_blob, 0, images) != kImageMagic) throw DataError(images.string() + ": bad IDX image magic");
  if (read_be32(label_blob, 0, labels) != kLabelMagic) throw DataError(labels.string() + ": bad IDX label magic");
  const auto n = static_cast<std::int64_t>(read_be32(image_blob, 4, images));
  const auto rows = static_cast<std::int64_t>(read_be32(image_blob, 8, images));
  const auto cols = static_cast<std::int64_t>(read_be32(image_blob, 12, images));
  if (static_cast<std::int64_t>(read_be32(label_blob, 4, labels)) != n) {
    throw DataError(labels.string() + ": label count does not match " + images.filename().string());
  }
  if (image_blob.size() != static_cast<std::size_t>(16 + n * rows * cols)) {
    throw DataError(images.string() + ": payload size does not match header");
  }
  if (label_blob.size() != static_cast<std::size_t>(8 + n)) throw DataError(labels.string() + ": bad payload size");

  auto pixels = torch::empty({n, 1, rows, cols}, torch::kUInt8);
  std::memcpy(pixels.data_ptr<std::uint8_t>(), image_blob.data() + 16, static_cast<std::size_t>(n * rows * cols));
  auto y = torch::empty({n}, torch::kUInt8);
  std::memcpy(y.data_ptr<std::uint8_t>(), label_blob.data() + 8, static_cast<std::size_t>(n));
  return {pixels.to(torch::kFloat32).div(255.0), y.to(torch::kInt64)};
}

void write_idx_pair(const fs::path& images, const fs::path& labels, const LabeledImages& data) {
  const auto n = data.x.size(0);
  const auto rows = data.x.size(2);
  const auto cols = data.x.size(3);
  std::string image_blob;
  append_be32(image_blob, kImageMagic);
  append_be32(image_blob, static_cast<std::uint32_t>(n));
  append_be32(image_blob, static_cast<std::uint32_t>(rows));
  append_be32(image_blob, static_cast<std::uint32_t>(cols));
  const auto bytes = (data.x * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  image_blob.append(reinterpret_cast<const char*>(bytes.data_ptr<std::uint8_t>()), static_cast<std::size_t>(bytes.numel()));
  std::string label_blob;
  append_be32(label_blob, kLabelMagic);
  append_be32(label_blob, static_cast<std::uint32_t>(n));
  const auto label_bytes = data.y.to(torch::kUInt8).contiguous();
  label_blob.append(reinterpret_cast<const char*>(label_bytes.data_ptr<std::uint8_t>()), static_cast<std::size_t>(n));
  write_gzip(images, image_blob);
  write_gzip(labels, label_blob);
}

fs::path default_data_root() {
  if (const char* dir = std::getenv("AIR_DATA_DIR"); dir != nullptr && *dir != '\0') return dir;
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg != nullptr && *xdg != '\0') {
    return fs::path(xdg) / "air-defense";
  }
  if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0') {
    return fs::path(home) / ".cache" / "air-defense";
  }
  return fs::path(".air-defense-cache");
}

LabeledImages load_mnist_pool(const fs::path& root) {
  const auto dir = root / "mnist";
  std::vector<LabeledImages> parts;
  for (const auto& pair : kIdxFiles) {
    const auto images = find_variant(dir, pair[0]);
    const auto labels = find_variant(dir, pair[1]);
    if (!images.empty() && !labels.empty()) parts.push_back(read_idx_pair(images, labels));
  }
  if (parts.empty()) {
    throw DataError("no MNIST IDX files under " + dir.string() + " (run `airctl fetch-data` first)");
  }
  return concat(std::move(parts));
}

AttackSequence build_sequence(const LabeledImages& pool, const SplitSizes& sizes,
                              const std::vector<std::pair<std::string, AttackSpec>>& attacks,
                              const std::string& name, std::uint64_t split_seed) {
  const auto available = pool.x.size(0);
  const auto needed = sizes.train + sizes.validation + sizes.test;
  if (sizes.train < 1 || sizes.test < 1 || sizes.validation < 0) {
    throw ConfigError("dataset", "split sizes must be positive");
  }
  if (needed > available) {
    throw DataError("dataset has " + std::to_string(available) + " images, split needs " + std::to_string(needed));
  }
  Rng rng(split_seed);
  const auto order = rng.permutation(available);
  auto take = [&](std::int64_t begin, std::int64_t count) {
    const auto idx = order.slice(0, begin, begin + count);
    return LabeledImages{pool.x.index_select(0, idx).contiguous(), pool.y.index_select(0, idx).contiguous()};
  };
  const auto train = take(0, sizes.train);
  const auto val = take(sizes.train, sizes.validation);
  const auto test = take(sizes.train + sizes.validation, sizes.test);

  AttackSequence seq;
  seq.name = name;
  int id = 1;
  for (const auto& [task_name, spec] : attacks) {
    TaskDataset task;
    task.id = id++;
    task.name = task_name;
    task.train_x = train.x;
    task.train_y = train.y;
    task.val_x = val.x;
    task.val_y = val.y;
    task.test_x = test.x;
    task.test_y = test.y;
    task.attack = spec;
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

std::int64_t fetch_mnist(const std::string& source, const fs::path& root) {
  const auto target = root / "mnist";
  std::vector<LabeledImages> parts;
  if (source.starts_with("http://") || source.starts_with("https://")) {
    const std::string prefix = source.ends_with("/") ? source : source + "/";
    for (const auto& pair : kIdxFiles) {
      for (int k = 0; k < 2; ++k) {
        const auto body = http_get(prefix + pair[k] + ".gz");
        const auto tmp = target / (std::string(pair[k]) + ".download.gz");
        write_file_atomic(tmp, body);
      }
      parts.push_back(read_idx_pair(target / (std::string(pair[0]) + ".download.gz"),
                                    target / (std::string(pair[1]) + ".download.gz")));
      fs::remove(target / (std::string(pair[0]) + ".download.gz"));
      fs::remove(target / (std::string(pair[1]) + ".download.gz"));
      write_idx_pair(target / (std::string(pair[0]) + ".gz"), target / (std::string(pair[1]) + ".gz"), parts.back());
    }
  } else {
    const fs::path dir(source);
    if (!fs::is_directory(dir)) throw DataError("fetch-data source " + source + " is not a directory or URL");
    const auto npm_digits = fs::exists(dir / "src" / "digits" / "0.json") ? dir / "src" / "digits"
                            : fs::exists(dir / "0.json")                   ? dir
                                                                           : fs::path{};
    if (!npm_digits.empty()) {
      parts.push_back(read_npm_package(npm_digits));
      write_idx_pair(target / "train-images-idx3-ubyte.gz", target / "train-labels-idx1-ubyte.gz", parts.back());
    } else {
      for (const auto& pair : kIdxFiles) {
        const auto images = find_variant(dir, pair[0]);
        const auto labels = find_variant(dir, pair[1]);
        if (images.empty() || labels.empty()) continue;
        parts.push_back(read_idx_pair(images, labels));
        write_idx_pair(target / (std::string(pair[0]) + ".gz"), target / (std::string(pair[1]) + ".gz"), parts.back());
      }
    }
  }
  if (parts.empty()) throw DataError("no MNIST data found at " + source);
  std::int64_t total = 0;
  for (const auto& part : parts) total += part.x.size(0);
  return total;
}

}  // namespace air
