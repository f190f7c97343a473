#include "air/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "air/errors.hpp"
#include "air/io.hpp"
#include "experiment_schema.inc"

namespace air {
namespace {

using nlohmann::json;

bool has_type(const json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  if (type == "integer") {
    if (value.is_number_integer()) return true;
    return value.is_number_float() && std::floor(value.get<double>()) == value.get<double>();
  }
  if (type == "number") return value.is_number();
  throw Error("schema: unsupported type '" + type + "'");
}

std::string describe(const json& value) {
  auto text = value.dump();
  if (text.size() > 40) text = text.substr(0, 37) + "...";
  return text;
}

void check(const json& value, const json& schema, const std::string& path) {
  if (auto it = schema.find("type"); it != schema.end()) {
    const auto types = it->is_array() ? it->get<std::vector<std::string>>() : std::vector{it->get<std::string>()};
    const bool ok = std::any_of(types.begin(), types.end(), [&](const auto& t) { return has_type(value, t); });
    if (!ok) {
      std::string expected;
      for (const auto& t : types) expected += (expected.empty() ? "" : " or ") + t;
      throw ConfigError(path, "expected " + expected + ", got " + describe(value));
    }
  }
  if (auto it = schema.find("enum"); it != schema.end()) {
    if (std::find(it->begin(), it->end(), value) == it->end()) {
      throw ConfigError(path, describe(value) + " is not one of " + it->dump());
    }
  }
  if (value.is_number()) {
    const double v = value.get<double>();
    if (auto it = schema.find("minimum"); it != schema.end() && v < it->get<double>()) {
      throw ConfigError(path, "must be >= " + it->dump());
    }
    if (auto it = schema.find("maximum"); it != schema.end() && v > it->get<double>()) {
      throw ConfigError(path, "must be <= " + it->dump());
    }
    if (auto it = schema.find("exclusiveMinimum"); it != schema.end() && v <= it->get<double>()) {
      throw ConfigError(path, "must be > " + it->dump());
    }
    if (auto it = schema.find("exclusiveMaximum"); it != schema.end() && v >= it->get<double>()) {
      throw ConfigError(path, "must be < " + it->dump());
    }
  }
  if (value.is_string()) {
    if (auto it = schema.find("minLength"); it != schema.end() && value.get<std::string>().size() < it->get<std::size_t>()) {
      throw ConfigError(path, "must not be empty");
    }
  }
  if (value.is_array()) {
    if (auto it = schema.find("minItems"); it != schema.end() && value.size() < it->get<std::size_t>()) {
      throw ConfigError(path, "needs at least " + it->dump() + " entries");
    }
    if (auto it = schema.find("maxItems"); it != schema.end() && value.size() > it->get<std::size_t>()) {
      throw ConfigError(path, "allows at most " + it->dump() + " entries");
    }
    if (auto it = schema.find("items"); it != schema.end()) {
      for (std::size_t i = 0; i < value.size(); ++i) check(value[i], *it, path + "[" + std::to_string(i) + "]");
    }
  }
  if (value.is_object()) {
    const auto props = schema.value("properties", json::object());
    if (auto it = schema.find("required"); it != schema.end()) {
      for (const auto& key : *it) {
        if (!value.contains(key.get<std::string>())) {
          throw ConfigError(path + "." + key.get<std::string>(), "required field is missing");
        }
      }
    }
    const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
    for (const auto& [key, child] : value.items()) {
      if (auto p = props.find(key); p != props.end()) {
        check(child, *p, path + "." + key);
      } else if (closed) {
        throw ConfigError(path + "." + key, "unknown field");
      }
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end() && !it->is_null()) out = it->get<T>();
}

json section(const json& doc, const char* key) { return doc.value(key, json::object()); }

AttackSpec parse_attack(const json& j, const std::string& path) {
  AttackSpec spec;
  spec.family = attack_family_from_string(j.at("family").get<std::string>());
  read(j, "epsilon", spec.epsilon);
  switch (spec.family) {
    case AttackFamily::kNone:
      spec = AttackSpec::none();
      break;
    case AttackFamily::kFgsm:
      if (!j.contains("epsilon")) throw ConfigError(path + ".epsilon", "required for fgsm");
      spec = AttackSpec::fgsm(spec.epsilon);
      break;
    case AttackFamily::kPgd: {
      if (!j.contains("epsilon")) throw ConfigError(path + ".epsilon", "required for pgd");
      // Unset step size follows the usual 2.5 * eps / K rule.
      spec.iterations = 10;
      read(j, "iterations", spec.iterations);
      spec.step_size = 2.5 * spec.epsilon / spec.iterations;
      read(j, "step_size", spec.step_size);
      spec.random_start = true;
      read(j, "random_start", spec.random_start);
      if (!(spec.step_size > 0.0)) throw ConfigError(path + ".step_size", "must be > 0 for pgd");
      break;
    }
  }
  return spec;
}

json attack_json(const AttackSpec& spec) {
  json j{{"family", to_string(spec.family)}};
  if (spec.family == AttackFamily::kNone) return j;
  j["epsilon"] = spec.epsilon;
  if (spec.family == AttackFamily::kPgd) {
    j["step_size"] = spec.step_size;
    j["iterations"] = spec.iterations;
    j["random_start"] = spec.random_start;
  }
  return j;
}

ArchSpec preset(const std::string& name, double dropout) {
  if (name == "small_cnn") return ArchSpec::small_cnn(dropout);
  if (name == "tiny_cnn") return ArchSpec::tiny_cnn(dropout);
  ArchSpec arch;
  arch.name = "custom";
  arch.dropout = dropout;
  return arch;
}

}  // namespace

std::vector<std::pair<std::string, AttackSpec>> ExperimentConfig::attacks() const {
  std::vector<std::pair<std::string, AttackSpec>> out;
  out.reserve(sequence.size());
  for (const auto& task : sequence) out.emplace_back(task.name, task.attack);
  return out;
}

const nlohmann::json& experiment_schema() {
  static const json schema = json::parse(kExperimentSchema);
  return schema;
}

void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema) { check(doc, schema, "$"); }

ExperimentConfig parse_config(const nlohmann::json& doc) {
  validate_against_schema(doc, experiment_schema());

  ExperimentConfig c;
  c.name = doc.at("name").get<std::string>();
  read(doc, "output_dir", c.output_dir);
  read(doc, "device", c.device);
  read(doc, "seed", c.training.seed);
  c.training.method = method_from_string(doc.at("method").get<std::string>());

  const auto dataset = section(doc, "dataset");
  read(dataset, "id", c.dataset_id);
  if (dataset.contains("root") && !dataset["root"].is_null()) c.data_root = dataset["root"].get<std::string>();
  read(dataset, "train_per_task", c.sizes.train);
  read(dataset, "validation_per_task", c.sizes.validation);
  read(dataset, "test_per_task", c.sizes.test);

  const auto model = section(doc, "model");
  read(model, "arch", c.arch_name);
  const double default_dropout = c.arch_name == "small_cnn" ? 0.1 : 0.0;
  c.arch = preset(c.arch_name, model.value("dropout", default_dropout));
  if (model.contains("input_shape")) {
    const auto shape = model["input_shape"].get<std::vector<std::int64_t>>();
    c.arch.channels = shape[0];
    c.arch.height = shape[1];
    c.arch.width = shape[2];
  }
  if (model.contains("conv")) {
    c.arch.conv.clear();
    for (const auto& layer : model["conv"]) {
      c.arch.conv.push_back({layer.at("out_channels").get<std::int64_t>(), layer.value("pool", false)});
    }
  }
  read(model, "hidden", c.arch.hidden);
  read(model, "classes", c.arch.classes);
  if (c.arch_name == "custom" && c.arch.hidden.empty() && c.arch.conv.empty()) {
    throw ConfigError("$.model", "custom architecture needs conv or hidden layers");
  }
  try {
    c.arch.validate();
  } catch (const Error& e) {
    throw ConfigError("$.model", e.what());
  }

  const auto& seq = doc.at("sequence");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto path = "$.sequence[" + std::to_string(i) + "].attack";
    c.sequence.push_back({seq[i].at("name").get<std::string>(), parse_attack(seq[i].at("attack"), path)});
  }

  auto& t = c.training;
  const auto training = section(doc, "training");
  read(training, "learning_rate", t.learning_rate);
  read(training, "momentum", t.momentum);
  read(training, "batch_size", t.batch_size);
  read(training, "epochs", t.epochs);
  read(training, "rdrop_at_probability", t.rdrop_at_probability);
  read(training, "rdrop_at_weight", t.rdrop_at_weight);
  read(training, "epsilon_warmup", t.epsilon_warmup);

  const auto air = section(doc, "air");
  read(air, "lambda_sd", t.weights.sd);
  read(air, "lambda_reg", t.weights.reg);
  read(air, "enable_ir", t.enable_ir);
  read(air, "enable_ar", t.enable_ar);
  read(air, "enable_reg", t.enable_reg);
  if (air.contains("ar_label_strategy")) t.ar_labels = ar_label_strategy_from_string(air["ar_label_strategy"]);

  const auto aug = section(doc, "augmentation");
  if (aug.contains("noise_scale") && !aug["noise_scale"].is_null()) {
    t.augmentation.noise_scale = aug["noise_scale"].get<double>();
  }
  read(aug, "rotation_degrees", t.augmentation.rotation_degrees);
  read(aug, "crop_padding", t.augmentation.crop_padding);
  read(aug, "flip_probability", t.augmentation.flip_probability);
  read(aug, "erase_probability", t.augmentation.erase_probability);
  read(aug, "erase_max_fraction", t.augmentation.erase_max_fraction);

  const auto baselines = section(doc, "baselines");
  read(baselines, "ewc_strength", t.ewc_strength);
  read(baselines, "lfl_strength", t.lfl_strength);
  read(baselines, "fisher_samples", t.fisher_samples);

  const auto evaluation = section(doc, "evaluation");
  read(evaluation, "test_samples", c.evaluation.test_samples);
  read(evaluation, "monitor_samples", t.monitor_samples);
  read(evaluation, "export_features", c.evaluation.export_features);
  read(evaluation, "feature_samples", c.evaluation.feature_samples);

  t.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("$", path.string() + ": invalid JSON: " + e.what());
  }
  return parse_config(doc);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& t = c.training;
  json seq = json::array();
  for (const auto& task : c.sequence) seq.push_back({{"name", task.name}, {"attack", attack_json(task.attack)}});
  json conv = json::array();
  for (const auto& layer : c.arch.conv) conv.push_back({{"out_channels", layer.out_channels}, {"pool", layer.pool}});
  json doc{
      {"name", c.name},
      {"seed", t.seed},
      {"method", to_string(t.method)},
      {"device", c.device},
      {"dataset",
       {{"id", c.dataset_id},
        {"root", c.data_root ? json(c.data_root->string()) : json(nullptr)},
        {"train_per_task", c.sizes.train},
        {"validation_per_task", c.sizes.validation},
        {"test_per_task", c.sizes.test}}},
      {"model",
       {{"arch", c.arch_name},
        {"dropout", c.arch.dropout},
        {"input_shape", {c.arch.channels, c.arch.height, c.arch.width}},
        {"conv", conv},
        {"hidden", c.arch.hidden},
        {"classes", c.arch.classes}}},
      {"sequence", seq},
      {"training",
       {{"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"rdrop_at_probability", t.rdrop_at_probability},
        {"rdrop_at_weight", t.rdrop_at_weight},
        {"epsilon_warmup", t.epsilon_warmup}}},
      {"air",
       {{"lambda_sd", t.weights.sd},
        {"lambda_reg", t.weights.reg},
        {"enable_ir", t.enable_ir},
        {"enable_ar", t.enable_ar},
        {"enable_reg", t.enable_reg},
        {"ar_label_strategy", to_string(t.ar_labels)}}},
      {"augmentation",
       {{"noise_scale", t.augmentation.noise_scale ? json(*t.augmentation.noise_scale) : json(nullptr)},
        {"rotation_degrees", t.augmentation.rotation_degrees},
        {"crop_padding", t.augmentation.crop_padding},
        {"flip_probability", t.augmentation.flip_probability},
        {"erase_probability", t.augmentation.erase_probability},
        {"erase_max_fraction", t.augmentation.erase_max_fraction}}},
      {"baselines",
       {{"ewc_strength", t.ewc_strength}, {"lfl_strength", t.lfl_strength}, {"fisher_samples", t.fisher_samples}}},
      {"evaluation",
       {{"test_samples", c.evaluation.test_samples},
        {"monitor_samples", t.monitor_samples},
        {"export_features", c.evaluation.export_features},
        {"feature_samples", c.evaluation.feature_samples}}},
  };
  if (!c.output_dir.empty()) doc["output_dir"] = c.output_dir;
  return doc;
}

}  // namespace air
