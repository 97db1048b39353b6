#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dnpg/checkpoint.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/engine.hpp"
#include "dnpg/error.hpp"
#include "dnpg/eval.hpp"
#include "dnpg/openweights.hpp"

namespace dnpg {

struct DatasetConfig {
  int num_classes = 60;
  int dim = 16;
  int samples_per_class = 100;
  double sigma = 0.15;
  std::uint64_t seed = 7;
  int base = 40;
  int novel = 10;
  int unknown = 10;
};

struct RunConfig {
  DatasetConfig dataset;
  EncoderConfig encoder;
  int ways = 5;
  int shots = 1;
  int queries = 15;
  ModelConfig model;
  AblationFlags flags;
  PretrainConfig pretrain;
  OpenWeightConfig openweights;
  MetaTrainConfig metatrain;
  EvalConfig evaluate;
  double collapse_threshold = 0.99;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  // Copies the shared episode shape into the stage configs.
  [[nodiscard]] MetaTrainConfig meta_config() const {
    MetaTrainConfig c = metatrain;
    c.ways = ways, c.shots = shots, c.queries = queries;
    return c;
  }
  [[nodiscard]] EvalConfig eval_config() const {
    EvalConfig c = evaluate;
    c.ways = ways, c.shots = shots, c.queries = queries;
    return c;
  }
  [[nodiscard]] ClassSplit split() const { return make_contiguous_split(dataset.base, dataset.novel, dataset.unknown); }
};

// Checks the cross-field invariants; throws ConfigError.
inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  const auto& d = c.dataset;
  need(d.num_classes >= 4 && d.dim >= 2 && d.samples_per_class >= 1 && d.sigma > 0.0, "dataset: invalid sizes");
  need(d.base >= 1 && d.novel >= 1 && d.unknown >= 1, "dataset: every split needs at least one class");
  need(d.base + d.novel + d.unknown <= d.num_classes, "dataset: split sizes exceed num_classes");
  need(c.encoder.input_dim == d.dim, "encoder: input_dim must equal dataset dim");
  need(c.encoder.hidden_dim >= 1 && c.encoder.embed_dim >= 1, "encoder: dimensions must be positive");
  need(c.ways >= 1 && c.shots >= 1 && c.queries >= 1, "episode: ways, shots and queries must be positive");
  need(d.base >= 2 * c.ways, "episode: base split needs 2 * ways classes");
  need(d.novel >= c.ways && d.unknown >= c.ways, "episode: novel and unknown pools need ways classes each");
  need(c.shots + c.queries <= d.samples_per_class, "episode: shots + queries exceed samples per class");
  need(c.model.num_generators >= 1, "model: num_generators must be >= 1");
  need(c.model.tau1 > 0.0 && c.model.tau2 > 0.0, "model: temperatures must be positive");
  need(c.model.gcn_self_weight >= 0.0 && c.model.gcn_self_weight <= 1.0, "model: gcn_self_weight must lie in [0, 1]");
  need(c.metatrain.weights.alpha >= 0.0 && c.metatrain.weights.beta >= 0.0 && c.metatrain.weights.gamma >= 0.0,
       "loss: alpha, beta and gamma must be >= 0");
  need(c.pretrain.epochs >= 0 && c.pretrain.batch_size >= 1 && c.pretrain.lr >= 0.0, "pretrain: invalid schedule");
  need(c.openweights.epochs >= 0 && c.openweights.batch_size >= 1 && c.openweights.lr >= 0.0, "openweights: invalid schedule");
  need(c.metatrain.steps >= 0 && c.metatrain.lr >= 0.0 && c.metatrain.encoder_lr_ratio >= 0.0, "metatrain: invalid schedule");
  need(c.evaluate.episodes >= 1 && c.evaluate.workers >= 1, "evaluate: episodes and workers must be >= 1");
  need(c.collapse_threshold > -1.0 && c.collapse_threshold <= 1.0, "evaluate: collapse_threshold must lie in (-1, 1]");
  try {
    ablation_row(c.flags);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("ablation: ") + e.what());
  }
  if (c.flags.ec) need(c.model.num_generators >= 2, "ablation: ec needs at least 2 generators");
}

namespace detail {

// One binding per accepted key: reads the string form into the field and
// writes the field back out for the canonical form.
struct KeyBinding {
  std::function<void(const std::string&)> read;
  std::function<nlohmann::json()> write;
};

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
  } else if constexpr (std::is_same_v<T, std::string>) {
    std::string s = text;
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
  } else {
    in >> v;
    if (in.fail() || !in.eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
  }
}

template <class T>
KeyBinding bind_key(const std::string& key, T& field) {
  return {[&field, key](const std::string& text) { field = parse_value<T>(key, text); },
          [&field]() { return nlohmann::json(field); }};
}

inline std::map<std::string, KeyBinding> bindings(RunConfig& c) {
  std::map<std::string, KeyBinding> b;
  b.emplace("run.seed", bind_key("run.seed", c.seed));
  b.emplace("run.out", bind_key("run.out", c.out));
  b.emplace("dataset.num_classes", bind_key("dataset.num_classes", c.dataset.num_classes));
  b.emplace("dataset.dim", bind_key("dataset.dim", c.dataset.dim));
  b.emplace("dataset.samples_per_class", bind_key("dataset.samples_per_class", c.dataset.samples_per_class));
  b.emplace("dataset.sigma", bind_key("dataset.sigma", c.dataset.sigma));
  b.emplace("dataset.seed", bind_key("dataset.seed", c.dataset.seed));
  b.emplace("dataset.base", bind_key("dataset.base", c.dataset.base));
  b.emplace("dataset.novel", bind_key("dataset.novel", c.dataset.novel));
  b.emplace("dataset.unknown", bind_key("dataset.unknown", c.dataset.unknown));
  b.emplace("encoder.hidden_dim", bind_key("encoder.hidden_dim", c.encoder.hidden_dim));
  b.emplace("encoder.embed_dim", bind_key("encoder.embed_dim", c.encoder.embed_dim));
  b.emplace("episode.ways", bind_key("episode.ways", c.ways));
  b.emplace("episode.shots", bind_key("episode.shots", c.shots));
  b.emplace("episode.queries", bind_key("episode.queries", c.queries));
  b.emplace("model.num_generators", bind_key("model.num_generators", c.model.num_generators));
  b.emplace("model.tau1", bind_key("model.tau1", c.model.tau1));
  b.emplace("model.tau2", bind_key("model.tau2", c.model.tau2));
  b.emplace("model.gcn_self_weight", bind_key("model.gcn_self_weight", c.model.gcn_self_weight));
  b.emplace("model.rpc_init_stddev", bind_key("model.rpc_init_stddev", c.model.rpc_init_stddev));
  b.emplace("model.rpc_identity_scale", bind_key("model.rpc_identity_scale", c.model.rpc_identity_scale));
  b.emplace("ablation.rpc", bind_key("ablation.rpc", c.flags.rpc));
  b.emplace("ablation.mng", bind_key("ablation.mng", c.flags.mng));
  b.emplace("ablation.ct", bind_key("ablation.ct", c.flags.ct));
  b.emplace("ablation.sa", bind_key("ablation.sa", c.flags.sa));
  b.emplace("ablation.ec", bind_key("ablation.ec", c.flags.ec));
  b.emplace("loss.alpha", bind_key("loss.alpha", c.metatrain.weights.alpha));
  b.emplace("loss.beta", bind_key("loss.beta", c.metatrain.weights.beta));
  b.emplace("loss.gamma", bind_key("loss.gamma", c.metatrain.weights.gamma));
  b.emplace("pretrain.epochs", bind_key("pretrain.epochs", c.pretrain.epochs));
  b.emplace("pretrain.lr", bind_key("pretrain.lr", c.pretrain.lr));
  b.emplace("pretrain.batch_size", bind_key("pretrain.batch_size", c.pretrain.batch_size));
  b.emplace("pretrain.decay_epoch", bind_key("pretrain.decay_epoch", c.pretrain.decay_epoch));
  b.emplace("pretrain.lr_decay", bind_key("pretrain.lr_decay", c.pretrain.lr_decay));
  b.emplace("openweights.epochs", bind_key("openweights.epochs", c.openweights.epochs));
  b.emplace("openweights.lr", bind_key("openweights.lr", c.openweights.lr));
  b.emplace("openweights.batch_size", bind_key("openweights.batch_size", c.openweights.batch_size));
  b.emplace("openweights.init_stddev", bind_key("openweights.init_stddev", c.openweights.init_stddev));
  b.emplace("metatrain.steps", bind_key("metatrain.steps", c.metatrain.steps));
  b.emplace("metatrain.lr", bind_key("metatrain.lr", c.metatrain.lr));
  b.emplace("metatrain.encoder_lr_ratio", bind_key("metatrain.encoder_lr_ratio", c.metatrain.encoder_lr_ratio));
  b.emplace("evaluate.episodes", bind_key("evaluate.episodes", c.evaluate.episodes));
  b.emplace("evaluate.workers", bind_key("evaluate.workers", c.evaluate.workers));
  b.emplace("evaluate.collapse_threshold", bind_key("evaluate.collapse_threshold", c.collapse_threshold));
  return b;
}

}  // namespace detail

// Nested JSON of every setting, keys sorted. Hashing its dump gives the
// config hash; `workers` and `out` are excluded since they do not change
// any result.
inline nlohmann::json canonical_json(const RunConfig& c) {
  RunConfig copy = c;
  nlohmann::json j = nlohmann::json::object();
  for (auto& [key, binding] : detail::bindings(copy)) {
    if (key == "evaluate.workers" || key == "run.out") continue;
    const auto dot = key.find('.');
    j[key.substr(0, dot)][key.substr(dot + 1)] = binding.write();
  }
  return j;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(canonical_json(c).dump())); }

// Applies INI text ([section] then key = value lines, ';' or '#' comments)
// on top of `base`. Unknown sections or keys are errors.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  auto b = detail::bindings(base);
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : keys) {
      const std::string full = section + "." + key;
      auto it = b.find(full);
      if (it == b.end()) throw ConfigError("config: unknown key '" + full + "'");
      it->second.read(value.data());
    }
  }
  base.encoder.input_dim = base.dataset.dim;
  validate(base);
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Ablation presets. Each one overrides the flags and the loss weights the
// row depends on; all other settings stay as configured.
inline void apply_preset(RunConfig& c, const std::string& name) {
  auto& w = c.metatrain.weights;
  if (name == "baseline") {
    c.flags = {false, false, false, false, false};
    w.alpha = 0.0, w.beta = 0.0;
    c.model.num_generators = 1;
  } else if (name == "rpc") {
    c.flags = {true, false, false, false, false};
    w.alpha = 0.0, w.beta = 0.0;
    c.model.num_generators = 1;
  } else if (name == "mng") {
    c.flags = {true, true, false, false, false};
    w.alpha = 1.0, w.beta = 0.0;
  } else if (name == "ct") {
    c.flags = {true, true, true, false, false};
    w.alpha = 1.0, w.beta = 0.0;
  } else if (name == "dnpg") {
    c.flags = {true, true, true, true, false};
    w.alpha = 1.0, w.beta = 1.0;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected baseline, rpc, mng, ct or dnpg)");
  }
  validate(c);
}

}  // namespace dnpg
