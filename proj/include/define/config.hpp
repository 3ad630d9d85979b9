#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "define/embedder.hpp"
#include "define/lm.hpp"

// Run configuration: one flat JSON document with dotted keys (model.n,
// train.lr, ...). Command-line flags override individual keys. Every run
// directory receives the exact resolved document that was used.

namespace define {

struct RunConfig {
  std::string train_path;
  std::string valid_path;  // optional
  std::uint64_t min_count = 1;
  DefineConfig model;            // vocab_size 0 means "from the corpus"
  std::size_t hidden_dim = 128;
  std::size_t lstm_layers = 1;
  TrainConfig train;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
  }

  std::vector<std::string> problems(bool need_corpus) const {
    std::vector<std::string> out;
    if (need_corpus && train_path.empty())
      out.push_back("corpus.train is required");
    DefineConfig probe = model;
    if (probe.vocab_size == 0) probe.vocab_size = 2;  // filled from the corpus
    for (const auto& p : probe.problems()) out.push_back("model: " + p);
    for (const auto& p : train.problems()) out.push_back("train: " + p);
    if (hidden_dim < 1) out.push_back("model.hidden must be >= 1");
    if (lstm_layers < 1) out.push_back("model.lstm_layers must be >= 1");
    return out;
  }

  void validate(bool need_corpus) const {
    auto issues = problems(need_corpus);
    if (issues.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& p : issues) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
};

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "corpus.train", "corpus.valid", "corpus.min_count",
      "model.V", "model.n", "model.k", "model.m", "model.N", "model.g_max",
      "model.variant", "model.use_reduce", "model.bias", "model.activation",
      "model.shuffle_seed", "model.dims", "model.hidden", "model.lstm_layers",
      "train.epochs", "train.lr", "train.clip", "train.momentum",
      "train.optimizer", "train.batch", "train.bptt", "train.dropout",
      "train.seed"};
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) unknown.push_back(it.key());
  if (!unknown.empty()) {
    std::string msg = "invalid config:";
    for (const auto& k : unknown) msg += "\n  - unknown key \"" + k + "\"";
    throw std::invalid_argument(msg);
  }

  RunConfig c;
  auto get = [&](const char* key, auto fallback) {
    using T = decltype(fallback);
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  };
  c.train_path = get("corpus.train", std::string{});
  c.valid_path = get("corpus.valid", std::string{});
  c.min_count = get("corpus.min_count", std::uint64_t{1});
  c.model.vocab_size = get("model.V", std::size_t{0});
  c.model.map_dim = get("model.n", std::size_t{64});
  c.model.expand_dim = get("model.k", std::size_t{256});
  c.model.out_dim = get("model.m", std::size_t{64});
  c.model.depth = get("model.N", std::size_t{3});
  c.model.max_groups = get("model.g_max", std::size_t{4});
  c.model.variant = variant_from_string(get("model.variant", std::string{"DEFINE"}));
  c.model.use_reduce = get("model.use_reduce", true);
  c.model.use_bias = get("model.bias", false);
  c.model.use_activation = get("model.activation", false);
  c.model.shuffle_seed = get("model.shuffle_seed", std::uint64_t{0});
  if (j.contains("model.dims"))
    c.model.dims = j.at("model.dims").get<std::vector<std::size_t>>();
  c.hidden_dim = get("model.hidden", std::size_t{128});
  c.lstm_layers = get("model.lstm_layers", std::size_t{1});
  c.train.epochs = get("train.epochs", std::size_t{1});
  c.train.learning_rate = get("train.lr", 1.0);
  c.train.clip_norm = get("train.clip", 0.25);
  c.train.momentum = get("train.momentum", 0.0);
  c.train.optimizer = get("train.optimizer", std::string{"SGD"});
  c.train.batch_size = get("train.batch", std::size_t{20});
  c.train.bptt_len = get("train.bptt", std::size_t{32});
  c.train.dropout = get("train.dropout", 0.0);
  c.train.seed = get("train.seed", std::uint64_t{0});
  return c;
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["corpus.train"] = train_path;
  j["corpus.valid"] = valid_path;
  j["corpus.min_count"] = min_count;
  j["model.V"] = model.vocab_size;
  j["model.n"] = model.map_dim;
  j["model.k"] = model.expand_dim;
  j["model.m"] = model.out_dim;
  j["model.N"] = model.depth;
  j["model.g_max"] = model.max_groups;
  j["model.variant"] = variant_name(model.variant);
  j["model.use_reduce"] = model.use_reduce;
  j["model.bias"] = model.use_bias;
  j["model.activation"] = model.use_activation;
  j["model.shuffle_seed"] = model.shuffle_seed;
  if (!model.dims.empty()) j["model.dims"] = model.dims;
  j["model.hidden"] = hidden_dim;
  j["model.lstm_layers"] = lstm_layers;
  j["train.epochs"] = train.epochs;
  j["train.lr"] = train.learning_rate;
  j["train.clip"] = train.clip_norm;
  j["train.momentum"] = train.momentum;
  j["train.optimizer"] = train.optimizer;
  j["train.batch"] = train.batch_size;
  j["train.bptt"] = train.bptt_len;
  j["train.dropout"] = train.dropout;
  j["train.seed"] = train.seed;
  return j;
}

}  // namespace define
